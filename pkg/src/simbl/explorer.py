"""One-step safe MPC for regulation and exploration, plus baselines.

The explorer solves, at each visited state, a min-max control problem:
minimize over the (tanh-bounded) torque a weighted sum of stage cost,
negated info-gain, and next-state value, with the safe-set constraint
V(x+) <= l*_s relaxed through a log-barrier; maximize the value-plus-
barrier bracket over the model's hyper-diamond uncertainty.  l*_s is
the verified level l_u * l_s, so staying below it preserves the
probabilistic certificate while the controller seeks out states where
the model is still uncertain.

The semi-random baseline bangs full torque with a random sign until V
approaches the level, then hands over to the safe policy.  Coverage of
either strategy is measured on a fixed occupancy grid.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .confidence import project_to_diamond, scaled_l1_norm
from .errors import ContractViolation
from .lyapunov import evaluate_V, stage_cost
from .optim import Adam
from .pendulum import (DEFAULT_STAGE_Q, DEFAULT_STAGE_R, denormalize,
                       normalize, step)
from .policy import BARRIER_FLOOR, _clamp_low

__all__ = [
    "ExplorationConfig", "OccupancyGrid", "Trajectory",
    "info_gain", "mpc_objective", "safe_mpc_action", "semi_random_action",
    "mpc_strategy", "semi_random_strategy", "run_exploration",
    "coverage_volume",
]


@dataclass
class ExplorationConfig:
    """Weights and solver budget for the exploration MPC."""

    alpha: float = 100.0       # exploration weight
    beta: float = 1.0          # exploitation weight
    gamma: float = 100.0       # barrier weight
    l_star: float = 1.0        # verified level l_u * l_s
    outer: int = 3             # min-max alternations
    min_steps: int = 3000      # Adam steps on u
    min_lr: float = 0.1
    max_steps: int = 100       # projected SGD ascent steps on w
    max_lr: float = 1e-4
    sigma_bar: float = 2.0
    q: tuple = tuple(np.diag(DEFAULT_STAGE_Q))
    r: float = DEFAULT_STAGE_R
    seed: int = 0

    def __post_init__(self):
        if self.alpha > self.gamma:
            raise ContractViolation("exploration weight must satisfy alpha <= gamma")
        if not 0.0 <= self.beta <= 1.0:
            raise ContractViolation("beta must be in [0, 1]")
        if self.l_star <= 0:
            raise ContractViolation("l_star must be positive")


class OccupancyGrid:
    """Visit counts on a uniform grid over the normalized state box."""

    def __init__(self, counts=(50, 50), bounds=((-1.0, 1.0), (-1.0, 1.0))):
        self.counts = tuple(int(c) for c in counts)
        self.bounds = tuple(tuple(map(float, b)) for b in bounds)
        self.cells = np.zeros(self.counts, dtype=np.int64)

    def add(self, x):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        idx = []
        for d, ((lo, hi), n) in enumerate(zip(self.bounds, self.counts)):
            i = np.floor((x[:, d] - lo) / (hi - lo) * n).astype(int)
            idx.append(np.clip(i, 0, n - 1))
        np.add.at(self.cells, tuple(idx), 1)

    @property
    def volume(self):
        return float(np.count_nonzero(self.cells)) / self.cells.size


def coverage_volume(grid):
    """Occupied-cell area fraction of the state box."""
    return grid.volume


@dataclass
class Trajectory:
    """Per-step exploration record (normalized states)."""

    states: np.ndarray      # (n, 2) state at which each action was taken
    inputs: np.ndarray      # (n,)
    values: np.ndarray      # (n,) V at each state
    violated: np.ndarray    # (n,) bool, V > l_star

    def __len__(self):
        return len(self.inputs)


# ----------------------------------------------------------------------
# exploration objective


def info_gain(x, u, model):
    """Normalized squared predictive variance, (1/n_x) sum std_ii^2/sy_ii^2.

    Differentiable in u through the model's std head.  Returns a (N,)
    Tensor over the batch; sigma_y is floored so an overconfident
    measurement model cannot blow the ratio up.
    """
    x = T.as_tensor(x)
    u = T.as_tensor(u)
    _, std = model.predict_delta(x, u)
    n_x = x.data.shape[1]
    sy = getattr(model, "sigma_y", None)
    if callable(sy):
        sy = sy()
    sy = np.ones(n_x) if sy is None else np.asarray(sy.data, dtype=float)
    sy = np.maximum(sy, 1e-8)
    return T.sum_(T.square(std) * T.Tensor(1.0 / (n_x * sy ** 2)), axis=1)


def mpc_objective(x, u, w_hat, lyap, l_star, model, cfg):
    """Relaxed exploration cost at one state for a given (u, w_hat).

    beta*l(x,u) - alpha*info_gain + beta*V(x+) - gamma*log(l*_s - V(x+))
    with x+ = x + dt*(mu + w_hat).  Returns (scalar Tensor, V(x+) data).
    alpha=0 is plain relaxed regulation MPC.
    """
    x = T.as_tensor(x)
    u = T.as_tensor(u)
    mu, _ = model.predict_delta(x, u)
    xp = x + (mu + w_hat) * model.dt
    v_next = evaluate_V(xp, lyap)
    margin = _clamp_low(l_star - v_next, BARRIER_FLOOR)
    inner = cfg.beta * v_next - cfg.gamma * T.log(margin)
    cost = cfg.beta * stage_cost(x, u, cfg.q, cfg.r, model.dt) \
        - cfg.alpha * info_gain(x, u, model) + inner
    return T.mean_(cost), v_next.data.copy()


def _ascend_w(x, u_data, w_data, lyap, l_star, model, cfg):
    """Projected gradient ascent of the value-plus-barrier bracket over
    the hyper-diamond; returns the updated centre offset."""
    x_t = T.as_tensor(x)
    u_t = T.Tensor(u_data)
    with T.no_grad():
        mu, std = model.predict_delta(x_t, u_t)
    sigma = std.data[0]
    if not np.any(sigma > 0):
        return np.zeros_like(w_data)
    mu_c = T.Tensor(mu.data)
    w = w_data.copy()
    for _ in range(cfg.max_steps):
        w_t = T.Tensor(w, requires_grad=True)
        xp = x_t + (mu_c + w_t) * model.dt
        v_next = evaluate_V(xp, lyap)
        margin = _clamp_low(l_star - v_next, BARRIER_FLOOR)
        bracket = T.mean_(cfg.beta * v_next - cfg.gamma * T.log(margin))
        bracket.backward()
        w = w + cfg.max_lr * w_t.grad
        w[0] = project_to_diamond(w[0], sigma, cfg.sigma_bar)
        assert scaled_l1_norm(sigma, w[0]) <= cfg.sigma_bar * (1 + 1e-12)
    return w


def safe_mpc_action(x, lyap, l_star, model, cfg, safe_policy, diag=None):
    """Solve the one-step exploration MPC at normalized state x.

    Alternates cfg.outer rounds of diamond ascent on the uncertainty
    offset and Adam descent on the tanh-parameterized torque, warm
    started at the safe policy.  If the solution's next state still
    violates the barrier, falls back to the safe policy's action; diag
    (a dict, when given) reports the fallback and the final objective.
    """
    x = np.reshape(np.asarray(x, dtype=float), (1, 2))
    u_max = getattr(safe_policy, "u_max", None)
    u_max = float(model.torque_scale) if u_max is None else float(u_max)
    with T.no_grad():
        u0 = safe_policy(T.Tensor(x))
    u0 = np.asarray(getattr(u0, "data", u0), dtype=float).reshape(1, 1)
    z = np.clip(u0 / u_max, -1.0 + 1e-9, 1.0 - 1e-9)
    xi = T.Tensor(np.arctanh(z), requires_grad=True)
    w = np.zeros((1, 2))

    for _ in range(cfg.outer):
        w = _ascend_w(x, u_max * np.tanh(xi.data), w, lyap, l_star, model, cfg)
        w_t = T.Tensor(w)
        opt = Adam([xi], lr=cfg.min_lr)
        for _ in range(cfg.min_steps):
            u = T.tanh(xi) * u_max
            obj, _ = mpc_objective(x, u, w_t, lyap, l_star, model, cfg)
            obj.backward()
            opt.step()

    u_final = float(u_max * np.tanh(xi.data[0, 0]))
    with T.no_grad():
        _, v_next = mpc_objective(x, np.array([[u_final]]), T.Tensor(w),
                                  lyap, l_star, model, cfg)
    fallback = bool(v_next[0] >= l_star - BARRIER_FLOOR)
    if fallback:
        u_final = float(u0[0, 0])
    if diag is not None:
        diag["fallback"] = fallback
        diag["v_next"] = float(v_next[0])
        diag["w_hat"] = w[0].copy()
    return u_final


def semi_random_action(x, lyap, l_s, safe_policy, seed):
    """Full random-sign torque until V(x) reaches 0.99 l_s, then the
    safe policy.  seed may be an int or a Generator (reused across
    calls for a trajectory)."""
    rng = np.random.default_rng(seed)
    x = np.reshape(np.asarray(x, dtype=float), (1, 2))
    with T.no_grad():
        v = evaluate_V(x, lyap).data[0]
    u_max = float(safe_policy.u_max)
    if v < 0.99 * l_s:
        return float(u_max if rng.random() < 0.5 else -u_max)
    with T.no_grad():
        u = safe_policy(T.Tensor(x))
    return float(np.asarray(getattr(u, "data", u)).ravel()[0])


# ----------------------------------------------------------------------
# environment rollouts


def mpc_strategy(lyap, model, cfg, safe_policy):
    """Exploration-MPC strategy closure for run_exploration; counts
    barrier fallbacks on its .fallbacks attribute."""
    def act(x, rng):
        diag = {}
        u = safe_mpc_action(x, lyap, cfg.l_star, model, cfg, safe_policy,
                            diag=diag)
        act.fallbacks += int(diag["fallback"])
        return u
    act.fallbacks = 0
    return act


def semi_random_strategy(lyap, l_s, safe_policy):
    def act(x, rng):
        return semi_random_action(x, lyap, l_s, safe_policy, rng)
    return act


def run_exploration(env, strategy, n_steps, lyap, cfg, seed, x0=(0.0, 0.0),
                    grid=None):
    """Roll the true environment for n_steps under a strategy.

    strategy is a callable (normalized state, rng) -> torque.  Records
    the state at every decision point on the occupancy grid and counts
    violations of V(x) > l*_s (recorded, never fatal).  Returns
    (Trajectory, OccupancyGrid, violation count).
    """
    rng = np.random.default_rng(seed)
    grid = OccupancyGrid() if grid is None else grid
    x = np.asarray(x0, dtype=float).copy()
    states = np.empty((n_steps, 2))
    inputs = np.empty(n_steps)
    values = np.empty(n_steps)
    violated = np.zeros(n_steps, dtype=bool)
    for t in range(n_steps):
        with T.no_grad():
            v = evaluate_V(x.reshape(1, 2), lyap).data[0]
        u = float(strategy(x, rng))
        states[t] = x
        inputs[t] = u
        values[t] = v
        violated[t] = v > cfg.l_star
        grid.add(x)
        x = normalize(step(denormalize(x), u, env))
    traj = Trajectory(states=states, inputs=inputs, values=values,
                      violated=violated)
    return traj, grid, int(violated.sum())
