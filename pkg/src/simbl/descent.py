"""Alternate descent for the safe set: V-steps and K-steps in turns.

Each outer iteration runs a block of Adam steps on the Lyapunov loss
(training V_net, its scale alpha, and the level l_s) and then a block of
Adam steps on the barrier-relaxed policy loss (training K; l_s frozen,
it only appears inside the barrier).  The returned parameters are the
snapshot at the outer iteration whose recorded Lyapunov loss is lowest;
training past that point tends to trade stability margin for volume,
which hurts verification.

During the V-phase the policy and model are frozen, so their outputs
over the grid are evaluated once per outer iteration and re-served as
constants; the diamond centre is still resampled every inner step.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import NumericFault
from .lyapunov import (GridSpec, LyapunovConfig, lyapunov_loss, make_lyapunov,
                       safe_set_volume)
from .optim import Adam
from .pendulum import DEFAULT_STAGE_Q, DEFAULT_STAGE_R
from .policy import policy_loss

__all__ = ["DescentConfig", "DescentHistory", "train_safe_set"]


@dataclass
class DescentConfig:
    outer: int = 61
    inner_v: int = 10
    inner_k: int = 10
    lr_v: float = 1e-3
    # Adam moves a weight by at most ~lr per step, so the policy block needs
    # a larger rate than V: the gain has to travel O(1) per entry in
    # outer*inner_k steps.
    lr_k: float = 1e-2
    grid: GridSpec = field(default_factory=GridSpec)
    sigma_bar: float = 2.0
    rho: float = 1.0
    gamma: float = 100.0
    # stage weights default to the Riccati-calibrated pair so the descent
    # and lqr_gain share a target
    q: tuple = tuple(np.diag(DEFAULT_STAGE_Q))
    r: float = DEFAULT_STAGE_R
    lyapunov: LyapunovConfig = field(default_factory=LyapunovConfig)
    seed: int = 0


@dataclass
class DescentHistory:
    lyapunov_loss: list = field(default_factory=list)
    policy_loss: list = field(default_factory=list)
    l_s: list = field(default_factory=list)
    gains: list = field(default_factory=list)
    volume: list = field(default_factory=list)
    selected: int = -1

    def __len__(self):
        return len(self.lyapunov_loss)


class _FrozenPlant:
    """Constant (u, mu, std) snapshot of policy+model over a fixed grid."""

    def __init__(self, grid, policy, model):
        with T.no_grad():
            x = T.Tensor(grid)
            u = policy(x)
            mu, std = model.predict_delta(x, u)
        self.u = u.data.copy()
        self.mu = mu.data.copy()
        self.std = std.data.copy()
        self.dt = model.dt

    def policy_fn(self, x):
        return T.Tensor(self.u)

    def predict_delta(self, x, u):
        return T.Tensor(self.mu), T.Tensor(self.std)


def _snapshot(lyap, policy):
    return ([p.data.copy() for p in lyap.parameters()],
            [p.data.copy() for p in policy.parameters()])


def _restore(lyap, policy, snap):
    for p, data in zip(lyap.parameters(), snap[0]):
        p.data = data.copy()
    for p, data in zip(policy.parameters(), snap[1]):
        p.data = data.copy()


def train_safe_set(k0_policy, model, config):
    """Run Algorithm-1 alternate descent; return (lyap, policy, history).

    k0_policy is trained in place and also returned.  The model may be a
    zero-std exact-dynamics wrapper (known-model mode) or a trained
    forward model.  Raises NumericFault naming the outer iteration if a
    loss goes non-finite.
    """
    cfg = config
    lyap = make_lyapunov(cfg.lyapunov, seed=cfg.seed)
    policy = k0_policy
    grid = cfg.grid.points()
    opt_v = Adam(lyap.parameters(), lr=cfg.lr_v)
    opt_k = Adam(policy.parameters(), lr=cfg.lr_k)
    seeds = np.random.SeedSequence(cfg.seed).generate_state(4 * cfg.outer + 4)
    history = DescentHistory()
    best = (np.inf, None)

    for i in range(cfg.outer):
        try:
            frozen = _FrozenPlant(grid, policy, model)
            rng_v = np.random.default_rng(seeds[4 * i])
            for _ in range(cfg.inner_v):
                loss = lyapunov_loss(grid, lyap, frozen.policy_fn, frozen,
                                     cfg.sigma_bar, cfg.rho, cfg.q, cfg.r,
                                     seed=int(rng_v.integers(2**63)))
                if not np.isfinite(loss.item()):
                    raise NumericFault("lyapunov loss non-finite")
                loss.backward()
                opt_v.step()

            rng_k = np.random.default_rng(seeds[4 * i + 1])
            last_k = np.nan
            for _ in range(cfg.inner_k):
                loss, _ = policy_loss(grid, lyap, policy, model,
                                      cfg.sigma_bar, cfg.gamma, cfg.q, cfg.r,
                                      seed=int(rng_k.integers(2**63)))
                if not np.isfinite(loss.item()):
                    raise NumericFault("policy loss non-finite")
                loss.backward()
                opt_k.step()
                last_k = loss.item()

            frozen = _FrozenPlant(grid, policy, model)
            with T.no_grad():
                eval_loss = lyapunov_loss(grid, lyap, frozen.policy_fn, frozen,
                                          cfg.sigma_bar, cfg.rho, cfg.q, cfg.r,
                                          seed=int(seeds[4 * i + 2])).item()
        except NumericFault as err:
            raise NumericFault(f"outer iteration {i}: {err}") from err

        history.lyapunov_loss.append(eval_loss)
        history.policy_loss.append(last_k)
        history.l_s.append(lyap.level)
        history.gains.append(policy.gain.tolist() if hasattr(policy, "gain") else None)
        history.volume.append(safe_set_volume(lyap, grid))
        if eval_loss < best[0]:
            best = (eval_loss, _snapshot(lyap, policy))
            history.selected = i

    if best[1] is not None:
        _restore(lyap, policy, best[1])
    return lyap, policy, history
