"""Ground-truth inverted pendulum, discrete LQR baseline, data collection.

The environment works in physical units (rad, rad/s, N*m). Networks and
grids elsewhere consume states normalized by STATE_SCALE (angle by pi,
velocity by 2*pi), so both directions of that conversion live here too.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, RiccatiDivergence

# normalization applied wherever networks consume states
STATE_SCALE = np.array([np.pi, 2.0 * np.pi])

# stage-cost weights tuned so lqr_gain on the default plant returns
# [-7.26, -2.55]; scale chosen with q1 = 1 to keep the cost O(1) on the
# operating box (the gain is invariant to scaling Q and R together)
DEFAULT_STAGE_Q = np.diag([1.0, 0.16209572563888183])
DEFAULT_STAGE_R = 0.0168887811248355


@dataclass(frozen=True)
class PendulumParams:
    mass: float = 0.25
    length: float = 0.5
    gravity: float = 9.81
    damping: float = 0.05
    dt: float = 0.01
    # max torque holds the pendulum at exactly 60 degrees, so larger
    # angles are beyond constant-torque recovery
    u_max: float = field(default=0.25 * 9.81 * 0.5 * math.sin(math.pi / 3.0))

    def __post_init__(self):
        for name in ("mass", "length", "gravity", "damping", "dt", "u_max"):
            if getattr(self, name) <= 0:
                raise ContractViolation(f"{name} must be positive")
        if self.u_max >= self.mass * self.gravity * self.length:
            raise ContractViolation("u_max must stay below the hanging torque m*g*l")

    @property
    def inertia(self):
        return self.mass * self.length ** 2


def wrap_angle(theta):
    return (theta + np.pi) % (2.0 * np.pi) - np.pi


def normalize(x):
    return np.asarray(x, dtype=np.float64) / STATE_SCALE


def denormalize(x):
    return np.asarray(x, dtype=np.float64) * STATE_SCALE


def step(state, torque, params):
    """One explicit-Euler step of the true dynamics.

    Broadcasts over leading axes: state (..., 2), torque scalar or (...,).
    Torque is clamped to the actuator bounds before integration; the
    returned angle is wrapped to [-pi, pi).
    """
    state = np.asarray(state, dtype=np.float64)
    torque = np.asarray(torque, dtype=np.float64)
    if not (np.all(np.isfinite(state)) and np.all(np.isfinite(torque))):
        raise ContractViolation("non-finite state or torque")
    u = np.clip(torque, -params.u_max, params.u_max)
    theta = state[..., 0]
    omega = state[..., 1]
    acc = (params.gravity / params.length) * np.sin(theta) \
        + u / params.inertia - (params.damping / params.inertia) * omega
    out = np.empty_like(state)
    out[..., 0] = wrap_angle(theta + params.dt * omega)
    out[..., 1] = omega + params.dt * acc
    return out


def linearized(params):
    """Discrete-time (A, B) of the step map at the upright origin."""
    dt, inertia = params.dt, params.inertia
    a = np.array([
        [1.0, dt],
        [dt * params.gravity / params.length, 1.0 - dt * params.damping / inertia],
    ])
    b = np.array([[0.0], [dt / inertia]])
    return a, b


def lqr_gain(params, q=None, r=None, tol=1e-10, max_iter=100_000):
    """State-feedback gain for the linearized plant, u = K x convention
    (entries come out negative). Solves the discrete Riccati equation by
    fixed-point iteration from P = Q."""
    q = DEFAULT_STAGE_Q if q is None else np.atleast_2d(np.asarray(q, dtype=np.float64))
    if q.shape == (1, 2) or q.shape == (2, 1):
        q = np.diag(q.ravel())
    r = DEFAULT_STAGE_R if r is None else float(r)
    if r <= 0:
        raise ContractViolation("R must be positive definite")
    if np.any(np.diag(q) < 0) or abs(q[0, 1] - q[1, 0]) > 1e-12:
        raise ContractViolation("Q must be symmetric positive semidefinite")
    a, b = linearized(params)
    p = q.copy()
    for _ in range(max_iter):
        bpb = r + (b.T @ p @ b)[0, 0]
        bpa = b.T @ p @ a
        p_next = q + a.T @ p @ a - (a.T @ p @ b) @ bpa / bpb
        if np.max(np.abs(p_next - p)) < tol:
            p = p_next
            break
        p = p_next
    else:
        raise RiccatiDivergence(f"no Riccati fixed point after {max_iter} iterations")
    k = -(b.T @ p @ a).ravel() / (r + (b.T @ p @ b)[0, 0])
    return k


def riccati_residual(params, q, r, p):
    a, b = linearized(params)
    bpb = r + (b.T @ p @ b)[0, 0]
    rhs = q + a.T @ p @ a - (a.T @ p @ b) @ (b.T @ p @ a) / bpb
    return np.max(np.abs(p - rhs))


def lqr_value_matrix(params, q=None, r=None, tol=1e-10, max_iter=100_000):
    """The Riccati fixed point P itself (V_lqr(x) = x' P x)."""
    q = DEFAULT_STAGE_Q if q is None else np.atleast_2d(np.asarray(q, dtype=np.float64))
    r = DEFAULT_STAGE_R if r is None else float(r)
    a, b = linearized(params)
    p = q.copy()
    for _ in range(max_iter):
        bpb = r + (b.T @ p @ b)[0, 0]
        p_next = q + a.T @ p @ a - (a.T @ p @ b) @ (b.T @ p @ a) / bpb
        if np.max(np.abs(p_next - p)) < tol:
            return p_next
        p = p_next
    raise RiccatiDivergence(f"no Riccati fixed point after {max_iter} iterations")


def lqr_policy(k, params):
    """Saturated linear state feedback in physical units, u = clip(K x)."""
    k = np.asarray(k, dtype=np.float64).ravel()

    def policy(x_phys):
        return float(np.clip(k @ np.asarray(x_phys, dtype=np.float64),
                             -params.u_max, params.u_max))

    return policy


# ----------------------------------------------------------------------
# data collection


@dataclass
class Episode:
    states: np.ndarray          # (T+1, 2) physical, angle wrapped
    inputs: np.ndarray          # (T,)
    state_noise: float
    input_noise: float

    def triples(self):
        return self.states[:-1], self.inputs, self.states[1:]


@dataclass
class Dataset:
    episodes: list
    params: PendulumParams
    seed: int

    @property
    def n_points(self):
        return sum(len(ep.inputs) for ep in self.episodes)


EPISODE_LEN = 1000
NOISE_DOUBLING_POINTS = 10_000
BASE_STATE_NOISE = 0.1
BASE_INPUT_NOISE = 0.01


def collect_dataset(policy, n_points, params, seed, episode_len=EPISODE_LEN):
    """Roll the true environment under `policy` (physical state -> torque)
    with perturbed initial states and inputs.

    Noise starts at (0.1, 0.01) and doubles every 10k collected points, so
    later episodes push the system further from the regulated trajectory.
    The levels are in normalized units (initial-state std scaled by the
    state normalization, input std by u_max); in raw radians the base level
    would keep every trajectory inside a twentieth of the operating box.
    """
    rng = np.random.default_rng(seed)
    episodes = []
    collected = 0
    while collected < n_points:
        level = collected // NOISE_DOUBLING_POINTS
        state_noise = BASE_STATE_NOISE * 2.0 ** level
        input_noise = BASE_INPUT_NOISE * 2.0 ** level
        steps = min(episode_len, n_points - collected)
        x = rng.normal(0.0, state_noise, size=2) * STATE_SCALE
        x[0] = wrap_angle(x[0])
        states = np.empty((steps + 1, 2))
        inputs = np.empty(steps)
        states[0] = x
        for t in range(steps):
            u = policy(states[t]) + rng.normal(0.0, input_noise) * params.u_max
            u = float(np.clip(u, -params.u_max, params.u_max))
            inputs[t] = u
            states[t + 1] = step(states[t], u, params)
        episodes.append(Episode(states, inputs, state_noise, input_noise))
        collected += steps
    return Dataset(episodes, params, seed)


def save_dataset(path, dataset):
    import csv
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "t", "x1", "x2", "u", "x1_next", "x2_next"])
        for e, ep in enumerate(dataset.episodes):
            xs, us, xn = ep.triples()
            for t in range(len(us)):
                writer.writerow([e, t] + [f"{v:.17g}" for v in
                                          (xs[t, 0], xs[t, 1], us[t], xn[t, 0], xn[t, 1])])


def load_dataset(path, params, seed=-1):
    import csv
    rows = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["episode", "t"]:
            raise ContractViolation(f"unexpected dataset header: {header}")
        for row in reader:
            rows.setdefault(int(row[0]), []).append([float(v) for v in row[1:]])
    episodes = []
    for e in sorted(rows):
        chunk = np.array(sorted(rows[e], key=lambda r: r[0]))
        steps = len(chunk)
        states = np.empty((steps + 1, 2))
        states[:-1] = chunk[:, 1:3]
        states[-1] = chunk[-1, 4:6]
        episodes.append(Episode(states, chunk[:, 3].copy(), float("nan"), float("nan")))
    return Dataset(episodes, params, seed)
