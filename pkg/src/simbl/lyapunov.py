"""Neural Lyapunov function, state-constraint prior, and robust losses.

The candidate function is a trainable piecewise-quadratic form
    V(x) = softplus(alpha) * (eps*||x||^2 + ||V_net(x) x||^2) + psi(x)
so V(0) = 0 and V > 0 elsewhere by construction.  V_net maps a state to
an (n_v x 2) matrix through a tanh MLP; the product with x is computed
from two column heads to keep everything as plain batched matmuls.
psi = ReLU(phi - 1) walls off states outside the usual operating region
(|x1| <= angle_cap in normalized units, i.e. |theta| <= 0.3*pi rad by
default).

The training signal is a robust one-step decrease: the next state is
taken as the worst vertex of the model's hyper-diamond confidence set,
with the diamond centre itself resampled from N(0, Sigma^2) every call.
States here live in normalized units; the stage cost de-normalizes so
its weights mean the same thing they mean to the Riccati calibration.
"""

from dataclasses import dataclass

import numpy as np

from . import confidence as C
from . import serialize
from . import tensor as T
from .errors import ContractViolation
from .pendulum import STATE_SCALE

__all__ = [
    "LyapunovConfig", "LyapunovParams", "GridSpec", "make_lyapunov",
    "evaluate_V", "psi", "stage_cost", "worst_vertex_V", "robust_decrease",
    "lyapunov_loss",
    "in_safe_set", "safe_set_volume", "grid_values",
    "save_lyapunov", "load_lyapunov",
]


@dataclass
class LyapunovConfig:
    hidden: tuple = (64, 64, 64)
    n_v: int = 100
    eps: float = 0.01
    angle_cap: float = 0.3    # |x1| bound of the usual region, normalized
    head_scale: float = 1.0   # column-head init scale when alpha_init is set
    alpha_init: float = None  # softplus(alpha_raw) at init; None rescales the
                              # heads instead so {V <= 1} starts on the unit circle
    l_s_init: float = 1.0


@dataclass
class GridSpec:
    """Rectangular training grid over the normalized state box."""

    bounds: tuple = ((-1.0, 1.0), (-1.0, 1.0))
    counts: tuple = (100, 100)

    def points(self):
        axes = [np.linspace(lo, hi, n) for (lo, hi), n in zip(self.bounds, self.counts)]
        x1, x2 = np.meshgrid(axes[0], axes[1], indexing="ij")
        return np.column_stack([x1.ravel(), x2.ravel()])

    @property
    def n_points(self):
        return int(np.prod(self.counts))


class LyapunovParams:
    """Trainable V: MLP trunk, two column heads, scale alpha, level l_s."""

    def __init__(self, config, seed):
        self.config = config
        rng = np.random.default_rng(seed)
        sizes = (2,) + tuple(config.hidden)
        self.weights = []
        self.biases = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            self.weights.append(T.Tensor(_glorot(rng, n_in, n_out), requires_grad=True))
            self.biases.append(T.Tensor(np.zeros(n_out), requires_grad=True))
        last = sizes[-1]
        self.v_out_a = T.Tensor(config.head_scale * _glorot(rng, last, config.n_v),
                                requires_grad=True)
        self.v_out_b = T.Tensor(config.head_scale * _glorot(rng, last, config.n_v),
                                requires_grad=True)
        self.b_out_a = T.Tensor(np.zeros(config.n_v), requires_grad=True)
        self.b_out_b = T.Tensor(np.zeros(config.n_v), requires_grad=True)
        if config.alpha_init is None:
            # start with {V <= 1} ~ the unit circle: median V on ||x|| = 1
            # becomes 1 with alpha left at softplus = 1
            alpha = 1.0
            net = self._unit_circle_net_quad()
            rescale = np.sqrt(max(1.0 - config.eps, 0.0) / max(net, 1e-12))
            self.v_out_a.data *= rescale
            self.v_out_b.data *= rescale
        else:
            alpha = config.alpha_init
        # softplus^-1 so the scale starts exactly at alpha
        raw = np.log(np.expm1(alpha))
        self.alpha_raw = T.Tensor(raw, requires_grad=True)
        self.l_s = T.Tensor(config.l_s_init, requires_grad=True)

    def _unit_circle_net_quad(self):
        ang = np.linspace(0.0, 2.0 * np.pi, 128, endpoint=False)
        x = np.column_stack([np.cos(ang), np.sin(ang)])
        h = x
        for w, b in zip(self.weights, self.biases):
            h = np.tanh(h @ w.data + b.data)
        v1 = h @ self.v_out_a.data + self.b_out_a.data
        v2 = h @ self.v_out_b.data + self.b_out_b.data
        rows = v1 * x[:, :1] + v2 * x[:, 1:]
        return float(np.median(np.sum(rows ** 2, axis=1)))

    def parameters(self):
        return self.weights + self.biases + [
            self.v_out_a, self.v_out_b, self.b_out_a, self.b_out_b,
            self.alpha_raw, self.l_s,
        ]

    def named_arrays(self):
        named = {}
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            named[f"w{i}"] = w.data
            named[f"b{i}"] = b.data
        named.update(v_out_a=self.v_out_a.data, v_out_b=self.v_out_b.data,
                     b_out_a=self.b_out_a.data, b_out_b=self.b_out_b.data,
                     alpha_raw=self.alpha_raw.data, l_s=self.l_s.data)
        return named

    @property
    def level(self):
        return float(self.l_s.data)


def _glorot(rng, n_in, n_out):
    lim = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def make_lyapunov(config=None, seed=0):
    return LyapunovParams(config or LyapunovConfig(), seed)


_COL1 = np.array([[1.0], [0.0]])
_COL2 = np.array([[0.0], [1.0]])


def psi(x, angle_cap=0.3):
    """Constraint prior ReLU(|x1|/cap - 1); zero on the usual region."""
    x = T.as_tensor(x)
    x1 = (x @ T.Tensor(_COL1)).reshape((x.data.shape[0],))
    return T.relu(T.absolute(x1) * (1.0 / angle_cap) - 1.0)


def evaluate_V(x, lyap):
    """V on a batch: x (N, 2) -> (N,) Tensor.  Accepts a single state too."""
    x = T.as_tensor(x)
    if x.data.ndim == 1:
        x = x.reshape((1, x.data.size))
    h = x
    for w, b in zip(lyap.weights, lyap.biases):
        h = T.tanh(T.affine(h, w, b))
    v1 = T.affine(h, lyap.v_out_a, lyap.b_out_a)   # (N, n_v) first column
    v2 = T.affine(h, lyap.v_out_b, lyap.b_out_b)   # (N, n_v) second column
    x1 = x @ T.Tensor(_COL1)
    x2 = x @ T.Tensor(_COL2)
    rows = v1 * x1 + v2 * x2                       # V_net(x) x, batched
    quad = T.sum_(T.square(rows), axis=1) + \
        lyap.config.eps * (T.square(x1) + T.square(x2)).reshape((x.data.shape[0],))
    return T.softplus(lyap.alpha_raw) * quad + psi(x, lyap.config.angle_cap)


def stage_cost(x, u, Q, R, dt=1.0):
    """Quadratic l(x, u) = (x'Qx + u'Ru) dt with x normalized, Q,R physical.

    Q is the diagonal (2,), R a scalar; x is de-normalized internally so
    the cost matches the Riccati solver's coordinates.  dt integrates
    the running cost over one step so l is commensurate with the
    one-step change of V (both O(dt)); without it no V of useful
    level-set size can beat the stage cost margin.
    """
    x = T.as_tensor(x)
    u = T.as_tensor(u)
    scale = np.asarray(Q, dtype=float) * STATE_SCALE ** 2 * dt
    cost = T.sum_(T.square(x) * T.Tensor(scale), axis=1)
    return cost + (float(R) * dt * T.square(u)).reshape((x.data.shape[0],))


def worst_vertex_V(x, mu, std, w_hat, sigma_bar, dt, lyap):
    """Max of V over the diamond vertices at each state of the batch."""
    x = T.as_tensor(x)
    if not std.requires_grad and not np.any(std.data):
        # degenerate diamond (exact model): single centre point
        center = x + mu * dt if w_hat is None else x + (mu + w_hat) * dt
        return evaluate_V(center, lyap)
    verts = C.vertex_batch(x, mu, std, w_hat, sigma_bar, dt)
    v_verts = evaluate_V(verts, lyap).reshape((2 * x.data.shape[1], x.data.shape[0]))
    return T.max_(v_verts, axis=0)


def robust_decrease(x, lyap, policy, model, sigma_bar, w_hat, Q, R):
    """Worst-vertex decrease dV(x) = max_k V(x+_k) - V(x) + l(x, u)."""
    x = T.as_tensor(x)
    u = policy(x)
    mu, std = model.predict_delta(x, u)
    v_max = worst_vertex_V(x, mu, std, w_hat, sigma_bar, model.dt, lyap)
    return v_max - evaluate_V(x, lyap) + stage_cost(x, u, Q, R, model.dt)


def lyapunov_loss(grid, lyap, policy, model, sigma_bar, rho, Q, R, seed):
    """Mean over the grid of the stability-plus-classification penalty.

    J(x) = 1_{V<=l_s}(x) * ReLU(dV)/(rho*max(V,1e-6))
           + sign(dV) * sat(l_s - V(x)),
    with the indicator and sign taken as constants (no gradient) and a
    fresh diamond centre sampled per point from N(0, Sigma^2).

    sat clamps the classification margin to [-l_s, l_s].  The raw
    perceptron form rewards inflating V without bound wherever the
    policy can never stabilise, which buries the trainable region's
    signal under a far-field arms race; the clamp is inactive on the
    whole safe set (there 0 < l_s - V <= l_s already) and saturates
    both the push on V and the vote on l_s for states beyond
    V = 2 l_s.
    """
    x = T.as_tensor(grid)
    rng = np.random.default_rng(seed)
    u = policy(x)
    mu, std = model.predict_delta(x, u)
    w_hat = std * T.Tensor(rng.standard_normal(std.data.shape))
    v_x = evaluate_V(x, lyap)
    v_max = worst_vertex_V(x, mu, std, w_hat, sigma_bar, model.dt, lyap)
    dv = v_max - v_x + stage_cost(x, u, Q, R, model.dt)

    guard = T.relu(v_x - 1e-6) + 1e-6          # max(V, 1e-6)
    j_s = T.relu(dv) / (rho * guard)
    off_origin = np.where(np.all(x.data == 0.0, axis=1), 0.0, 1.0)
    inside = 0.5 * (np.sign(lyap.l_s.data - v_x.data) + 1.0)
    sgn = np.sign(dv.data)
    cap = float(abs(lyap.l_s.data))            # saturation bound, constant
    raw = lyap.l_s - v_x
    margin = raw - T.relu(raw - cap) + T.relu(-1.0 * raw - cap)
    j = T.Tensor(inside * off_origin) * j_s + T.Tensor(sgn) * margin
    return T.mean_(j)


def in_safe_set(x, lyap):
    """V(x) <= l_s, closed sublevel set.  Scalar or (N,) boolean."""
    with T.no_grad():
        v = evaluate_V(x, lyap).data
    out = v <= lyap.l_s.data
    return bool(out[0]) if out.size == 1 and np.ndim(x) == 1 else out


def safe_set_volume(lyap, grid):
    """Fraction of grid points with V <= l_s."""
    with T.no_grad():
        return float(np.mean(evaluate_V(grid, lyap).data <= lyap.l_s.data))


def grid_values(grid, lyap, policy, model, sigma_bar, Q, R):
    """Deterministic per-point table for contour export (centre w=0)."""
    x = grid if isinstance(grid, np.ndarray) else grid.points()
    with T.no_grad():
        dv = robust_decrease(x, lyap, policy, model, sigma_bar, None, Q, R)
        v = evaluate_V(x, lyap).data
    return {
        "x1": x[:, 0], "x2": x[:, 1], "V": v, "dV": dv.data,
        "in_set": (v <= lyap.l_s.data).astype(float),
    }


def save_lyapunov(path, lyap):
    cfg = lyap.config
    meta = {
        "kind": "lyapunov", "eps": repr(cfg.eps), "n_v": cfg.n_v,
        "hidden": ",".join(str(h) for h in cfg.hidden),
        "angle_cap": repr(cfg.angle_cap),
    }
    serialize.write_params(path, lyap.named_arrays(), meta)


def load_lyapunov(path):
    named, meta = serialize.read_params(path)
    if meta.get("kind") != "lyapunov":
        raise ContractViolation(f"not a lyapunov checkpoint: {path}")
    cfg = LyapunovConfig(
        hidden=tuple(int(h) for h in meta["hidden"].split(",")),
        n_v=int(meta["n_v"]), eps=float(meta["eps"]),
        angle_cap=float(meta["angle_cap"]),
    )
    lyap = LyapunovParams(cfg, seed=0)
    for i in range(len(lyap.weights)):
        lyap.weights[i].data = named[f"w{i}"]
        lyap.biases[i].data = named[f"b{i}"]
    lyap.v_out_a.data = named["v_out_a"]
    lyap.v_out_b.data = named["v_out_b"]
    lyap.b_out_a.data = named["b_out_a"]
    lyap.b_out_b.data = named["b_out_b"]
    lyap.alpha_raw.data = named["alpha_raw"]
    lyap.l_s.data = named["l_s"]
    return lyap
