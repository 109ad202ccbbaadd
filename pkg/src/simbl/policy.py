"""Saturated control policies and the robust policy training loss.

Two policy forms, both with K(0) = 0 and output hard-bounded by tanh:

- linear-tanh: u = u_max * tanh(K x / u_max).  The gain K acts on the
  physical state (rad, rad/s) so its small-signal slope is directly
  comparable with a Riccati gain; the policy itself takes normalized
  states like every other network here and de-normalizes internally.
- mlp: u = u_max * tanh(net(x)) with a bias-free tanh MLP on the
  normalized state.

The training loss is the barrier-relaxed robust regulation objective:
stage cost plus the worst vertex of V(x+) - gamma*log(l_s - V(x+)) over
the sampled-centre confidence diamond, averaged over the safe part of
the grid.
"""

import numpy as np

from . import confidence as C
from . import serialize
from . import tensor as T
from .errors import ContractViolation
from .lyapunov import evaluate_V, stage_cost
from .pendulum import STATE_SCALE

__all__ = [
    "LinearTanhPolicy", "MLPPolicy", "apply_policy", "policy_loss",
    "save_policy", "load_policy", "BARRIER_FLOOR",
]

BARRIER_FLOOR = 1e-9


class LinearTanhPolicy:
    """u = u_max * tanh(Kx/u_max) with K in physical units (1x2 row)."""

    form = "linear-tanh"

    def __init__(self, k, u_max):
        self.k = T.Tensor(np.reshape(np.asarray(k, dtype=float), (2, 1)),
                          requires_grad=True)
        self.u_max = float(u_max)

    def __call__(self, x):
        x = T.as_tensor(x)
        z = (x * T.Tensor(STATE_SCALE)) @ self.k
        return T.tanh(z * (1.0 / self.u_max)) * self.u_max

    def parameters(self):
        return [self.k]

    @property
    def gain(self):
        return self.k.data.ravel().copy()

    def named_arrays(self):
        return {"k": self.k.data}


class MLPPolicy:
    """Bias-free tanh MLP on the normalized state; output tanh-bounded."""

    form = "mlp"

    def __init__(self, u_max, hidden=(32, 32), seed=0):
        self.u_max = float(u_max)
        self.hidden = tuple(hidden)
        rng = np.random.default_rng(seed)
        sizes = (2,) + self.hidden + (1,)
        self.layers = []
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (n_in + n_out))
            self.layers.append(T.Tensor(rng.uniform(-lim, lim, (n_in, n_out)),
                                        requires_grad=True))

    def __call__(self, x):
        h = T.as_tensor(x)
        for w in self.layers[:-1]:
            h = T.tanh(h @ w)
        return T.tanh(h @ self.layers[-1]) * self.u_max

    def parameters(self):
        return list(self.layers)

    def named_arrays(self):
        return {f"w{i}": w.data for i, w in enumerate(self.layers)}


def apply_policy(x, params):
    """Torque at normalized state(s) x; always within [-u_max, u_max]."""
    return params(x)


def _clamp_low(z, floor):
    return T.relu(z - floor) + floor


def policy_loss(grid, lyap, policy, model, sigma_bar, gamma, Q, R, seed):
    """Barrier-relaxed robust regulation cost, averaged over the grid.

    mean over x in grid of 1_{V(x)<=l_s} * [ l(x,u)
        + max_k ( V(x+_k) - gamma*log(l_s - V(x+_k)) ) ],
    vertices k of the diamond around a centre sampled from N(0, Sigma^2).
    Barrier arguments are clamped at BARRIER_FLOOR, so infeasible
    vertices produce a large finite penalty; the clamped fraction is
    reported alongside the loss.
    """
    x = T.as_tensor(grid)
    n = x.data.shape[0]
    rng = np.random.default_rng(seed)
    u = policy(x)
    mu, std = model.predict_delta(x, u)
    if not std.requires_grad and not np.any(std.data):
        w_hat = None
        verts = x + mu * model.dt
        n_vert = 1
    else:
        w_hat = std * T.Tensor(rng.standard_normal(std.data.shape))
        verts = C.vertex_batch(x, mu, std, w_hat, sigma_bar, model.dt)
        n_vert = 2 * x.data.shape[1]
    v_vert = evaluate_V(verts, lyap)
    margin = lyap.l_s - v_vert
    clamped_frac = float(np.mean(margin.data <= BARRIER_FLOOR))
    barrier = T.log(_clamp_low(margin, BARRIER_FLOOR))
    inner = v_vert - gamma * barrier
    if n_vert > 1:
        inner = T.max_(inner.reshape((n_vert, n)), axis=0)
    l_c = stage_cost(x, u, Q, R, model.dt) + inner
    with T.no_grad():
        v_now = evaluate_V(x, lyap).data
    inside = 0.5 * (np.sign(lyap.l_s.data - v_now) + 1.0)
    loss = T.mean_(T.Tensor(inside) * l_c)
    return loss, {"barrier_clamped_frac": clamped_frac,
                  "inside_frac": float(np.mean(inside))}


def save_policy(path, policy):
    meta = {"kind": "policy", "form": policy.form, "u_max": repr(policy.u_max)}
    if policy.form == "mlp":
        meta["hidden"] = ",".join(str(h) for h in policy.hidden)
    serialize.write_params(path, policy.named_arrays(), meta)


def load_policy(path):
    named, meta = serialize.read_params(path)
    if meta.get("kind") != "policy":
        raise ContractViolation(f"not a policy checkpoint: {path}")
    u_max = float(meta["u_max"])
    if meta["form"] == "linear-tanh":
        return LinearTanhPolicy(named["k"].ravel(), u_max)
    if meta["form"] == "mlp":
        pol = MLPPolicy(u_max, hidden=tuple(int(h) for h in meta["hidden"].split(",")))
        for i in range(len(pol.layers)):
            pol.layers[i].data = named[f"w{i}"]
        return pol
    raise ContractViolation(f"unknown policy form {meta['form']!r}")
