"""Uncertainty-aware recurrent forward model of the pendulum.

The model predicts per-dt increments of the normalized state:
    dx = mean(x, u) + w,   w ~ N(0, diag(std(x, u))^2)
with the first mean component hard-wired to 2*x2 (the normalized angle
rate is exactly twice the normalized velocity), a shared tanh trunk, and
a sigmoid-bounded std head so std < sigma_w everywhere.

Training minimizes a three-term loss: Gaussian NLL along sampled rollouts,
a closed-form KL pushing std toward its sigma_w bound on background
(out-of-distribution) rollouts, and a hinge keeping the new model's std
below the previous model's on training data.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation, EmptyBackground, NumericFault
from .pendulum import STATE_SCALE, normalize, wrap_angle

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class ModelConfig:
    sigma_w: float = 0.01
    hidden: int = 64
    horizon: int = 10
    lr: float = 1e-4
    max_epochs: int = 1000
    first_target_loss: float = -2.94
    n_background: int = 256
    background_resample_every: int = 5
    sigma_y_init: float = 0.01
    nll_weight: float = 1.0
    kl_weight: float = 1.0
    consistency_weight: float = 1.0


def _glorot(rng, fan_in, fan_out):
    scale = math.sqrt(2.0 / (fan_in + fan_out))
    return rng.normal(0.0, scale, size=(fan_in, fan_out))


class ForwardModel:
    """NCP-trained Bayesian recurrent forward model, diagonal Gaussian."""

    def __init__(self, config, dt, torque_scale, seed=0):
        self.config = config
        self.dt = float(dt)
        self.torque_scale = float(torque_scale)
        self.sigma_w = config.sigma_w
        h = config.hidden
        rng = np.random.default_rng(seed)
        self.w_in = T.Tensor(_glorot(rng, 3, h), requires_grad=True)
        self.b_in = T.Tensor(np.zeros(h), requires_grad=True)
        self.w_mu = T.Tensor(_glorot(rng, h, h), requires_grad=True)
        self.b_mu = T.Tensor(np.zeros(h), requires_grad=True)
        self.w_mu_out = T.Tensor(_glorot(rng, h, 1), requires_grad=True)
        self.b_mu_out = T.Tensor(np.zeros(1), requires_grad=True)
        self.w_sg = T.Tensor(_glorot(rng, h, h), requires_grad=True)
        self.b_sg = T.Tensor(np.zeros(h), requires_grad=True)
        self.w_sg_out = T.Tensor(_glorot(rng, h, 2), requires_grad=True)
        self.b_sg_out = T.Tensor(np.zeros(2), requires_grad=True)
        # softplus(raw) = sigma_y_init at start; learned, ignored at control time
        raw = math.log(math.expm1(config.sigma_y_init))
        self.sigma_y_raw = T.Tensor(np.full(2, raw), requires_grad=True)
        self.final_loss = None
        self.dataset_points = 0
        self.seed = seed

    # ------------------------------------------------------------------
    def parameters(self):
        return [self.w_in, self.b_in, self.w_mu, self.b_mu, self.w_mu_out,
                self.b_mu_out, self.w_sg, self.b_sg, self.w_sg_out,
                self.b_sg_out, self.sigma_y_raw]

    _NAMES = ("w_in", "b_in", "w_mu", "b_mu", "w_mu_out", "b_mu_out",
              "w_sg", "b_sg", "w_sg_out", "b_sg_out", "sigma_y_raw")

    def named_arrays(self):
        return {name: getattr(self, name).data for name in self._NAMES}

    def sigma_y(self):
        return T.softplus(self.sigma_y_raw)

    def predict_delta(self, x, u):
        """Mean and std of the per-dt increment.

        x: (B, 2) normalized states, u: (B, 1) physical torque; both may be
        constants or graph tensors. Returns ((B,2) mean, (B,2) std).
        """
        x = T.as_tensor(x)
        u = T.as_tensor(u)
        xu = T.concat([x, u * (1.0 / self.torque_scale)], axis=1)
        trunk = T.tanh(T.affine(xu, self.w_in, self.b_in))
        f_mu = T.affine(T.tanh(T.affine(trunk, self.w_mu, self.b_mu)),
                        self.w_mu_out, self.b_mu_out)
        mean = T.concat([x[:, 1:2] * 2.0, f_mu], axis=1)
        raw = T.affine(T.tanh(T.affine(trunk, self.w_sg, self.b_sg)),
                       self.w_sg_out, self.b_sg_out)
        std = T.sigmoid(raw) * self.sigma_w
        return mean, std

    def rollout(self, x0, u_seq, noise_mode="sampled", seed=0, zetas=None):
        """Propagate x0 (B,2) through u_seq (B,T).

        Returns (states, means, stds): lists of length T+1 / T / T.
        In sampled mode the noise is reparameterized (std * zeta) so
        gradients flow into the std head.
        """
        if noise_mode not in ("sampled", "mean-only"):
            raise ContractViolation(f"unknown noise_mode {noise_mode!r}")
        x = T.as_tensor(x0)
        if x.ndim != 2:
            x = T.reshape(x, (1, -1))
        u_seq = np.atleast_2d(np.asarray(u_seq, dtype=np.float64))
        batch, horizon = u_seq.shape[0], u_seq.shape[1]
        if noise_mode == "sampled" and zetas is None:
            zetas = np.random.default_rng(seed).standard_normal((batch, horizon, 2))
        states, means, stds = [x], [], []
        for t in range(horizon):
            mean, std = self.predict_delta(x, u_seq[:, t:t + 1])
            delta = mean
            if noise_mode == "sampled":
                delta = delta + std * T.Tensor(zetas[:, t, :])
            x = x + delta * self.dt
            states.append(x)
            means.append(mean)
            stds.append(std)
        return states, means, stds


class KnownModel:
    """The exact environment dynamics behind the model interface, with zero
    predictive uncertainty. States must be constants (no gradient path
    through sin is provided); torque may be a graph tensor."""

    def __init__(self, params):
        self.params = params
        self.dt = params.dt
        self.torque_scale = params.u_max
        self.sigma_w = 0.0

    def predict_delta(self, x, u):
        x = T.as_tensor(x)
        u = T.as_tensor(u)
        if x.requires_grad:
            raise ContractViolation("known model takes constant states only")
        theta = x.data[:, 0] * STATE_SCALE[0]
        omega = x.data[:, 1] * STATE_SCALE[1]
        p = self.params
        drift = (p.gravity / p.length) * np.sin(theta) - (p.damping / p.inertia) * omega
        const = np.stack([2.0 * x.data[:, 1], drift / STATE_SCALE[1]], axis=1)
        gain = np.array([[0.0, 1.0 / (p.inertia * STATE_SCALE[1])]])
        mean = T.Tensor(const) + u @ T.Tensor(gain)
        std = T.Tensor(np.zeros_like(const))
        return mean, std


# ----------------------------------------------------------------------
# training data plumbing


def _unwrap_normalized(x1):
    """Remove wrap seams from a sequence of normalized angles (axis -1)."""
    d = np.diff(x1, axis=-1)
    d = (d + 1.0) % 2.0 - 1.0
    return np.concatenate([x1[..., :1], x1[..., :1] + np.cumsum(d, axis=-1)], axis=-1)


def make_subsequences(dataset, horizon):
    """Non-overlapping normalized windows: states (B, horizon+1, 2),
    inputs (B, horizon). Angles are unwrapped inside each window so the
    increments the model fits never jump across the seam."""
    all_states, all_inputs = [], []
    for ep in dataset.episodes:
        steps = len(ep.inputs)
        for start in range(0, steps - horizon + 1, horizon):
            window = ep.states[start:start + horizon + 1] / STATE_SCALE
            x1 = _unwrap_normalized(window[:, 0])
            all_states.append(np.stack([x1, window[:, 1]], axis=1))
            all_inputs.append(ep.inputs[start:start + horizon])
    if not all_states:
        raise ContractViolation(f"dataset has no window of length {horizon}")
    return np.array(all_states), np.array(all_inputs)


@dataclass
class BackgroundSet:
    x0: np.ndarray       # (N, 2) normalized
    u_seq: np.ndarray    # (N, T) physical
    acceptance: float = 1.0


def _propose_background(rng, n, horizon, torque_scale, resample_every):
    x0 = rng.uniform(-1.0, 1.0, size=(n, 2))
    blocks = -(-horizon // resample_every)
    u = rng.uniform(-torque_scale, torque_scale, size=(n, blocks))
    u_seq = np.repeat(u, resample_every, axis=1)[:, :horizon]
    return x0, u_seq


def sample_background(prev_model, n, horizon, torque_scale, seed,
                      resample_every=5, sigma_w=0.01):
    """Uniform proposals over the normalized box and torque range; with a
    previous model, keep only proposals it is still unsure about
    (any std component >= sigma_w/2 at the initial point)."""
    if n <= 0:
        raise ContractViolation("background size must be positive")
    rng = np.random.default_rng(seed)
    if prev_model is None:
        x0, u_seq = _propose_background(rng, n, horizon, torque_scale, resample_every)
        return BackgroundSet(x0, u_seq)
    kept_x, kept_u = [], []
    proposed = accepted = 0
    while accepted < n:
        m = max(4 * (n - accepted), 256)
        if proposed + m > 1_000_000:
            m = 1_000_000 - proposed
            if m <= 0:
                raise EmptyBackground(
                    f"acceptance {accepted / max(proposed, 1):.2e} after {proposed} proposals")
        x0, u_seq = _propose_background(rng, m, horizon, torque_scale, resample_every)
        _, std = prev_model.predict_delta(T.Tensor(x0), T.Tensor(u_seq[:, :1]))
        keep = np.any(std.data >= 0.5 * prev_model.sigma_w, axis=1)
        proposed += m
        accepted += int(keep.sum())
        kept_x.append(x0[keep])
        kept_u.append(u_seq[keep])
        if proposed >= 1_000_000 and accepted < max(1, int(1e-4 * proposed)):
            raise EmptyBackground(
                f"acceptance {accepted / proposed:.2e} after {proposed} proposals")
    x0 = np.concatenate(kept_x)[:n]
    u_seq = np.concatenate(kept_u)[:n]
    return BackgroundSet(x0, u_seq, acceptance=accepted / proposed)


# ----------------------------------------------------------------------
# loss


def gaussian_kl_to_bound(std, sigma_w):
    """Closed-form per-dimension KL[N(0, std^2) || N(0, sigma_w^2)]."""
    ratio = std * (1.0 / sigma_w)
    return T.square(ratio) * 0.5 - T.log(ratio) - 0.5


def model_loss(model, prev_model, states, inputs, background, seed):
    """Three-term training loss; every term is a per-point mean.

    states: (B, T+1, 2) normalized unwrapped targets; inputs: (B, T).
    The rollout starts from a sampled initial estimate x(0) + sigma_y*zeta,
    and the likelihood includes the t=0 measurement term.
    Returns (scalar Tensor, dict of float term values).
    """
    cfg = model.config
    batch, horizon = inputs.shape
    rng = np.random.default_rng(seed)
    zeta0 = rng.standard_normal((batch, 2))
    zetas = rng.standard_normal((batch, horizon, 2))
    sigma_y = model.sigma_y()
    x0 = T.Tensor(states[:, 0, :]) + sigma_y * T.Tensor(zeta0)
    xs, _, stds = model.rollout(x0, inputs, "sampled", zetas=zetas)

    nll_terms = []
    for t in range(horizon + 1):
        resid = xs[t] - T.Tensor(states[:, t, :])
        nll_t = T.log(sigma_y) + T.square(resid / sigma_y) * 0.5 + 0.5 * LOG_2PI
        nll_terms.append(T.mean_(nll_t))
    nll = sum(nll_terms[1:], nll_terms[0]) * (1.0 / (horizon + 1))

    bg_z = rng.standard_normal((background.x0.shape[0], background.u_seq.shape[1], 2))
    _, _, bg_stds = model.rollout(background.x0, background.u_seq, "sampled", zetas=bg_z)
    kl_terms = [T.mean_(gaussian_kl_to_bound(s, model.sigma_w)) for s in bg_stds]
    kl = sum(kl_terms[1:], kl_terms[0]) * (1.0 / len(kl_terms))

    terms = {"nll": nll.item(), "kl": kl.item(), "consistency": 0.0}
    total = nll * cfg.nll_weight + kl * cfg.kl_weight
    if prev_model is not None:
        cons_terms = []
        for t in range(horizon):
            _, prev_std = prev_model.predict_delta(xs[t], inputs[:, t:t + 1])
            cons_terms.append(T.mean_(T.relu(stds[t] - prev_std)))
        cons = sum(cons_terms[1:], cons_terms[0]) * (1.0 / horizon)
        terms["consistency"] = cons.item()
        total = total + cons * cfg.consistency_weight
    return total, terms


def consistency_gap(model, prev_model, states, inputs):
    """Mean ReLU(std_new - std_prev) over training points, mean rollouts."""
    xs, _, stds = model.rollout(states[:, 0, :], inputs, "mean-only")
    gaps = []
    for t in range(inputs.shape[1]):
        _, prev_std = prev_model.predict_delta(T.Tensor(xs[t].data), inputs[:, t:t + 1])
        gaps.append(np.mean(np.maximum(stds[t].data - prev_std.data, 0.0)))
    return float(np.mean(gaps))


# ----------------------------------------------------------------------
# training


def train_model(dataset, prev_model, config, seed):
    """Full-batch Adam on the three-term loss over non-overlapping windows.

    Stops early once the epoch loss reaches the previous model's final
    loss (or the configured first-model target). Returns the trained model
    with .final_loss and .history set.
    """
    from .optim import Adam

    states, inputs = make_subsequences(dataset, config.horizon)
    seeds = np.random.SeedSequence(seed).spawn(3)
    model = ForwardModel(config, dataset.params.dt, dataset.params.u_max,
                         seed=seeds[0])
    model.dataset_points = dataset.n_points
    model.seed = seed
    if prev_model is not None:
        if prev_model.final_loss is None:
            raise ContractViolation("previous model was never trained")
        target = prev_model.final_loss
    else:
        target = config.first_target_loss
    background = sample_background(prev_model, config.n_background,
                                   config.horizon, dataset.params.u_max,
                                   seed=seeds[1], sigma_w=config.sigma_w,
                                   resample_every=config.background_resample_every)
    epoch_rng = np.random.default_rng(seeds[2])
    opt = Adam(model.parameters(), lr=config.lr)
    history = []
    for epoch in range(config.max_epochs):
        loss_seed = int(epoch_rng.integers(2 ** 62))
        try:
            loss, terms = model_loss(model, prev_model, states, inputs,
                                     background, loss_seed)
            value = loss.item()
            history.append({"epoch": epoch, "loss": value, **terms})
            if value <= target:
                break
            loss.backward()
        except NumericFault as fault:
            raise NumericFault(f"epoch {epoch}: {fault}") from fault
        opt.step()
    model.final_loss = history[-1]["loss"] if history else None
    model.history = history
    model.background = background
    return model


def estimate_model_confidence(model, holdout_x, holdout_u, holdout_next, sigma_bar):
    """Fraction of holdout transitions whose true increment escapes the
    one-step diamond ||std^-1 (dx/dt - mean)||_1 <= sigma_bar."""
    holdout_x = np.asarray(holdout_x, dtype=np.float64)
    if holdout_x.size == 0:
        raise ContractViolation("empty holdout")
    xn = normalize(holdout_x)
    inc = (normalize(holdout_next) - xn)
    inc[:, 0] = wrap_angle(inc[:, 0] * np.pi) / np.pi  # seam-safe angle diff
    inc /= model.dt
    mean, std = model.predict_delta(T.Tensor(xn),
                                    T.Tensor(np.asarray(holdout_u).reshape(-1, 1)))
    z = np.abs(inc - mean.data) / np.maximum(std.data, 1e-300)
    return float(np.mean(z.sum(axis=1) > sigma_bar))


# ----------------------------------------------------------------------
# checkpoints


def save_model(path, model):
    from .serialize import write_params

    meta = {
        "kind": "forward-model",
        "sigma_w": repr(model.sigma_w),
        "dt": repr(model.dt),
        "torque_scale": repr(model.torque_scale),
        "hidden": model.config.hidden,
        "horizon": model.config.horizon,
        "final_loss": repr(model.final_loss) if model.final_loss is not None else "none",
        "dataset_points": model.dataset_points,
        "seed": model.seed,
    }
    write_params(path, model.named_arrays(), meta)


def load_model(path):
    from .serialize import read_params

    named, meta = read_params(path)
    if meta.get("kind") != "forward-model":
        raise ContractViolation(f"{path} is not a forward-model checkpoint")
    config = ModelConfig(sigma_w=float(meta["sigma_w"]),
                         hidden=int(meta["hidden"]),
                         horizon=int(meta["horizon"]))
    model = ForwardModel(config, float(meta["dt"]), float(meta["torque_scale"]))
    for name in model._NAMES:
        tensor = getattr(model, name)
        if named[name].shape != tensor.data.shape:
            raise ContractViolation(f"checkpoint shape mismatch for {name}")
        tensor.data = named[name]
    model.final_loss = None if meta["final_loss"] == "none" else float(meta["final_loss"])
    model.dataset_points = int(meta["dataset_points"])
    model.seed = int(meta["seed"])
    return model
