"""Monte-Carlo safety verification with ultimate-bound search.

Searches level pairs (l_u, l_l) on a delta grid, widest certificate
first.  A pair is certified when two sampled checks both pass: V must
not increase over one closed-loop step anywhere on the ring
l_l*l_s <= V(x) <= l_u*l_s, and from inside {V <= l_l*l_s} the next
state must stay below l_u*l_s.  The inner level is the ultimate bound:
below it V may rattle around, but it cannot climb past l_u*l_s.

States are rejection-sampled uniformly from the normalized state box.
Model uncertainty enters as w ~ U(-sigma_bar, sigma_bar)^n scaled by
the model's predictive std; by default a single w realization is shared
by the whole batch (cheap, but a weaker check than independent draws,
so the certificate records which one was used).  The exact environment
ignores w entirely.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .errors import ContractViolation, LevelSetTooThin
from .lyapunov import evaluate_V
from .pendulum import denormalize, normalize, step

__all__ = [
    "Certificate", "EnvironmentTarget", "ModelTarget",
    "verify", "level_schedule", "epsilon_from_samples",
    "safety_probability", "certificate_text", "parse_certificate",
    "save_certificate", "load_certificate",
]

MAX_PROPOSALS = 10_000_000


@dataclass
class Certificate:
    """Outcome of one verification run.  (l_u, l_l) are fractions of
    l_s; both are 0 when verification failed."""

    safe: bool
    l_u: float
    l_l: float
    n_samples: int
    delta: float
    epsilon_p: float
    confidence: float
    target: str
    shared_w: bool
    sigma_bar: float
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.l_l <= self.l_u <= 1.0:
            raise ContractViolation(
                f"levels must satisfy 0 <= l_l <= l_u <= 1, "
                f"got l_l={self.l_l}, l_u={self.l_u}")
        if self.n_samples < 1:
            raise ContractViolation("n_samples must be >= 1")
        if not 0.0 < self.delta < 1.0:
            raise ContractViolation("delta must be in (0, 1)")


# ----------------------------------------------------------------------
# closed-loop targets


class EnvironmentTarget:
    """Exact pendulum dynamics behind the verification interface.

    The step is noise-free, so the uncertainty realization is ignored
    and certificates against this target are exact Monte-Carlo checks
    of the true closed loop.
    """

    tag = "environment"

    def __init__(self, params):
        self.params = params

    def propagate(self, x, u, w):
        phys = denormalize(x)
        torque = np.asarray(u)[..., 0]
        return normalize(step(phys, torque, self.params))


class ModelTarget:
    """One-step forward model with its predictive uncertainty.

    x+ = x + dt*(mu + w*std) with w already drawn in (-sigma_bar,
    sigma_bar)^n; the model's std does the scaling.  Works for any
    object with predict_delta(x, u) -> (mean, std) and a dt.
    """

    tag = "model"

    def __init__(self, model):
        self.model = model

    def propagate(self, x, u, w):
        with T.no_grad():
            mu, std = self.model.predict_delta(T.Tensor(x), T.Tensor(u))
        return x + self.model.dt * (mu.data + w * std.data)


# ----------------------------------------------------------------------
# level arithmetic


def level_schedule(delta):
    """Descending level candidates 1, 1-delta, ..., ending at 0."""
    if not 0.0 < delta < 1.0:
        raise ContractViolation("delta must be in (0, 1)")
    levels = []
    k = 0
    while True:
        v = round(1.0 - k * delta, 12)
        if v <= 0.0:
            break
        levels.append(v)
        k += 1
    levels.append(0.0)
    return levels


def epsilon_from_samples(n, confidence):
    """Smallest eps with (1-eps)^n <= 1-confidence."""
    if n < 1:
        raise ContractViolation("n must be >= 1")
    if not 0.0 < confidence < 1.0:
        raise ContractViolation("confidence must be in (0, 1)")
    return 1.0 - (1.0 - confidence) ** (1.0 / n)


def safety_probability(eps_m, eps_p, p_in_safe_set):
    """(next-step probability given inside the set, unconditional bound)."""
    for name, v in (("eps_m", eps_m), ("eps_p", eps_p),
                    ("p_in_safe_set", p_in_safe_set)):
        if not 0.0 <= v <= 1.0:
            raise ContractViolation(f"{name} must be in [0, 1]")
    conditional = (1.0 - eps_m) * (1.0 - eps_p)
    return conditional, p_in_safe_set * conditional


# ----------------------------------------------------------------------
# sampling


def _values(x, lyap):
    with T.no_grad():
        return evaluate_V(x, lyap).data


def _sample_band(lyap, lo, hi, n, rng, max_proposals):
    """n uniform states from {lo <= V(x) <= hi} by rejection from the box."""
    got, proposed = [], 0
    count = 0
    chunk = max(4 * n, 8192)
    while count < n:
        if proposed >= max_proposals:
            raise LevelSetTooThin(
                f"accepted {count}/{n} states in V-band [{lo:.6g}, {hi:.6g}] "
                f"after {proposed} proposals")
        m = int(min(chunk, max_proposals - proposed))
        x = rng.uniform(-1.0, 1.0, size=(m, 2))
        proposed += m
        v = _values(x, lyap)
        keep = (v >= lo) & (v <= hi)
        if np.any(keep):
            got.append(x[keep])
            count += int(keep.sum())
    out = np.concatenate(got, axis=0)[:n]
    v = _values(out, lyap)
    assert np.all((v >= lo) & (v <= hi))
    return out


def _draw_w(rng, n, sigma_bar, shared):
    if shared:
        return rng.uniform(-sigma_bar, sigma_bar, size=(1, 2))
    return rng.uniform(-sigma_bar, sigma_bar, size=(n, 2))


def _next_values(x, lyap, policy, system, w):
    with T.no_grad():
        u = policy(T.Tensor(x))
    u = np.asarray(getattr(u, "data", u))
    xp = system.propagate(x, u, w)
    return _values(xp, lyap)


# ----------------------------------------------------------------------
# the search


def verify(lyap, policy, system, n_samples=5000, delta=0.05, sigma_bar=2.0,
           seed=0, shared_w=True, confidence=0.99,
           max_proposals=MAX_PROPOSALS):
    """Search (l_u, l_l) for a probabilistic invariance certificate.

    Levels descend from the full set, so the first success is the
    widest certificate with the smallest ultimate bound the sampler can
    defend.  Raises LevelSetTooThin when a candidate band cannot be
    populated from the state box; returns a SAFE=false certificate when
    every candidate pair fails.
    """
    if n_samples < 1:
        raise ContractViolation("n_samples must be >= 1")
    rng = np.random.default_rng(seed)
    l_s = lyap.level
    eps_p = epsilon_from_samples(n_samples, confidence)

    def done(safe, l_u, l_l):
        return Certificate(safe=safe, l_u=l_u, l_l=l_l, n_samples=n_samples,
                           delta=delta, epsilon_p=eps_p, confidence=confidence,
                           target=system.tag, shared_w=shared_w,
                           sigma_bar=sigma_bar, seed=seed)

    uppers = level_schedule(delta)
    for l_u in uppers:
        # l_l strictly below l_u: a zero-width ring has no interior to
        # sample and certifies nothing about convergence
        for l_l in [lv for lv in reversed(uppers) if lv < l_u]:
            x = _sample_band(lyap, l_l * l_s, l_u * l_s, n_samples, rng,
                             max_proposals)
            w = _draw_w(rng, n_samples, sigma_bar, shared_w)
            if not np.all(_next_values(x, lyap, policy, system, w)
                          - _values(x, lyap) <= 0.0):
                continue
            if l_l == 0.0:
                # {V <= 0} is exactly the origin; rejection cannot hit it
                x_in = np.zeros((n_samples, 2))
            else:
                x_in = _sample_band(lyap, 0.0, l_l * l_s, n_samples, rng,
                                    max_proposals)
            w = _draw_w(rng, n_samples, sigma_bar, shared_w)
            if np.all(_next_values(x_in, lyap, policy, system, w)
                      <= l_u * l_s):
                return done(True, l_u, l_l)
    return done(False, 0.0, 0.0)


# ----------------------------------------------------------------------
# flat text record

_BOOLS = {"true": True, "false": False}


def certificate_text(cert):
    lines = []
    for f in fields(Certificate):
        v = getattr(cert, f.name)
        if isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"


def parse_certificate(text):
    record = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        key, _, raw = line.partition("=")
        record[key.strip()] = raw.strip()
    kwargs = {}
    for f in fields(Certificate):
        raw = record[f.name]
        if f.type is bool or f.name in ("safe", "shared_w"):
            kwargs[f.name] = _BOOLS[raw]
        elif f.name in ("n_samples", "seed"):
            kwargs[f.name] = int(raw)
        elif f.name == "target":
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = float(raw)
    return Certificate(**kwargs)


def save_certificate(path, cert):
    with open(path, "w") as fh:
        fh.write(certificate_text(cert))


def load_certificate(path):
    with open(path) as fh:
        return parse_certificate(fh.read())
