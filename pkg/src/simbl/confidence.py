"""One-step hyper-diamond confidence sets over predicted increments.

The set of plausible next states around a prediction (mu, sigma) is
  { x + dt*(mu + w) : ||sigma^-1 w||_1 <= sigma_bar },
an l1 ball stretched per dimension by the predicted standard deviation.
Its 2*n_x vertices are the columns of sigma @ (sigma_bar*[I, -I]), which
is all the robust losses ever touch.  The set centre can additionally be
shifted by a sampled w_hat ~ N(0, sigma^2) (reparameterized, so gradients
reach sigma).
"""

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractViolation

__all__ = [
    "ConfidenceSet", "vertices", "sample_center", "vertex_batch",
    "scaled_l1_norm", "project_to_diamond", "vertex_masks",
]


def vertex_masks(n_x):
    """Rows of sigma_bar-free vertex directions: +e_1..+e_n, -e_1..-e_n."""
    eye = np.eye(n_x)
    return np.concatenate([eye, -eye], axis=0)


@dataclass
class ConfidenceSet:
    """Diamond of next states around x + dt*mu.

    x, mu, sigma are length-n_x vectors (numpy or Tensor); sigma is the
    predicted std per dimension, sigma_bar the z-score radius.
    """

    x: object
    mu: object
    sigma: object
    sigma_bar: float = 2.0
    dt: float = 0.01

    def __post_init__(self):
        if self.sigma_bar <= 0:
            raise ContractViolation("sigma_bar must be positive")
        sig = self.sigma.data if isinstance(self.sigma, T.Tensor) else np.asarray(self.sigma)
        if np.any(sig < 0):
            raise ContractViolation("sigma must be elementwise nonnegative")

    @property
    def n_x(self):
        sig = self.sigma.data if isinstance(self.sigma, T.Tensor) else np.asarray(self.sigma)
        return sig.size


def vertices(cset, w_hat=None):
    """The 2*n_x vertex next-states as a (2*n_x, n_x) Tensor.

    point_k = x + dt*(mu + w_hat + sigma_bar*sigma*mask_k).  With
    sigma = 0 the diamond collapses and every vertex equals the centre.
    """
    n = cset.n_x
    if w_hat is None:
        w_hat = np.zeros(n)
    x = T.as_tensor(cset.x).reshape((1, n))
    mu = T.as_tensor(cset.mu).reshape((1, n))
    w = T.as_tensor(w_hat).reshape((1, n))
    sig = T.as_tensor(cset.sigma).reshape((1, n))
    masks = T.Tensor(cset.sigma_bar * vertex_masks(n))  # (2n, n)
    return x + (mu + w + sig * masks) * cset.dt


def sample_center(cset, seed):
    """Draw w_hat ~ N(0, sigma^2) as sigma * zeta with zeta fixed by seed."""
    zeta = np.random.default_rng(seed).standard_normal(cset.n_x)
    return T.as_tensor(cset.sigma).reshape((cset.n_x,)) * T.Tensor(zeta)


def vertex_batch(x, mu, sigma, w_hat, sigma_bar, dt):
    """Vertices for a batch of states, stacked along axis 0.

    x, mu, sigma, w_hat: (N, n_x) Tensors (w_hat may be None for a
    centered diamond).  Returns a (2*n_x*N, n_x) Tensor ordered vertex-
    major: rows [0:N] are the +e_1 vertices, [N:2N] the +e_2 ones, etc.
    Reshape a function of it to (2*n_x, N) before reducing over vertices.
    """
    n = x.data.shape[1]
    base = x + mu * dt if w_hat is None else x + (mu + w_hat) * dt
    parts = []
    for mask in vertex_masks(n):
        parts.append(base + sigma * T.Tensor((sigma_bar * dt) * mask))
    return T.concat(parts, axis=0)


def scaled_l1_norm(sigma, w):
    """||sigma^-1 w||_1 with the zero-sigma convention.

    A dimension with sigma_i = 0 admits only w_i = 0; any other value
    makes the norm infinite.
    """
    sigma, w = np.broadcast_arrays(np.asarray(sigma, dtype=float), np.asarray(w, dtype=float))
    live = sigma > 0
    out = np.where(live, np.abs(w) / np.where(live, sigma, 1.0), np.where(w == 0, 0.0, np.inf))
    return float(np.sum(out)) if out.ndim <= 1 else np.sum(out, axis=-1)


def project_to_diamond(w, sigma, sigma_bar):
    """Scale w back onto ||sigma^-1 w||_1 <= sigma_bar if it escaped.

    Exact for the l1 diamond: shrink radially by sigma_bar/norm.  Entries
    with sigma_i = 0 are zeroed (the set has no extent there).
    """
    w = np.array(w, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    w[sigma == 0] = 0.0
    norm = scaled_l1_norm(sigma, w)
    if norm > sigma_bar and np.isfinite(norm) and norm > 0:
        w *= sigma_bar / norm
    return w
