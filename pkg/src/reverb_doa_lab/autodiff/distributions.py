"""Log-densities and the reparameterized Gaussian sample."""

from __future__ import annotations

import math

import numpy as np

from ..errors import DimensionError, DomainError, NumericalError
from .layers import log_softmax
from .tensor import Tensor, as_tensor, is_checked, log, make_node, mul, pick, sqrt, tsum

LOG_2PI = math.log(2.0 * math.pi)


def gaussian_log_prob(x, mu, var) -> Tensor:
    """Diagonal Gaussian log-density summed over the last axis.

    A 1-D input gives a scalar; ``(N, M)`` inputs give one value per row.
    ``var`` may be a Python scalar for a fixed isotropic variance.
    """
    x, mu, var = as_tensor(x), as_tensor(mu), as_tensor(var)
    if x.shape != mu.shape:
        raise DimensionError(f"gaussian_log_prob: x {x.shape} vs mu {mu.shape}")
    if np.any(var.data <= 0):
        raise DomainError("gaussian_log_prob needs strictly positive variance")
    diff = x - mu
    sq = mul(diff, diff)
    if var.ndim == 0:
        v = float(var.data)
        terms = (-0.5 * LOG_2PI - 0.5 * math.log(v)) - sq * (0.5 / v)
    else:
        terms = -0.5 * LOG_2PI - 0.5 * log(var) - 0.5 * (sq / var)
    return tsum(terms, axis=-1)


def standard_normal_log_prob(x) -> Tensor:
    """log N(x | 0, I) summed over the last axis."""
    x = as_tensor(x)
    return tsum(-0.5 * LOG_2PI - 0.5 * mul(x, x), axis=-1)


def categorical_log_prob(y, pi) -> Tensor:
    """``ln pi[y]`` for class index ``y`` (or one index per row of ``pi``)."""
    pi = as_tensor(pi)
    idx = np.asarray(y)
    if idx.ndim == 1 and idx.size == pi.shape[-1] and pi.ndim == 1:
        idx = np.asarray(int(np.argmax(idx)))  # one-of-T indicator
    if pi.ndim == 1:
        total = float(pi.data.sum())
        if np.any(pi.data < 0) or abs(total - 1.0) > 1e-9:
            raise DomainError("categorical_log_prob needs a probability vector")
        k = int(idx)
        if is_checked() and pi.data[k] <= 0:
            raise NumericalError(f"class {k} has zero probability")
        with np.errstate(divide="ignore"):
            out = np.log(pi.data[k])
        p = pi.data[k]

        def bw(g):
            full = np.zeros_like(pi.data)
            full[k] = g / p
            return (full,)

        return make_node(out, (pi,), bw, "categorical_log_prob")
    return log(pick(pi, idx))


def categorical_log_prob_logits(y, logits) -> Tensor:
    """Same density evaluated from unnormalized scores via a stable log-softmax."""
    return pick(log_softmax(logits), np.asarray(y))


def reparameterize(mu, var, eps) -> Tensor:
    """Sample ``mu + sqrt(var) * eps`` with ``eps`` supplied by the caller."""
    mu, var = as_tensor(mu), as_tensor(var)
    eps = np.asarray(eps.data if isinstance(eps, Tensor) else eps, dtype=np.float64)
    if mu.shape != var.shape or mu.shape != eps.shape:
        raise DimensionError(f"reparameterize: mu {mu.shape}, var {var.shape}, eps {eps.shape}")
    if np.any(var.data < 0):
        raise DomainError("reparameterize needs nonnegative variance")
    return mu + mul(sqrt(var), eps)
