"""Dense array sublayers with hand-written backward passes.

Everything here works along the last axis, so a function written for a
single H-vector applies position-wise to an (N, L, H) activation unchanged.
"""

from dataclasses import dataclass

import numpy as np
from scipy.special import ndtr

INV_SQRT_2PI = 1.0 / np.sqrt(2.0 * np.pi)


@dataclass
class LayerNormParams:
    alpha: np.ndarray
    beta: np.ndarray
    eps: float = 1e-5

    def __post_init__(self):
        if not self.eps >= 0:
            raise ValueError(f"eps must be non-negative, got {self.eps}")
        if self.alpha.shape != self.beta.shape:
            raise ValueError("alpha and beta must share a shape")

    @classmethod
    def identity(cls, dim, eps=1e-5, dtype=np.float64):
        return cls(np.ones(dim, dtype=dtype), np.zeros(dim, dtype=dtype), eps)


@dataclass
class PffnParams:
    W1: np.ndarray  # (4H, H)
    b1: np.ndarray  # (4H,)
    W2: np.ndarray  # (H, 4H)
    b2: np.ndarray  # (H,)

    def __post_init__(self):
        inner, dim = self.W1.shape
        if self.b1.shape != (inner,) or self.W2.shape != (dim, inner) or self.b2.shape != (dim,):
            raise ValueError(
                f"inconsistent PFFN shapes W1={self.W1.shape} b1={self.b1.shape} "
                f"W2={self.W2.shape} b2={self.b2.shape}"
            )


# ---------------------------------------------------------------- LayerNorm


def layer_norm(x, p):
    """Normalize over the last axis with the biased variance estimator."""
    return layer_norm_forward(x, p)[0]


def layer_norm_forward(x, p):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + p.eps)
    xhat = xc * inv_std
    return p.alpha * xhat + p.beta, (xhat, inv_std)


def layer_norm_backward(dy, cache, p):
    """Returns ``(dx, dalpha, dbeta)``; parameter grads are summed over leading axes."""
    xhat, inv_std = cache
    lead = tuple(range(dy.ndim - 1))
    dalpha = np.sum(dy * xhat, axis=lead)
    dbeta = np.sum(dy, axis=lead)
    dxhat = dy * p.alpha
    dx = inv_std * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dalpha, dbeta


# --------------------------------------------------------------------- GELU


def normal_cdf(x):
    return ndtr(x)


def gelu(x):
    """Exact GELU, ``x * Phi(x)``."""
    return x * ndtr(x)


def gelu_grad(x, cdf=None):
    if cdf is None:
        cdf = ndtr(x)
    return cdf + x * INV_SQRT_2PI * np.exp(-0.5 * x * x)


# --------------------------------------------------------------------- PFFN


def pffn_forward(x, p, dropout_mask=None):
    """``GELU(W2 GELU(W1 x + b1) + b2)`` position-wise.

    ``dropout_mask`` (already scaled by 1/keep) multiplies the hidden
    activation. Returns ``(out, cache)``.
    """
    if x.shape[-1] != p.W1.shape[1]:
        raise ValueError(f"input dim {x.shape[-1]} does not match W1 {p.W1.shape}")
    a1 = x @ p.W1.T + p.b1
    cdf1 = ndtr(a1)
    g1 = a1 * cdf1
    if dropout_mask is not None:
        g1 = g1 * dropout_mask
    a2 = g1 @ p.W2.T + p.b2
    cdf2 = ndtr(a2)
    return a2 * cdf2, (x, a1, cdf1, g1, a2, cdf2, dropout_mask)


def pffn_backward(dout, cache, p):
    """Returns ``(dx, {"W1", "b1", "W2", "b2"})``."""
    x, a1, cdf1, g1, a2, cdf2, dropout_mask = cache
    dim = x.shape[-1]
    inner = p.W1.shape[0]
    da2 = (dout * gelu_grad(a2, cdf2)).reshape(-1, dim)
    g1f = g1.reshape(-1, inner)
    grads = {"W2": da2.T @ g1f, "b2": da2.sum(axis=0)}
    dg1 = da2 @ p.W2
    if dropout_mask is not None:
        dg1 = dg1 * dropout_mask.reshape(-1, inner)
    da1 = dg1 * gelu_grad(a1.reshape(-1, inner), cdf1.reshape(-1, inner))
    grads["W1"] = da1.T @ x.reshape(-1, dim)
    grads["b1"] = da1.sum(axis=0)
    dx = (da1 @ p.W1).reshape(x.shape)
    return dx, grads


# ------------------------------------------------------------ cross-entropy


def log_softmax(logits):
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def cross_entropy(logits, target):
    """Negative log-likelihood of ``target`` under ``softmax(logits)``."""
    logits = np.asarray(logits, dtype=float)
    if not 0 <= target < logits.shape[-1]:
        raise IndexError(f"target {target} outside [0, {logits.shape[-1]})")
    return float(-log_softmax(logits)[target])


def softmax_cross_entropy(logits, targets):
    """Row-wise losses and ``dloss/dlogits`` for an (M, V) logit block."""
    targets = np.asarray(targets)
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexError("target index out of range")
    logp = log_softmax(logits)
    rows = np.arange(len(targets))
    losses = -logp[rows, targets]
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return losses, dlogits


# ------------------------------------------------------------------ dropout


def dropout_mask(shape, rate, rng, dtype=np.float64):
    """Inverted-dropout multiplier, or ``None`` when dropout is inactive."""
    if rate <= 0.0 or rng is None:
        return None
    keep = 1.0 - rate
    return (rng.random(shape) < keep).astype(dtype) / keep


# ------------------------------------------------------------ init helpers


def truncated_normal(rng, shape, std=0.02, bound=2.0, dtype=np.float64):
    """Normal(0, std) redrawn until every entry lies within ``bound`` std."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > bound
    return (out * std).astype(dtype)


# ------------------------------------------------------ gradient oracle


def finite_diff_grad(f, p, eps=1e-5):
    """Central-difference gradient of scalar ``f`` at real array ``p``.

    ``p`` is perturbed in place and restored, so ``f`` may close over it.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    scalar = np.isscalar(p) or np.ndim(p) == 0
    arr = np.atleast_1d(np.asarray(p, dtype=float)) if scalar else p
    flat = arr.reshape(-1)
    if not np.shares_memory(flat, arr):
        raise ValueError("parameter array must be contiguous")
    grad = np.zeros(flat.shape, dtype=float)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(arr[0] if scalar else arr)
        flat[i] = orig - eps
        fm = f(arr[0] if scalar else arr)
        flat[i] = orig
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"non-finite objective at coordinate {i}")
        grad[i] = (fp - fm) / (2.0 * eps)
    return grad.reshape(arr.shape) if not scalar else grad[0]
