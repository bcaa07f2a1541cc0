"""Complex-diagonal linear recurrent unit.

The recurrence per channel ``r`` is ``h_k = lam_r * h_{k-1} + g_r * (B x_k)_r``
with ``lam = exp(-exp(nu_log) + 1j * exp(theta_log))`` and
``g = exp(gamma_log)``; the output is ``y_k = Re(C h_k) + x_k``.

Activations are ``(N, L, H)`` float arrays; pad masks are ``(N, L)`` booleans
that are True at real items. Complex gradients use the convention
``dL/dRe + 1j * dL/dIm``, so a complex parameter and its gradient can be fed
to an optimizer through their real views.
"""

import math
from dataclasses import dataclass

import numpy as np

from .numeric import truncated_normal


@dataclass
class LruParams:
    nu_log: np.ndarray  # (H_rec,)
    theta_log: np.ndarray  # (H_rec,)
    gamma_log: np.ndarray  # (H_rec,)
    B: np.ndarray  # complex (H_rec, H_in)
    C: np.ndarray  # complex (H_out, H_rec)

    @property
    def rec_dim(self):
        return self.nu_log.shape[0]

    @property
    def in_dim(self):
        return self.B.shape[1]

    @property
    def gamma(self):
        return np.exp(self.gamma_log)


class PassCounter:
    """Counts sweeps performed by :func:`parallel_scan`."""

    def __init__(self):
        self.passes = 0

    def reset(self):
        self.passes = 0


def init_lru(in_dim, rec_dim, r_min=0.8, r_max=0.99, max_phase=2 * math.pi, rng=None,
             dtype=np.float64):
    """Ring initialisation of the eigenvalues, truncated-normal B and C.

    Radii are uniform over the annulus area between ``r_min`` and ``r_max``;
    ``gamma_log`` starts at ``log(sqrt(1 - |lam|^2))``. ``r_min == r_max`` is
    accepted and gives a degenerate ring.
    """
    if not (0.0 < r_min <= r_max < 1.0):
        raise ValueError(f"need 0 < r_min <= r_max < 1, got r_min={r_min}, r_max={r_max}")
    if not (0.0 < max_phase <= 2 * math.pi):
        raise ValueError(f"max_phase must lie in (0, 2*pi], got {max_phase}")
    rng = np.random.default_rng(rng)
    u1 = rng.random(rec_dim)
    # (0, 1] keeps log(u2 * max_phase) finite
    u2 = 1.0 - rng.random(rec_dim)
    nu_log = np.log(-0.5 * np.log(u1 * (r_max**2 - r_min**2) + r_min**2))
    theta_log = np.log(u2 * max_phase)
    modulus = _modulus(nu_log)
    gamma_log = np.log(np.sqrt(1.0 - modulus**2))
    ctype = np.result_type(dtype, np.complex64)
    B = (truncated_normal(rng, (rec_dim, in_dim)) + 1j * truncated_normal(rng, (rec_dim, in_dim)))
    C = (truncated_normal(rng, (in_dim, rec_dim)) + 1j * truncated_normal(rng, (in_dim, rec_dim)))
    return LruParams(
        nu_log.astype(dtype), theta_log.astype(dtype), gamma_log.astype(dtype),
        B.astype(ctype), C.astype(ctype),
    )


# exp(-exp(nu)) rounds to 1.0 once nu < -37; the cap keeps |lam| < 1 in floats
MAX_MODULUS = 1.0 - 2.0**-50


def _modulus(nu_log):
    return np.minimum(np.exp(-np.exp(nu_log)), MAX_MODULUS)


def lambda_of(p):
    """Diagonal of the recurrence matrix as a complex vector."""
    modulus = _modulus(p.nu_log)
    phase = np.exp(p.theta_log)
    return modulus * (np.cos(phase) + 1j * np.sin(phase))


def next_pow2(n):
    return 1 if n <= 1 else 1 << (int(n) - 1).bit_length()


def pad_pow2(x, mask):
    """Left-pad the length axis with zeros up to the next power of two."""
    n, length = mask.shape
    target = next_pow2(length)
    extra = target - length
    if extra == 0:
        return x, mask
    x = np.concatenate([np.zeros((n, extra) + x.shape[2:], dtype=x.dtype), x], axis=1)
    mask = np.concatenate([np.zeros((n, extra), dtype=bool), mask], axis=1)
    return x, mask


# ---------------------------------------------------------------- kernels


def _parts(a):
    # strided .real/.imag views miss the BLAS fast path
    return np.ascontiguousarray(a.real), np.ascontiguousarray(a.imag)


def _bx(p, x):
    b_re, b_im = _parts(p.B)
    return x @ b_re.T + 1j * (x @ b_im.T)


def _drive(p, x):
    """``g * (B x)`` for real ``x`` with trailing dim H_in."""
    return p.gamma * _bx(p, x)


def _readout(p, h, x, residual):
    h_re, h_im = _parts(h)
    c_re, c_im = _parts(p.C)
    y = h_re @ c_re.T - h_im @ c_im.T
    return y + x if residual else y


def _check(x, mask, p):
    if x.ndim != 3 or x.shape[2] != p.in_dim:
        raise ValueError(f"expected (N, L, {p.in_dim}) input, got {x.shape}")
    if mask is not None and mask.shape != x.shape[:2]:
        raise ValueError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")


def _masked(x, mask):
    return x if mask is None else x * mask[..., None]


def sequential_scan(u, lam, h0=None):
    """Reference recurrence ``h_k = lam * h_{k-1} + u_k`` along axis 1."""
    h = np.empty_like(u)
    state = np.zeros_like(u[:, 0]) if h0 is None else h0
    for k in range(u.shape[1]):
        state = lam * state + u[:, k]
        h[:, k] = state
    return h


def parallel_scan(u, lam, counter=None):
    """Recursive-doubling evaluation of the same recurrence.

    Pass ``i`` views the sequence as blocks of length ``2**i`` and adds
    ``[lam, lam^2, ..., lam^(2**(i-1))] * (last state of left half)`` into the
    right half of every block. The power table grows by doubling.
    """
    n, length, width = u.shape
    if length & (length - 1):
        raise ValueError(f"sequence length {length} is not a power of two")
    h = np.array(u, order="C", copy=True)
    powers = lam[None, :]
    l = 2
    while l <= length:
        half = l // 2
        if l > 2:
            powers = np.concatenate([powers, powers * powers[-1]], axis=0)
        blocks = h.reshape(n, length // l, l, width)
        blocks[:, :, half:] += powers * blocks[:, :, half - 1:half]
        if counter is not None:
            counter.passes += 1
        l *= 2
    return h


def scan(u, lam, counter=None):
    length = u.shape[1]
    if length & (length - 1) == 0:
        return parallel_scan(u, lam, counter)
    return sequential_scan(u, lam)


def _left_padded(mask):
    if np.any(mask[:, :-1] & ~mask[:, 1:]):
        raise ValueError("pad mask must be left-padded (no pad after a real item)")


def lru_forward_valid(xv, mask, p, residual=True, counter=None):
    """Forward on the real positions only.

    ``xv`` holds the (M, H_in) inputs at ``mask``'s True entries in row-major
    order. Returns ``(yv, h)`` with ``h`` the full (N, L, H_rec) state grid.
    """
    u = np.zeros(mask.shape + (p.rec_dim,), dtype=p.B.dtype)
    u[mask] = _drive(p, xv)
    h = scan(u, lambda_of(p), counter)
    return _readout(p, h[mask], xv, residual), h


def lru_backward_valid(xv, mask, p, dyv, h, residual=True):
    """Adjoint of :func:`lru_forward_valid`; returns ``(dxv, grads)``."""
    lam = lambda_of(p)
    g = p.gamma
    c_re, c_im = _parts(p.C)
    adj = np.zeros(h.shape, dtype=h.dtype)
    adj[mask] = dyv @ c_re - 1j * (dyv @ c_im)
    # adjoint recurrence runs backwards in time with conj(lam)
    gh = scan(adj[:, ::-1], np.conj(lam))[:, ::-1][mask]
    h_prev = np.zeros_like(h)
    h_prev[:, 1:] = h[:, :-1]
    hv = h[mask]
    g_lam = np.sum(np.conj(h_prev[mask]) * gh, axis=0)
    g_s = np.conj(lam) * g_lam
    bx = _bx(p, xv)
    q = g * gh
    grads = {
        "nu_log": np.where(np.exp(-np.exp(p.nu_log)) < MAX_MODULUS,
                           -np.exp(p.nu_log) * g_s.real, 0.0),
        "theta_log": np.exp(p.theta_log) * g_s.imag,
        "gamma_log": g * np.sum((np.conj(bx) * gh).real, axis=0),
        "B": q.T @ xv,
        "C": dyv.T @ np.conj(hv),
    }
    q_re, q_im = _parts(q)
    b_re, b_im = _parts(p.B)
    dxv = q_re @ b_re + q_im @ b_im
    if residual:
        dxv = dxv + dyv
    return dxv, grads


# ----------------------------------------------------------- public ops


def lru_step(p, h, x_k, residual=True, lam=None):
    """Advance the hidden state by one input; returns ``(y_k, h_next)``.

    Leading batch axes on ``h``/``x_k`` are allowed.
    """
    if lam is None:
        lam = lambda_of(p)
    h_next = lam * h + _drive(p, x_k)
    return _readout(p, h_next, x_k, residual), h_next


def lru_forward_sequential(x, mask, p, residual=True):
    """Step-by-step forward; returns ``(y, final_state)``."""
    _check(x, mask, p)
    x = _masked(x, mask)
    lam = lambda_of(p)
    n, length, _ = x.shape
    h = np.zeros((n, p.rec_dim), dtype=p.B.dtype)
    y = np.empty(x.shape, dtype=np.result_type(x, p.C.real))
    for k in range(length):
        y[:, k], h = lru_step(p, h, x[:, k], residual, lam)
    return y, h


def lru_forward(x, mask, p, residual=True, counter=None):
    """Scan-based forward returning ``(y, h)``; ``h`` is every hidden state.

    Pads must be on the left, where the state (and hence ``y``) is zero.
    """
    _check(x, mask, p)
    mask = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, bool)
    _left_padded(mask)
    yv, h = lru_forward_valid(x[mask], mask, p, residual, counter)
    y = np.zeros(x.shape[:2] + (p.C.shape[0],), dtype=yv.dtype)
    y[mask] = yv
    return y, h


def lru_forward_parallel(x, mask, p, residual=True, counter=None):
    if x.shape[1] & (x.shape[1] - 1):
        raise ValueError(f"sequence length {x.shape[1]} is not a power of two; use pad_pow2")
    return lru_forward(x, mask, p, residual, counter)[0]


def lru_backward(x, mask, p, dy, residual=True, h=None):
    """Gradients of ``sum(dy * y)`` through the recurrence.

    Returns ``(dx, grads)`` where ``grads`` has keys ``nu_log``,
    ``theta_log``, ``gamma_log``, ``B``, ``C``. ``h`` may be supplied from a
    previous forward to skip recomputation.
    """
    _check(x, mask, p)
    if dy.shape != x.shape[:2] + (p.C.shape[0],):
        raise ValueError(f"dy shape {dy.shape} does not match output shape")
    mask = np.ones(x.shape[:2], dtype=bool) if mask is None else np.asarray(mask, bool)
    _left_padded(mask)
    xv = x[mask]
    if h is None:
        u = np.zeros(mask.shape + (p.rec_dim,), dtype=p.B.dtype)
        u[mask] = _drive(p, xv)
        h = scan(u, lambda_of(p))
    dxv, grads = lru_backward_valid(xv, mask, p, dy[mask], h, residual)
    dx = np.zeros_like(x, dtype=dxv.dtype)
    dx[mask] = dxv
    return dx, grads
