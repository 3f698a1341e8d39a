"""Truncated formal power series and sequence convolutions.

A scalar series is a 1-D float array ``(a_0, ..., a_m)``; a vector sequence
is an array whose first axis is the sequence index, so ``x[k]`` is the
element ``x_k`` of some coordinate space.  All products are truncated to a
requested length.

The kernel ``(n, n-1, ..., 1)`` and its reciprocal are what make the
differences of averaged Kaczmarz iterates vanish: if ``d_k = x_{k+1} - x_k``,
then ``(d * a)_k`` is (up to a factor n) a difference of averaged iterates,
and convolving with ``a^{-1}`` (which is summable) recovers ``d``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "NotInvertible",
    "unit",
    "cauchy_product",
    "reciprocal",
    "convolve",
    "deconv_kernel",
    "kernel_roots",
    "DifferenceReport",
    "avek_difference_probe",
]


class NotInvertible(ZeroDivisionError):
    """Raised when a series with ``a_0 = 0`` is inverted."""


def _series(a):
    a = np.atleast_1d(np.asarray(a, dtype=float))
    if a.ndim != 1:
        raise ValueError("a scalar series must be one-dimensional")
    if not np.all(np.isfinite(a)):
        raise ValueError("series coefficients must be finite")
    return a


def unit(m):
    """``(1, 0, ..., 0)`` of length `m`."""
    e = np.zeros(m)
    e[0] = 1.0
    return e


def cauchy_product(a, b, m=None):
    """``(a*b)_k = sum_{j<=k} a_j b_{k-j}`` for ``k < m``.

    Missing coefficients count as zero; the default `m` is the full length
    ``len(a) + len(b) - 1``.
    """
    a, b = _series(a), _series(b)
    full = np.convolve(a, b)
    if m is None:
        return full
    out = np.zeros(m)
    out[:min(m, full.size)] = full[:m]
    return out


def reciprocal(a, m):
    """First `m` coefficients of ``1/a``.

    Uses ``b_0 = 1/a_0`` and ``b_k = -(1/a_0) sum_{j<k} b_j a_{k-j}``.
    """
    a = _series(a)
    if a[0] == 0:
        raise NotInvertible("series with a_0 = 0 has no reciprocal")
    a = np.concatenate([a, np.zeros(max(0, m - a.size))])[:max(m, 1)]
    b = np.zeros(m)
    if m == 0:
        return b
    b[0] = 1.0 / a[0]
    for k in range(1, m):
        # only a_1..a_k can contribute
        b[k] = -np.dot(b[:k], a[k:0:-1]) / a[0]
    return b


def convolve(x, a, m=None):
    """``(x*a)_k = sum_{j<=k} x_j a_{k-j}`` for a vector sequence `x` (first axis = index)."""
    x = np.asarray(x, dtype=float)
    a = _series(a)
    if m is None:
        m = x.shape[0]
    out = np.zeros((m,) + x.shape[1:])
    for j in range(min(a.size, m)):
        if a[j] == 0:
            continue
        cnt = min(x.shape[0], m - j)
        out[j:j + cnt] += a[j] * x[:cnt]
    return out


def deconv_kernel(n):
    """The kernel ``(n, n-1, ..., 1)``."""
    if n < 1:
        raise ValueError("n must be at least 1")
    return np.arange(n, 0, -1, dtype=float)


def kernel_roots(n, tol=1e-9):
    """Roots of ``p(z) = n + (n-1) z + ... + z^{n-1}``.

    Each root is certified by ``|p(root)| < tol * max|coef|``; a failing root
    raises ``ArithmeticError``.
    """
    a = deconv_kernel(n)
    if n == 1:
        return np.zeros(0, dtype=complex)
    roots = np.roots(a[::-1])  # np.roots wants the leading coefficient first
    resid = np.abs(np.polyval(a[::-1], roots))
    if np.any(resid >= tol * np.max(np.abs(a))):
        raise ArithmeticError(f"root certificate failed for n={n}: max |p(z)| = {resid.max():.3e}")
    return roots


@dataclass
class DifferenceReport:
    """Diagnostics of the difference sequence of an iterate trace.

    `diff_norms[k]` is ``||x_{k+1} - x_k||`` and `weighted_norms[j]` is
    ``||sum_{i=1}^n i d_{k-n+i}||`` for ``k = n - 1 + j`` (0-based indices).
    The decay ratios compare the mean over the last `n` entries with the mean
    over the first `n`.
    """

    n: int
    diff_norms: np.ndarray
    weighted_norms: np.ndarray
    identity_error: float
    diff_decay: float
    weighted_decay: float

    def decays(self, factor=1e-3):
        return bool(self.diff_decay < factor and self.weighted_decay < factor)


def avek_difference_probe(iterates, n, identity_tol=1e-12):
    """Difference diagnostics for a sequence ``x_1..x_m`` of averaged iterates.

    With ``d_k = x_{k+1} - x_k`` and ``z_k = (1/n) sum_{j=1}^n j x_{k-n+j}`` the
    telescoping identity
    ``z_{k+1} - z_k = x_{k+1} - (1/n) sum_{l=k-n+1}^k x_l = (1/n) sum_j j d_{k-n+j}``
    is checked at every admissible `k`.  The identity error is relative to the
    largest iterate norm and raises ``ArithmeticError`` above `identity_tol`.
    """
    x = np.asarray(iterates, dtype=float)
    m = x.shape[0]
    if m <= 2 * n:
        raise ValueError(f"need more than 2n = {2 * n} iterates, got {m}")
    flat = x.reshape(m, -1)
    d = np.diff(flat, axis=0)
    j = np.arange(1, n + 1, dtype=float)
    # sum_j j d_{k-n+j} for every window of n consecutive differences
    windows = np.lib.stride_tricks.sliding_window_view(d, n, axis=0)  # (m-n, size, n)
    weighted = windows @ j
    zs = np.lib.stride_tricks.sliding_window_view(flat, n, axis=0) @ j / n  # z at window end
    means = np.lib.stride_tricks.sliding_window_view(flat, n, axis=0).mean(axis=-1)
    lhs = np.diff(zs, axis=0)                 # z_{k+1} - z_k
    mid = flat[n:] - means[:-1]               # x_{k+1} - mean of x_{k-n+1..k}
    rhs = weighted / n
    scale = max(float(np.max(np.linalg.norm(flat, axis=1))), 1e-300)
    err = max(float(np.max(np.abs(lhs - mid))), float(np.max(np.abs(mid - rhs)))) / scale
    if err > identity_tol:
        raise ArithmeticError(f"telescoping identity violated: relative error {err:.3e}")
    dn = np.linalg.norm(d, axis=1)
    wn = np.linalg.norm(weighted, axis=1)

    def decay(v):
        first = v[:n].mean()
        return 0.0 if first == 0 else float(v[-n:].mean() / first)

    return DifferenceReport(n, dn, wn, err, decay(dn), decay(wn))
