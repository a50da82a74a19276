"""Hot numeric kernels: numba-jitted by default, pure numpy on request.

The two inner loops that dominate spectral work are compiled with
``numba.njit``:

* one-sided Jacobi column orthogonalization (the SVD workhorse), and
* the iterative radix-2 FFT used when a transform length is a power of two.

Setting ``LRIMPUTE_NO_NUMBA=1`` (or any of ``true``/``yes``) selects the
pure-numpy fallbacks instead; the flag is read once at import. The fallback
path computes the same quantities (bit-identical for the FFT, equal to
rotation tolerance for Jacobi) and is what runs when numba is absent.
``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import math
import os

import numpy as np

from .errors import NumericError

_ENV_FLAG = "LRIMPUTE_NO_NUMBA"


def _flag_disabled(env=os.environ):
    return str(env.get(_ENV_FLAG, "")).strip().lower() in ("1", "true", "yes")


try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    njit = None
    HAVE_NUMBA = False

NUMBA_ENABLED = HAVE_NUMBA and not _flag_disabled()


# -- one-sided Jacobi sweeps --------------------------------------------------
#
# One sweep rotates every column pair (i, j) of `a` (and applies the same
# rotation to `v`) so their inner product becomes zero, skipping pairs whose
# normalized inner product is already below `tol`. Returns the largest
# normalized inner product seen, i.e. the convergence measure BEFORE the
# sweep's rotations.

def _jacobi_sweep_numpy(a, norms, v, tol, floor):
    n = a.shape[1]
    off = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            p = norms[i]
            q = norms[j]
            if p <= floor or q <= floor:
                continue
            r = float(a[:, i] @ a[:, j])
            if r == 0.0:
                continue
            c_off = abs(r) / math.sqrt(p * q)
            if c_off > off:
                off = c_off
            if c_off <= tol:
                continue
            tau = (q - p) / (2.0 * r)
            t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            ai = a[:, i].copy()
            a[:, i] = c * ai - s * a[:, j]
            a[:, j] = s * ai + c * a[:, j]
            vi = v[:, i].copy()
            v[:, i] = c * vi - s * v[:, j]
            v[:, j] = s * vi + c * v[:, j]
            norms[i] = max(p - t * r, 0.0)
            norms[j] = max(q + t * r, 0.0)
    return off


def _jacobi_sweep_loops(a, norms, v, tol, floor):
    m, n = a.shape
    nv = v.shape[0]
    off = 0.0
    for i in range(n - 1):
        for j in range(i + 1, n):
            p = norms[i]
            q = norms[j]
            if p <= floor or q <= floor:
                continue
            r = 0.0
            for k in range(m):
                r += a[k, i] * a[k, j]
            if r == 0.0:
                continue
            c_off = abs(r) / math.sqrt(p * q)
            if c_off > off:
                off = c_off
            if c_off <= tol:
                continue
            tau = (q - p) / (2.0 * r)
            t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            for k in range(m):
                aki = a[k, i]
                a[k, i] = c * aki - s * a[k, j]
                a[k, j] = s * aki + c * a[k, j]
            for k in range(nv):
                vki = v[k, i]
                v[k, i] = c * vki - s * v[k, j]
                v[k, j] = s * vki + c * v[k, j]
            norms[i] = max(p - t * r, 0.0)
            norms[j] = max(q + t * r, 0.0)
    return off


if HAVE_NUMBA:
    _jacobi_sweep_numba = njit(cache=True)(_jacobi_sweep_loops)
else:  # pragma: no cover
    _jacobi_sweep_numba = None


def jacobi_orthogonalize(a, v, tol=1e-12, max_sweeps=60, use_numba=None):
    """Rotate columns of ``a`` (mirroring into ``v``) until pairwise orthogonal.

    Modifies both arrays in place and returns the number of sweeps used.
    Raises :class:`NumericError` if the sweep cap is hit before the largest
    normalized column inner product drops below ``tol``.
    """
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    sweep = _jacobi_sweep_numba if use_numba else _jacobi_sweep_numpy
    for n_sweeps in range(1, max_sweeps + 1):
        # Re-derive norms each sweep; the cached updates only need to hold
        # within one sweep and exact values stop cancellation drift. Columns
        # whose squared norm falls below the deflation floor are numerically
        # zero (cancellation residue) and must not drive further rotations.
        norms = np.einsum("ij,ij->j", a, a)
        floor = norms.sum() * 1e-30
        off = sweep(a, norms, v, tol, floor)
        if off <= tol:
            return n_sweeps
    raise NumericError(
        f"Jacobi orthogonalization did not reach tol={tol} in {max_sweeps} sweeps")


# -- radix-2 FFT --------------------------------------------------------------

_REV_CACHE = {}


def bit_reversal(n):
    """Bit-reversal permutation for a power-of-two length ``n``."""
    rev = _REV_CACHE.get(n)
    if rev is None:
        bits = n.bit_length() - 1
        rev = np.zeros(n, dtype=np.int64)
        for i in range(1, n):
            rev[i] = (rev[i >> 1] >> 1) | ((i & 1) << (bits - 1))
        _REV_CACHE[n] = rev
    return rev


def fft_twiddles(n):
    """Twiddle factors exp(-2*pi*i*k/n) for k in [0, n/2)."""
    k = np.arange(n // 2)
    return np.exp(-2j * np.pi * k / n)


def _fft_radix2_numpy(x, rev, tw):
    # x: (batch, n) complex128, transformed in place per row.
    n = x.shape[1]
    x[:] = x[:, rev]
    size = 2
    while size <= n:
        half = size // 2
        w = tw[:: n // size][:half]
        blocks = x.reshape(x.shape[0], n // size, size)
        even = blocks[:, :, :half]
        odd = blocks[:, :, half:]
        t = odd * w
        odd[:] = even - t
        even[:] = even + t
        size *= 2
    return x


def _fft_radix2_loops(x, rev, tw):
    batch, n = x.shape
    for b in range(batch):
        row = x[b]
        tmp = row[rev].copy()
        row[:] = tmp
        size = 2
        while size <= n:
            half = size // 2
            stride = n // size
            for start in range(0, n, size):
                for k in range(half):
                    w = tw[k * stride]
                    lo = row[start + k]
                    t = w * row[start + k + half]
                    row[start + k] = lo + t
                    row[start + k + half] = lo - t
            size *= 2
    return x


if HAVE_NUMBA:
    _fft_radix2_numba = njit(cache=True)(_fft_radix2_loops)
else:  # pragma: no cover
    _fft_radix2_numba = None


def fft_radix2(x, use_numba=None):
    """In-place FFT over the last axis of a (batch, n) complex array.

    ``n`` must be a power of two >= 2. Both backends apply butterflies in
    the same order; outputs agree to floating-point rounding (the compiled
    path may fuse multiply-adds).
    """
    n = x.shape[1]
    if n < 2 or n & (n - 1):
        raise ValueError(f"fft_radix2 needs a power-of-two length >= 2, got {n}")
    if use_numba is None:
        use_numba = NUMBA_ENABLED
    fn = _fft_radix2_numba if use_numba else _fft_radix2_numpy
    return fn(x, bit_reversal(n), fft_twiddles(n))


def warmup():
    """Trigger JIT compilation of the numba kernels (no-op on fallback)."""
    if not NUMBA_ENABLED:
        return
    a = np.eye(3)
    v = np.eye(3)
    jacobi_orthogonalize(a, v)
    fft_radix2(np.ones((1, 4), dtype=np.complex128))
