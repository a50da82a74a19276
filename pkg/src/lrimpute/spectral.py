"""Discrete Fourier transform, small-matrix SVD, and circulant utilities.

The DFT is the exact unscaled transform X_k = sum_n x_n exp(-2*pi*i*k*n/N),
computed directly through a cached transform matrix for arbitrary lengths
and through the radix-2 kernel when the length is a power of two. Inputs
are never zero-padded: the loss below must see the spectrum of the data as
given.

``spectrum_l1`` is the differentiable bridge into the autodiff engine: the
mean (over the N*T grid) of the complex moduli of the 2-D spectrum, whose
gradient is the real part of the adjoint transform applied to F/|F| (zero
where |F| is zero, mirroring the abs convention).

SVD is one-sided Jacobi orthogonalization from :mod:`lrimpute.kernels` --
accurate at desk scale with no external linear algebra.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels
from .autodiff import Tensor, _make_op
from .errors import ContractError, DimensionError

_MATRIX_CACHE = {}


def dft_matrix(n):
    """Unscaled DFT matrix exp(-2*pi*i*k*m/n); symmetric."""
    mat = _MATRIX_CACHE.get(n)
    if mat is None:
        k = np.arange(n)
        mat = np.exp(-2j * np.pi * np.outer(k, k) / n)
        _MATRIX_CACHE[n] = mat
    return mat


def _dft_along(arr, axis):
    """Complex DFT of ``arr`` along one axis (any length)."""
    n = arr.shape[axis]
    moved = np.moveaxis(np.asarray(arr, dtype=np.complex128), axis, -1)
    flat = np.ascontiguousarray(moved).reshape(-1, n)
    if n >= 2 and not (n & (n - 1)):
        out = kernels.fft_radix2(flat.copy())
    else:
        out = flat @ dft_matrix(n)
    return np.moveaxis(out.reshape(moved.shape), -1, axis)


@dataclass
class ComplexSpectrum:
    """Real/imaginary parts of a DFT, kept as flat row-major arrays."""

    shape: tuple
    re: np.ndarray
    im: np.ndarray

    def modulus(self):
        return np.hypot(self.re, self.im).reshape(self.shape)

    def as_complex(self):
        return (self.re + 1j * self.im).reshape(self.shape)


def dft(x, axes=(0,)):
    """Exact unscaled DFT over the given axes of a real array."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    out = arr.astype(np.complex128)
    for axis in axes:
        out = _dft_along(out, axis)
    return ComplexSpectrum(out.shape, out.real.ravel().copy(), out.imag.ravel().copy())


def spectrum_l1(x):
    """Mean complex modulus of the 2-D spectrum over the trailing two axes.

    For an [N, T] tensor this is ||Flatten(DFT2(x))||_1 / (N*T); leading
    batch dimensions are averaged. Differentiable.
    """
    if not isinstance(x, Tensor):
        x = Tensor(x)
    if x.ndim < 2:
        raise DimensionError(f"spectrum_l1 needs >=2-d input, got shape {x.shape}")
    arr = x.data
    n, t = arr.shape[-2], arr.shape[-1]
    cells = n * t
    batch = arr.size // cells
    spec = _dft_along(_dft_along(arr, -2), -1)
    mod = np.abs(spec)
    value = mod.sum() / (cells * batch)

    def back(g):
        with np.errstate(invalid="ignore"):
            ray = np.where(mod == 0.0, 0.0 + 0.0j, spec / mod)
        adj = _dft_along(_dft_along(np.conj(ray), -2), -1)
        return (float(g) * adj.real / (cells * batch),)

    return _make_op(np.asarray(value), (x,), back)


def circulant(x):
    """T x T circulant matrix whose column j is x cyclically shifted down by j."""
    vec = np.asarray(x, dtype=np.float64).ravel()
    t = vec.shape[0]
    idx = (np.arange(t)[:, None] - np.arange(t)[None, :]) % t
    return vec[idx]


@dataclass
class SingularSpectrum:
    """Non-increasing, non-negative singular values."""

    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if np.any(self.values < 0) or np.any(np.diff(self.values) > 0):
            raise ContractError("singular values must be sorted descending and >= 0")

    def cumulative_energy(self):
        """Running share of squared-value energy, ending at 1 (or 0 for a zero matrix)."""
        sq = self.values**2
        total = sq.sum()
        if total == 0.0:
            return np.zeros_like(sq)
        return np.cumsum(sq) / total


def svd(m, tol=1e-12, max_sweeps=60):
    """Economy SVD via one-sided Jacobi: returns (U, s, Vt), m = U @ diag(s) @ Vt."""
    a = np.array(m, dtype=np.float64)
    if a.ndim != 2:
        raise DimensionError(f"svd needs a matrix, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError("svd input must be finite")
    transposed = a.shape[0] < a.shape[1]
    if transposed:
        a = a.T
    a = np.ascontiguousarray(a)
    cols = a.shape[1]
    # Work at unit scale so squared column norms can neither overflow nor
    # underflow for extreme inputs; singular values are rescaled at the end.
    magnitude = float(np.max(np.abs(a))) if a.size else 0.0
    if magnitude > 0:
        a = a / magnitude
    v = np.eye(cols)
    if cols > 1 and magnitude > 0:
        kernels.jacobi_orthogonalize(a, v, tol=tol, max_sweeps=max_sweeps)
    s = np.sqrt(np.einsum("ij,ij->j", a, a))
    order = np.argsort(-s, kind="stable")
    s = s[order]
    a = a[:, order]
    v = v[:, order]
    u = np.zeros_like(a)
    nz = s > 0
    u[:, nz] = a[:, nz] / s[nz]
    s = s * magnitude
    if transposed:
        return v, s, u.T
    return u, s, v.T


def svd_values(m, tol=1e-12, max_sweeps=60):
    return SingularSpectrum(svd(m, tol=tol, max_sweeps=max_sweeps)[1])


def nuclear_norm(m):
    return float(svd_values(m).values.sum())


def pinv(m, rcond=1e-12):
    """Moore-Penrose pseudo-inverse through the Jacobi SVD."""
    u, s, vt = svd(m)
    if s.size == 0 or s[0] == 0.0:
        return np.zeros((m.shape[1], m.shape[0]))
    inv = np.where(s > rcond * s[0], 1.0 / np.where(s > 0, s, 1.0), 0.0)
    return (vt.T * inv) @ u.T


def fourier_l1_and_nuclear(x):
    """l1 norm of DFT(x) and the nuclear norm of circulant(x).

    The two agree for every real vector (the DFT diagonalizes the
    circulant), so the pair doubles as a cross-check between the transform
    and the SVD.
    """
    vec = np.asarray(x, dtype=np.float64).ravel()
    fourier = float(dft(vec, axes=(0,)).modulus().sum())
    nuclear = nuclear_norm(circulant(vec))
    return fourier, nuclear
