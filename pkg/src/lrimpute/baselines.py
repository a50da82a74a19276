"""Classical imputers used as accuracy references.

All three operate on a (sensors x steps) matrix with a boolean observation
mask, fill only the unobserved cells, and leave observed values untouched.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError, NumericError
from .spectral import pinv, svd


@dataclass
class BaselineKind:
    name: str                 # "mean" | "linear_interp" | "als_mf"
    rank: int = 4
    reg: float = 1e-3
    iters: int = 30

    def __post_init__(self):
        if self.name not in ("mean", "linear_interp", "als_mf"):
            raise ContractError(f"unknown baseline {self.name!r}")
        if self.rank < 1 or self.reg < 0 or self.iters < 1:
            raise ContractError("als_mf needs rank >= 1, reg >= 0, iters >= 1")


def _sensor_means(values, mask):
    if not mask.any():
        raise ContractError("cannot impute a fully unobserved dataset")
    global_mean = values[mask].mean()
    means = np.full(values.shape[0], global_mean)
    for i in range(values.shape[0]):
        if mask[i].any():
            means[i] = values[i, mask[i]].mean()
    return means


def impute_mean(values, mask):
    """Each missing cell gets its sensor's observed mean (global mean as fallback)."""
    mask = np.asarray(mask, dtype=bool)
    means = _sensor_means(values, mask)
    return np.where(mask, values, means[:, None])


def impute_linear(values, mask):
    """Per-sensor linear interpolation; boundary gaps take the nearest
    observation, empty sensors fall back to the mean imputer."""
    mask = np.asarray(mask, dtype=bool)
    means = _sensor_means(values, mask)
    out = np.array(values, dtype=np.float64)
    steps = np.arange(values.shape[1])
    for i in range(values.shape[0]):
        obs = mask[i]
        if not obs.any():
            out[i] = means[i]
            continue
        # np.interp clamps to the end values, which is exactly the boundary rule.
        out[i, ~obs] = np.interp(steps[~obs], steps[obs], values[i, obs])
        out[i, obs] = values[i, obs]
    return out


def als_lowrank_fit(values, mask, rank, reg, iters, seed=0):
    """Alternating ridge solves for mask-weighted factorization values ~ U V^T.

    Factors start from the top singular directions of the zero-filled
    matrix (random init stalls on sparse masks), with a seeded nudge to
    break degenerate ties. Returns (U, V, objectives); the objective
    ||mask * (X - U V^T)||_F^2 + reg * (||U||_F^2 + ||V||_F^2)
    is non-increasing at every half-step because each solve is exact.
    """
    mask = np.asarray(mask, dtype=bool)
    n, t = values.shape
    if rank > min(n, t):
        raise ContractError(f"rank {rank} exceeds min(shape) = {min(n, t)}")
    x = np.where(mask, values, 0.0)
    uu, ss, vt = svd(x)
    scales = np.sqrt(np.maximum(ss[:rank], 1e-12))
    rng = np.random.default_rng([seed, 0xA15])
    u = uu[:, :rank] * scales + rng.normal(scale=1e-6, size=(n, rank))
    v = vt[:rank].T * scales + rng.normal(scale=1e-6, size=(t, rank))
    eye = np.eye(rank)

    def solve_rows(target_rows, fixed, row_mask, data):
        out = np.zeros((target_rows, rank))
        for i in range(target_rows):
            sel = row_mask[i]
            f = fixed[sel]
            gram = f.T @ f + reg * eye
            if reg == 0.0:
                sv = svd(gram)[1]
                if sv[0] == 0.0 or sv[-1] < 1e-12 * sv[0]:
                    raise NumericError(
                        "singular ridge system (degenerate mask with reg=0); set reg > 0")
            rhs = f.T @ data[i, sel] if sel.any() else np.zeros(rank)
            out[i] = pinv(gram) @ rhs
        return out

    def objective():
        resid = mask * (x - u @ v.T)
        return float((resid**2).sum() + reg * ((u**2).sum() + (v**2).sum()))

    objectives = [objective()]
    for _ in range(iters):
        u = solve_rows(n, v, mask, x)
        objectives.append(objective())
        v = solve_rows(t, u, mask.T, x.T)
        objectives.append(objective())
    return u, v, objectives


def impute_als(values, mask, rank=4, reg=1e-3, iters=30, seed=0):
    """Low-rank completion U V^T with observed cells spliced back in."""
    u, v, _ = als_lowrank_fit(values, mask, rank, reg, iters, seed=seed)
    completed = u @ v.T
    return np.where(np.asarray(mask, dtype=bool), values, completed)


def impute_baseline(kind: BaselineKind, values, mask, seed=0):
    if kind.name == "mean":
        return impute_mean(values, mask)
    if kind.name == "linear_interp":
        return impute_linear(values, mask)
    return impute_als(values, mask, rank=kind.rank, reg=kind.reg, iters=kind.iters, seed=seed)
