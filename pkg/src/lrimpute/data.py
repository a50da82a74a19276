"""Synthetic data generation, missing-pattern simulation, windowing, CSV io.

Matrices are sensors x steps in memory. On disk a dataset is a CSV with one
header row of sensor ids and one row per time step; a missing cell is an
empty field (never a NaN literal), and values are written with 17
significant digits so save -> load round-trips bit-exactly.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from .errors import ConfigError, ContractError, ParseError

log = logging.getLogger(__name__)

SPLIT_RATIOS = (0.7, 0.1, 0.2)


def seeded_rng(seed, tag):
    """Generator from an int or sequence seed plus a purpose tag."""
    parts = list(seed) if isinstance(seed, (list, tuple)) else [seed]
    return np.random.default_rng([int(p) for p in parts] + [tag])


@dataclass
class Dataset:
    values: np.ndarray          # (n_sensors, steps), zeros where unavailable
    gt_available: np.ndarray    # bool, same shape
    steps_per_day: int = 1
    timestamps: np.ndarray = None
    mean: np.ndarray = None     # per-sensor, from observed training cells
    std: np.ndarray = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.gt_available = np.asarray(self.gt_available, dtype=bool)
        if self.values.shape != self.gt_available.shape:
            raise ContractError("values and availability mask shapes differ")
        if self.timestamps is None:
            self.timestamps = np.arange(self.values.shape[1])

    @property
    def n_sensors(self):
        return self.values.shape[0]

    @property
    def steps(self):
        return self.values.shape[1]


@dataclass
class MissingPatternSpec:
    kind: str = "point"                       # "point" | "block"
    point_rate: float = 0.25
    block_drop_rate: float = 0.05
    block_failure_prob: float = 0.0015
    block_duration: tuple = (12, 48)
    whiten_mode: str = "fixed"                # "fixed" | "combined"
    whiten_rate: float = 0.25
    whiten_rates: tuple = (0.25, 0.5, 0.75)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("point", "block"):
            raise ConfigError(f"missing pattern kind must be point or block, got {self.kind!r}")
        if self.whiten_mode not in ("fixed", "combined"):
            raise ConfigError(f"whiten mode must be fixed or combined, got {self.whiten_mode!r}")
        for name in ("point_rate", "block_drop_rate", "block_failure_prob", "whiten_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must be in [0, 1], got {v}")
        lo, hi = self.block_duration
        if not (1 <= lo <= hi):
            raise ConfigError(f"block duration bounds need 1 <= lo <= hi, got {lo}..{hi}")
        if any(not 0.0 <= r <= 1.0 for r in self.whiten_rates):
            raise ConfigError("whiten_rates must lie in [0, 1]")

    def to_dict(self):
        rec = {f.name: getattr(self, f.name) for f in fields(self)}
        rec["block_duration"] = list(self.block_duration)
        rec["whiten_rates"] = list(self.whiten_rates)
        return rec

    @classmethod
    def from_dict(cls, record):
        known = {f.name for f in fields(cls)}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown missing-pattern keys: {sorted(unknown)}")
        rec = dict(record)
        if "block_duration" in rec:
            rec["block_duration"] = tuple(rec["block_duration"])
        if "whiten_rates" in rec:
            rec["whiten_rates"] = tuple(rec["whiten_rates"])
        return cls(**rec)


@dataclass
class WindowConfig:
    length: int = 24
    train_stride: int = None    # defaults to length // 2
    eval_stride: int = None     # defaults to length

    def __post_init__(self):
        if self.train_stride is None:
            self.train_stride = max(1, self.length // 2)
        if self.eval_stride is None:
            self.eval_stride = self.length
        if self.length < 1 or self.train_stride < 1 or self.eval_stride < 1:
            raise ConfigError("window length and strides must be >= 1")

    def to_dict(self):
        return {"length": self.length, "train_stride": self.train_stride,
                "eval_stride": self.eval_stride}


# -- synthetic generation -----------------------------------------------------

def synth_lowrank(n_sensors, steps, rank, noise, steps_per_day, seed):
    """Low-rank daily-periodic series: random loadings times sinusoidal factors.

    Temporal factor j is a unit-amplitude sinusoid at harmonic j+1 of the
    day frequency with a random phase; loadings are standard normal scaled
    by 1/sqrt(rank). Gaussian noise is added at ``noise`` times the clean
    signal's standard deviation, so rank(values) <= rank exactly when
    noise == 0.
    """
    if rank > min(n_sensors, steps):
        raise ContractError(f"rank {rank} exceeds min(sensors, steps) = "
                            f"{min(n_sensors, steps)}")
    if noise < 0:
        raise ContractError(f"noise must be >= 0, got {noise}")
    rng = seeded_rng(seed, 0x5EED)
    t = np.arange(steps)
    phases = rng.uniform(0.0, 2.0 * np.pi, size=rank)
    factors = np.stack([np.sin(2.0 * np.pi * (j + 1) * t / steps_per_day + phases[j])
                        for j in range(rank)])
    loadings = rng.normal(size=(n_sensors, rank)) / np.sqrt(rank)
    signal = loadings @ factors
    values = signal
    if noise > 0:
        values = signal + noise * signal.std() * rng.normal(size=signal.shape)
    return Dataset(values=values, gt_available=np.ones_like(values, dtype=bool),
                   steps_per_day=steps_per_day)


# -- missing simulation -------------------------------------------------------

def apply_missing(ds: Dataset, spec: MissingPatternSpec):
    """Observation mask over the full series under the simulated pattern."""
    rng = seeded_rng(spec.seed, 0xACED)
    shape = ds.values.shape
    if spec.kind == "point":
        keep = rng.random(shape) >= spec.point_rate
    else:
        keep = rng.random(shape) >= spec.block_drop_rate
        starts = rng.random(shape) < spec.block_failure_prob
        lo, hi = spec.block_duration
        coords = np.argwhere(starts)
        durations = rng.integers(lo, hi + 1, size=len(coords))
        for (sensor, step), dur in zip(coords, durations):
            keep[sensor, step:step + dur] = False
    return keep & ds.gt_available


# -- normalization ------------------------------------------------------------

def compute_norm_stats(values, obs_mask):
    """Per-sensor mean/std over observed cells; degenerate sensors warned."""
    n = values.shape[0]
    mean = np.zeros(n)
    std = np.ones(n)
    counts = obs_mask.sum(axis=1)
    any_obs = counts > 0
    if not any_obs.any():
        raise ContractError("no observed cells to compute normalization statistics")
    global_mean = values[obs_mask].mean()
    for i in range(n):
        if not any_obs[i]:
            mean[i] = global_mean
            log.warning("sensor %d has no observed cells; using global mean", i)
            continue
        cells = values[i, obs_mask[i]]
        mean[i] = cells.mean()
        s = cells.std()
        if s == 0.0:
            log.warning("sensor %d is constant over observed cells; std forced to 1", i)
            s = 1.0
        std[i] = s
    return mean, std


def normalize(values, mean, std):
    return (values - mean[:, None]) / std[:, None]


def denormalize(values, mean, std):
    return values * std[:, None] + mean[:, None]


# -- windows ------------------------------------------------------------------

@dataclass
class SpatioTemporalWindow:
    x: np.ndarray            # normalized, zero outside input cells
    y: np.ndarray            # raw ground truth (zero where unavailable)
    y_norm: np.ndarray       # normalized ground truth
    obs_mask: np.ndarray
    eval_mask: np.ndarray
    whiten_mask: np.ndarray
    start_step: int

    def __post_init__(self):
        if np.any(self.eval_mask & self.obs_mask):
            raise ContractError("evaluation mask overlaps the observed set")
        if np.any(self.whiten_mask & ~self.obs_mask):
            raise ContractError("whiten mask marks unobserved cells")
        if np.any(self.x[~self.input_mask()] != 0.0):
            raise ContractError("window input must be zero outside input cells")

    def input_mask(self):
        return self.obs_mask & ~self.whiten_mask

    def missing_mask(self, include_whitened=True):
        """Cells unobserved during training: truly missing plus, by default,
        the deliberately whitened ones."""
        if include_whitened:
            return ~self.input_mask()
        return ~self.obs_mask


def _sample_whiten(rng, obs, spec: MissingPatternSpec):
    if spec.whiten_mode == "fixed":
        rate = spec.whiten_rate
    else:
        rate = spec.whiten_rates[rng.integers(len(spec.whiten_rates))]
    return (rng.random(obs.shape) < rate) & obs


def _build_window(ds, obs_mask, start, length, whiten):
    sl = slice(start, start + length)
    obs = obs_mask[:, sl]
    avail = ds.gt_available[:, sl]
    y = np.where(avail, ds.values[:, sl], 0.0)
    y_norm = normalize(y, ds.mean, ds.std) * avail
    inp = obs & ~whiten
    return SpatioTemporalWindow(
        x=y_norm * inp, y=y, y_norm=y_norm, obs_mask=obs,
        eval_mask=avail & ~obs, whiten_mask=whiten, start_step=start)


def make_windows(ds: Dataset, obs_mask, wcfg: WindowConfig, spec: MissingPatternSpec,
                 seed, start=0, stop=None, stride=None):
    """Sliding windows over [start, stop); tails that would overrun are skipped."""
    if ds.mean is None or ds.std is None:
        raise ContractError("dataset normalization stats missing; "
                            "call compute_norm_stats first")
    stop = ds.steps if stop is None else stop
    stride = wcfg.train_stride if stride is None else stride
    if wcfg.length > stop - start:
        return []
    rng = seeded_rng(seed, 0x717)
    windows = []
    for s in range(start, stop - wcfg.length + 1, stride):
        whiten = _sample_whiten(rng, obs_mask[:, s:s + wcfg.length], spec)
        windows.append(_build_window(ds, obs_mask, s, wcfg.length, whiten))
    return windows


def resample_whiten(windows, spec: MissingPatternSpec, seed):
    """Fresh whiten masks (and inputs) for an existing window list."""
    rng = seeded_rng(seed, 0x99B)
    out = []
    for w in windows:
        whiten = _sample_whiten(rng, w.obs_mask, spec)
        inp = w.obs_mask & ~whiten
        out.append(replace(w, whiten_mask=whiten, x=w.y_norm * inp))
    return out


def split_bounds(steps, ratios=SPLIT_RATIOS):
    train_end = int(round(steps * ratios[0]))
    val_end = int(round(steps * (ratios[0] + ratios[1])))
    return train_end, val_end


# -- CSV io -------------------------------------------------------------------

def _format_cell(v):
    return f"{v:.17g}"


def save_dataset_csv(path, ds: Dataset):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"s{i:04d}" for i in range(ds.n_sensors)])
        for t in range(ds.steps):
            writer.writerow([_format_cell(ds.values[i, t]) if ds.gt_available[i, t] else ""
                             for i in range(ds.n_sensors)])


def load_dataset_csv(path, steps_per_day=1):
    rows = _read_rows(path)
    header, body = rows[0], rows[1:]
    n = len(header)
    values = np.zeros((n, len(body)))
    avail = np.zeros((n, len(body)), dtype=bool)
    for t, row in enumerate(body):
        for i, cell in enumerate(row):
            cell = cell.strip()
            if not cell:
                continue
            if cell.lower() in ("nan", "-nan", "inf", "-inf", "+inf"):
                raise ParseError(f"{path}: non-numeric cell {cell!r} at row {t + 2}, "
                                 f"column {i + 1} (missing cells must be empty)")
            try:
                values[i, t] = float(cell)
            except ValueError:
                raise ParseError(f"{path}: cannot parse {cell!r} at row {t + 2}, "
                                 f"column {i + 1}") from None
            avail[i, t] = True
    return Dataset(values=values, gt_available=avail, steps_per_day=steps_per_day)


def save_mask_csv(path, mask):
    mask = np.asarray(mask)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"s{i:04d}" for i in range(mask.shape[0])])
        for t in range(mask.shape[1]):
            writer.writerow(["1" if mask[i, t] else "0" for i in range(mask.shape[0])])


def load_mask_csv(path):
    rows = _read_rows(path)
    header, body = rows[0], rows[1:]
    mask = np.zeros((len(header), len(body)), dtype=bool)
    for t, row in enumerate(body):
        for i, cell in enumerate(row):
            cell = cell.strip()
            if cell not in ("0", "1"):
                raise ParseError(f"{path}: mask cell must be 0 or 1, got {cell!r} "
                                 f"at row {t + 2}, column {i + 1}")
            mask[i, t] = cell == "1"
    return mask


def _read_rows(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ParseError(f"{path}: need a header row and at least one data row")
    width = len(rows[0])
    for idx, row in enumerate(rows[1:], start=2):
        if len(row) != width:
            raise ParseError(f"{path}: row {idx} has {len(row)} cells, header has {width}")
    return rows
