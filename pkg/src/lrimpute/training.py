"""Adam training loop with validation-based early stopping, plus inference
and evaluation over full series.

The loop only ever reads ground truth at observed cells: the masked
reconstruction loss sees whitened cells, the spectral loss sees input
cells, and the validation score is computed on the validation windows'
whiten masks. Evaluation-masked cells stay invisible until scoring.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np

from . import model as model_mod
from .autodiff import Tensor, backward, no_grad
from .data import (
    SPLIT_RATIOS,
    Dataset,
    MissingPatternSpec,
    WindowConfig,
    compute_norm_stats,
    denormalize,
    make_windows,
    normalize,
    resample_whiten,
    seeded_rng,
    split_bounds,
)
from .errors import ConfigError, ContractError, TrainingDiverged
from .losses import DEFAULT_FOURIER_WEIGHT, combined_loss
from .model import ModelConfig, ModelParams, forward_batch

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr: float = 1e-3
    lr_min: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 8
    max_epochs: int = 60
    patience: int = 15
    grad_clip_norm: float = 5.0   # <= 0 disables clipping
    fourier_weight: float = DEFAULT_FOURIER_WEIGHT
    fourier_on_whitened: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.patience < 1:
            raise ConfigError(f"patience must be >= 1, got {self.patience}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ConfigError("batch_size and max_epochs must be >= 1")
        if self.fourier_weight < 0:
            raise ConfigError(f"fourier_weight must be >= 0, got {self.fourier_weight}")

    def to_dict(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, record):
        known = {f.name for f in fields(cls)}
        unknown = set(record) - known
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**record)


@dataclass
class EvalMetrics:
    mae: float
    rmse: float
    count: int


class Adam:
    def __init__(self, params: ModelParams, cfg: TrainConfig):
        self.cfg = cfg
        self.step_count = 0
        self._m = {name: np.zeros_like(t.data) for name, t in params.items()}
        self._v = {name: np.zeros_like(t.data) for name, t in params.items()}

    def step(self, params: ModelParams, lr):
        c = self.cfg
        self.step_count += 1
        correct1 = 1.0 - c.beta1**self.step_count
        correct2 = 1.0 - c.beta2**self.step_count
        for name, t in params.items():
            g = t.grad
            if g is None:
                continue
            m = self._m[name]
            v = self._v[name]
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            t.data = t.data - lr * (m / correct1) / (np.sqrt(v / correct2) + c.adam_eps)


def clip_gradients(params: ModelParams, max_norm):
    """Scale all gradients by a common factor so the global norm <= max_norm."""
    if max_norm is None or max_norm <= 0:
        return 1.0
    total = 0.0
    for _, t in params.items():
        if t.grad is not None:
            total += float((t.grad * t.grad).sum())
    norm = np.sqrt(total)
    if norm <= max_norm or norm == 0.0:
        return 1.0
    factor = max_norm / norm
    for _, t in params.items():
        if t.grad is not None:
            t.grad = t.grad * factor
    return factor


def cosine_lr(epoch, cfg: TrainConfig):
    if cfg.max_epochs <= 1:
        return cfg.lr
    frac = epoch / (cfg.max_epochs - 1)
    return cfg.lr_min + 0.5 * (cfg.lr - cfg.lr_min) * (1.0 + np.cos(np.pi * frac))


def _stack_batch(windows, cfg: ModelConfig):
    xs = np.stack([w.x for w in windows])
    inp = np.stack([w.input_mask() for w in windows]).astype(np.float64)
    days = np.stack([(w.start_step + np.arange(cfg.window)) % cfg.steps_per_day
                     for w in windows])
    return xs, inp, days


def _batch_losses(windows, cfg, params, tcfg):
    xs, inp, days = _stack_batch(windows, cfg)
    pred = forward_batch(Tensor(xs), inp, days, cfg, params)
    target = np.stack([w.y_norm for w in windows])
    whiten = np.stack([w.whiten_mask for w in windows]).astype(np.float64)
    missing = np.stack([w.missing_mask(tcfg.fourier_on_whitened) for w in windows])
    observed = np.stack([w.obs_mask for w in windows]).astype(np.float64)
    return combined_loss(pred, target, whiten, missing.astype(np.float64),
                         tcfg.fourier_weight, observed_mask=observed)


def validation_mae(windows, cfg, params, norm):
    """Denormalized MAE on the validation windows' whitened cells."""
    mean, std = norm
    total = 0.0
    count = 0
    with no_grad():
        for i in range(0, len(windows), 16):
            chunk = windows[i:i + 16]
            xs, inp, days = _stack_batch(chunk, cfg)
            pred = forward_batch(Tensor(xs), inp, days, cfg, params).data
            for j, w in enumerate(chunk):
                m = w.whiten_mask
                if not m.any():
                    continue
                err = denormalize(pred[j], mean, std) - w.y
                total += np.abs(err[m]).sum()
                count += int(m.sum())
    if count == 0:
        raise ContractError("validation windows have no whitened cells")
    return total / count


@dataclass
class TrainResult:
    params: ModelParams
    history: list
    steps: list
    best_val_mae: float
    best_epoch: int


def train(cfg: ModelConfig, params: ModelParams, train_windows, val_windows,
          tcfg: TrainConfig, whiten_spec: MissingPatternSpec, norm) -> TrainResult:
    """Mini-batch Adam on the combined loss; restores the best-validation state."""
    usable = [w for w in train_windows if w.obs_mask.any()]
    if not usable:
        raise ContractError("no trainable windows (all fully unobserved)")
    if len(usable) < len(train_windows):
        log.info("dropping %d fully-unobserved windows", len(train_windows) - len(usable))

    optimizer = Adam(params, tcfg)
    history = []
    step_rows = []
    best = {"val": np.inf, "epoch": -1, "state": params.state_arrays()}
    last_good = params.state_arrays()
    global_step = 0

    for epoch in range(tcfg.max_epochs):
        lr = cosine_lr(epoch, tcfg)
        wins = resample_whiten(usable, whiten_spec, [tcfg.seed, epoch])
        wins = [w for w in wins if w.whiten_mask.any()]
        order = seeded_rng([tcfg.seed, epoch], 0x0DD).permutation(len(wins))
        sums = {"recon": 0.0, "fourier": 0.0, "total": 0.0}
        n_batches = 0
        for lo in range(0, len(order), tcfg.batch_size):
            batch = [wins[k] for k in order[lo:lo + tcfg.batch_size]]
            params.zero_grads()
            loss = _batch_losses(batch, cfg, params, tcfg)
            values = loss.values()
            if not all(np.isfinite(v) for v in values.values()):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, step {global_step}",
                    last_good=last_good, history=history)
            backward(loss.total)
            clip_gradients(params, tcfg.grad_clip_norm)
            optimizer.step(params, lr)
            for key in sums:
                sums[key] += values[key]
            step_rows.append({"step": global_step, **values})
            global_step += 1
            n_batches += 1
        last_good = params.state_arrays()

        val_mae = validation_mae(val_windows, cfg, params, norm) if val_windows else np.nan
        history.append({
            "epoch": epoch,
            "train_recon": sums["recon"] / max(n_batches, 1),
            "train_fourier": sums["fourier"] / max(n_batches, 1),
            "train_total": sums["total"] / max(n_batches, 1),
            "val_mae": val_mae,
            "lr": lr,
        })
        log.info("epoch %d: total=%.5f val_mae=%s lr=%.2e", epoch,
                 history[-1]["train_total"], f"{val_mae:.5f}" if np.isfinite(val_mae) else "n/a", lr)

        if val_windows:
            if val_mae < best["val"]:
                best = {"val": val_mae, "epoch": epoch, "state": params.state_arrays()}
            elif epoch - best["epoch"] >= tcfg.patience:
                log.info("early stop at epoch %d (best %d)", epoch, best["epoch"])
                break

    if val_windows:
        params.load_arrays(best["state"])
    return TrainResult(params=params, history=history, steps=step_rows,
                       best_val_mae=best["val"], best_epoch=best["epoch"])


def impute_series(cfg: ModelConfig, params: ModelParams, values, obs_mask, norm,
                  window_length=None, allow_window_mismatch=False):
    """Complete a full series: window forwards, averaged overlaps, observed
    cells passed through unchanged, output de-normalized."""
    mean, std = norm
    length = cfg.window if window_length is None else int(window_length)
    if length != cfg.window and not allow_window_mismatch:
        raise ConfigError(
            f"window length {length} differs from the checkpoint's {cfg.window}; "
            "pass allow_window_mismatch to run anyway")
    n, steps = values.shape
    if steps < length:
        raise ContractError(f"series has {steps} steps, shorter than window {length}")
    starts = list(range(0, steps - length + 1, length))
    if starts[-1] != steps - length:
        starts.append(steps - length)

    x_full = normalize(np.where(obs_mask, values, 0.0), mean, std) * obs_mask
    total = np.zeros_like(values)
    hits = np.zeros_like(values)
    with no_grad():
        for s in starts:
            sl = slice(s, s + length)
            days = (s + np.arange(length)) % cfg.steps_per_day
            pred = forward_batch(Tensor(x_full[:, sl]), obs_mask[:, sl].astype(np.float64),
                                 days, cfg, params,
                                 strict_window=length == cfg.window).data
            total[:, sl] += pred
            hits[:, sl] += 1.0
    out = denormalize(total / hits, mean, std)
    out[obs_mask] = values[obs_mask]
    return out


def evaluate(imputed, truth, eval_mask) -> EvalMetrics:
    """MAE/RMSE over evaluation-masked cells, in original units."""
    eval_mask = np.asarray(eval_mask, dtype=bool)
    count = int(eval_mask.sum())
    if count == 0:
        raise ContractError("no evaluable cells (evaluation mask is empty)")
    err = np.asarray(imputed)[eval_mask] - np.asarray(truth)[eval_mask]
    return EvalMetrics(mae=float(np.abs(err).mean()),
                       rmse=float(np.sqrt((err**2).mean())),
                       count=count)


# -- pipeline ------------------------------------------------------------------

@dataclass
class FitResult:
    cfg: ModelConfig
    params: ModelParams
    norm: tuple
    history: list
    steps: list
    train_windows: list
    val_windows: list
    bounds: tuple


def fit(ds: Dataset, obs_mask, cfg: ModelConfig, tcfg: TrainConfig,
        spec: MissingPatternSpec, wcfg: WindowConfig = None,
        split_ratios=None) -> FitResult:
    """Standard split -> stats -> windows -> train pipeline."""
    wcfg = wcfg or WindowConfig(length=cfg.window)
    if wcfg.length != cfg.window:
        raise ConfigError(f"window length {wcfg.length} != model window {cfg.window}")
    if spec.whiten_mode == "fixed" and spec.whiten_rate == 0.0:
        raise ConfigError("whiten rate 0 leaves the reconstruction loss empty; "
                          "training needs whitened supervision cells")
    train_end, val_end = split_bounds(ds.steps, split_ratios or SPLIT_RATIOS)
    mean, std = compute_norm_stats(ds.values[:, :train_end], obs_mask[:, :train_end])
    ds.mean, ds.std = mean, std
    train_windows = make_windows(ds, obs_mask, wcfg, spec, [tcfg.seed, 1],
                                 start=0, stop=train_end, stride=wcfg.train_stride)
    val_windows = make_windows(ds, obs_mask, wcfg, spec, [tcfg.seed, 2],
                               start=train_end, stop=val_end, stride=wcfg.eval_stride)
    val_windows = [w for w in val_windows if w.whiten_mask.any()]
    params = ModelParams.initialize(cfg, seed=tcfg.seed)
    result = train(cfg, params, train_windows, val_windows, tcfg, spec, (mean, std))
    return FitResult(cfg=cfg, params=result.params, norm=(mean, std),
                     history=result.history, steps=result.steps,
                     train_windows=train_windows, val_windows=val_windows,
                     bounds=(train_end, val_end))


def test_region_metrics(ds: Dataset, obs_mask, imputed, bounds) -> EvalMetrics:
    """Score eval-masked cells in the held-out final segment of the series."""
    _, val_end = bounds
    region = np.zeros_like(obs_mask, dtype=bool)
    region[:, val_end:] = True
    eval_mask = region & ds.gt_available & ~obs_mask
    return evaluate(imputed, ds.values, eval_mask)
