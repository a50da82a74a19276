"""Command-line pipeline: synth, mask, train, impute, eval, spectrum, bench.

Machine-readable output (JSON, CSV) goes to stdout or files; human logs go
to stderr. Exit codes: 0 success, 2 training diverged, 3 bad configuration
or input files, 1 anything else.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

import numpy as np

from . import __version__, data
from .baselines import impute_linear, impute_mean
from .errors import ConfigError, ContractError, LrImputeError, ParseError, TrainingDiverged
from .losses import DEFAULT_FOURIER_WEIGHT
from .model import ModelConfig, load_checkpoint, save_checkpoint
from .spectral import svd_values
from .training import TrainConfig, evaluate, fit, impute_series

log = logging.getLogger("lrimpute")

SEED_ENV = "LRIMPUTE_SEED"


def _env_seed(seed):
    override = os.environ.get(SEED_ENV)
    return int(override) if override else seed


def _write_json(obj, stream=None):
    json.dump(obj, stream or sys.stdout, sort_keys=True)
    (stream or sys.stdout).write("\n")


def _save_rows(path, rows, fieldnames):
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


# -- subcommands ----------------------------------------------------------------

def cmd_synth(args):
    seed = _env_seed(args.seed)
    ds = data.synth_lowrank(args.nodes, args.steps, args.rank, args.noise,
                            args.steps_per_day, seed)
    data.save_dataset_csv(args.output, ds)
    manifest = {
        "nodes": args.nodes, "steps": args.steps, "rank": args.rank,
        "noise": args.noise, "steps_per_day": args.steps_per_day, "seed": seed,
        "generator": f"lrimpute {__version__}",
    }
    with open(args.output + ".manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    log.info("wrote %s (%d x %d)", args.output, args.nodes, args.steps)
    return 0


def _missing_spec_from_args(args):
    if args.config:
        with open(args.config) as fh:
            return data.MissingPatternSpec.from_dict(json.load(fh))
    spec = data.MissingPatternSpec(kind=args.pattern, seed=_env_seed(args.seed))
    if args.pattern == "point" and args.rate is not None:
        spec = data.MissingPatternSpec(kind="point", point_rate=args.rate, seed=spec.seed)
    elif args.pattern == "block":
        kw = {"kind": "block", "seed": spec.seed}
        if args.rate is not None:
            kw["block_drop_rate"] = args.rate
        if args.failure_prob is not None:
            kw["block_failure_prob"] = args.failure_prob
        if args.duration is not None:
            lo, hi = (int(v) for v in args.duration.split(".."))
            kw["block_duration"] = (lo, hi)
        spec = data.MissingPatternSpec(**kw)
    return spec


def cmd_mask(args):
    ds = data.load_dataset_csv(args.input)
    spec = _missing_spec_from_args(args)
    mask = data.apply_missing(ds, spec)
    data.save_mask_csv(args.output, mask)
    log.info("wrote %s (observed fraction %.4f)", args.output, mask.mean())
    return 0


_RUN_CONFIG_KEYS = {"seed", "data", "mask", "model", "train", "whiten", "window",
                    "missing", "split"}


def _split_ratios(raw):
    split = dict(raw.get("split", {}))
    unknown = set(split) - {"train", "val", "test"}
    if unknown:
        raise ConfigError(f"unknown split keys: {sorted(unknown)}")
    ratios = (split.get("train", data.SPLIT_RATIOS[0]),
              split.get("val", data.SPLIT_RATIOS[1]),
              split.get("test", data.SPLIT_RATIOS[2]))
    if any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigError(f"split ratios must be >= 0 and sum to 1, got {ratios}")
    return ratios


def _load_run_config(path):
    with open(path) as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{path}: invalid JSON ({exc})") from None
    unknown = set(raw) - _RUN_CONFIG_KEYS
    if unknown:
        raise ConfigError(f"unknown run config keys: {sorted(unknown)}")
    for key in ("data",):
        if key not in raw:
            raise ConfigError(f"run config is missing required key {key!r}")
    return raw


def _whiten_spec(raw, seed):
    whiten = dict(raw.get("whiten", {}))
    unknown = set(whiten) - {"mode", "rate", "rates"}
    if unknown:
        raise ConfigError(f"unknown whiten keys: {sorted(unknown)}")
    kw = {"whiten_mode": whiten.get("mode", "fixed"), "seed": seed}
    if "rate" in whiten:
        kw["whiten_rate"] = whiten["rate"]
    if "rates" in whiten:
        kw["whiten_rates"] = tuple(whiten["rates"])
    return data.MissingPatternSpec(**kw)


def cmd_train(args):
    raw = _load_run_config(args.config)
    seed = _env_seed(raw.get("seed", 0))
    ds = data.load_dataset_csv(raw["data"])
    if "mask" in raw and raw["mask"]:
        obs_mask = data.load_mask_csv(raw["mask"])
        if obs_mask.shape != ds.values.shape:
            raise ConfigError(f"mask shape {obs_mask.shape} != data shape {ds.values.shape}")
        obs_mask &= ds.gt_available
    else:
        obs_mask = ds.gt_available.copy()

    model_raw = dict(raw.get("model", {}))
    model_raw.setdefault("n_nodes", ds.n_sensors)
    if model_raw["n_nodes"] != ds.n_sensors:
        raise ConfigError(f"model.n_nodes {model_raw['n_nodes']} != data sensors {ds.n_sensors}")
    cfg = ModelConfig.from_dict(model_raw)
    ds.steps_per_day = cfg.steps_per_day

    train_raw = dict(raw.get("train", {}))
    train_raw["seed"] = seed
    tcfg = TrainConfig.from_dict(train_raw)
    spec = _whiten_spec(raw, seed)
    wcfg_raw = dict(raw.get("window", {}))
    unknown = set(wcfg_raw) - {"length", "train_stride", "eval_stride"}
    if unknown:
        raise ConfigError(f"unknown window keys: {sorted(unknown)}")
    wcfg_raw.setdefault("length", cfg.window)
    wcfg = data.WindowConfig(**wcfg_raw)

    ratios = _split_ratios(raw)
    os.makedirs(args.output, exist_ok=True)
    started = time.time()
    try:
        result = fit(ds, obs_mask, cfg, tcfg, spec, wcfg, split_ratios=ratios)
    except TrainingDiverged as exc:
        if exc.last_good is not None:
            from .model import ModelParams

            params = ModelParams.initialize(cfg, seed=seed)
            params.load_arrays(exc.last_good)
            save_checkpoint(os.path.join(args.output, "model.ckpt"), cfg, params,
                            ds.mean, ds.std, seed, len(exc.history))
            log.error("training diverged; last finite checkpoint saved")
        raise

    save_checkpoint(os.path.join(args.output, "model.ckpt"), cfg, result.params,
                    result.norm[0], result.norm[1], seed, len(result.steps))
    resolved = {
        "seed": seed,
        "data": raw["data"],
        "mask": raw.get("mask"),
        "model": cfg.to_dict(),
        "train": tcfg.to_dict(),
        "whiten": {"mode": spec.whiten_mode, "rate": spec.whiten_rate,
                   "rates": list(spec.whiten_rates)},
        "window": wcfg.to_dict(),
        "split": {"train": ratios[0], "val": ratios[1], "test": ratios[2]},
    }
    with open(os.path.join(args.output, "resolved.json"), "w") as fh:
        json.dump(resolved, fh, sort_keys=True, indent=2)
        fh.write("\n")
    _save_rows(os.path.join(args.output, "history.csv"), result.history,
               ["epoch", "train_recon", "train_fourier", "train_total", "val_mae", "lr"])
    _save_rows(os.path.join(args.output, "steps.csv"), result.steps,
               ["step", "recon", "fourier", "total"])
    log.info("trained in %.1fs; checkpoint in %s", time.time() - started, args.output)
    best = min((h["val_mae"] for h in result.history), default=float("nan"))
    _write_json({"checkpoint": os.path.join(args.output, "model.ckpt"),
                 "epochs": len(result.history), "best_val_mae": best})
    return 0


def cmd_impute(args):
    cfg, params, norm, _, _ = load_checkpoint(args.model)
    ds = data.load_dataset_csv(args.input)
    obs_mask = data.load_mask_csv(args.mask) if args.mask else ds.gt_available.copy()
    if obs_mask.shape != ds.values.shape:
        raise ConfigError(f"mask shape {obs_mask.shape} != data shape {ds.values.shape}")
    obs_mask = obs_mask & ds.gt_available
    completed = impute_series(cfg, params, ds.values, obs_mask, norm,
                              window_length=args.window,
                              allow_window_mismatch=args.allow_window_mismatch)
    out = data.Dataset(values=completed, gt_available=np.ones_like(obs_mask),
                       steps_per_day=cfg.steps_per_day)
    data.save_dataset_csv(args.output, out)
    log.info("wrote %s", args.output)
    return 0


def cmd_baseline(args):
    ds = data.load_dataset_csv(args.input)
    obs_mask = data.load_mask_csv(args.mask) if args.mask else ds.gt_available.copy()
    obs_mask = obs_mask & ds.gt_available
    if args.method == "mean":
        completed = impute_mean(ds.values, obs_mask)
    else:
        completed = impute_linear(ds.values, obs_mask)
    out = data.Dataset(values=completed, gt_available=np.ones_like(obs_mask),
                       steps_per_day=ds.steps_per_day)
    data.save_dataset_csv(args.output, out)
    return 0


def cmd_eval(args):
    pred = data.load_dataset_csv(args.pred)
    truth = data.load_dataset_csv(args.truth)
    if pred.values.shape != truth.values.shape:
        raise ConfigError(
            f"prediction shape {pred.values.shape} != truth shape {truth.values.shape}")
    obs_mask = data.load_mask_csv(args.mask) if args.mask else np.zeros_like(truth.gt_available)
    eval_mask = truth.gt_available & ~obs_mask
    metrics = evaluate(pred.values, truth.values, eval_mask)
    _write_json({"mae": metrics.mae, "rmse": metrics.rmse, "count": metrics.count})
    return 0


def cmd_spectrum(args):
    ds = data.load_dataset_csv(args.input)
    if not ds.gt_available.all():
        bad = np.argwhere(~ds.gt_available)[0]
        raise ContractError(
            f"spectrum needs a complete matrix; first missing cell at "
            f"sensor {bad[0]}, step {bad[1]}")
    spectrum = svd_values(ds.values)
    energy = spectrum.cumulative_energy()
    rows = [{"index": i + 1, "singular_value": f"{sv:.17g}",
             "cumulative_energy": f"{en:.17g}"}
            for i, (sv, en) in enumerate(zip(spectrum.values, energy))]
    _save_rows(args.output, rows, ["index", "singular_value", "cumulative_energy"])
    log.info("wrote %s (%d values)", args.output, len(rows))
    return 0


def cmd_bench(args):
    from .bench import attention_scaling

    sizes = [int(s) for s in args.sizes.split(",")]
    report = attention_scaling(args.attention, sizes, repeats=args.repeats,
                               model_dim=args.dim, seed=_env_seed(args.seed))
    _write_json(report)
    return 0


# -- entry point ------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="lrimpute",
        description="Low-rank attention imputation for sensors-by-steps series")
    parser.add_argument("--version", action="version", version=f"lrimpute {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log at DEBUG level")
    parser.add_argument("--threads", type=int, default=1,
                        help="worker-thread cap (all numeric paths currently "
                             "run one thread for determinism)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic low-rank dataset")
    p.add_argument("--nodes", type=int, required=True)
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--rank", type=int, default=5)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--steps-per-day", type=int, default=24)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("mask", help="simulate a missing pattern as an observation mask")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--pattern", choices=("point", "block"), default="point")
    p.add_argument("--rate", type=float, default=None,
                   help="point removal rate, or block extra drop rate")
    p.add_argument("--failure-prob", type=float, default=None)
    p.add_argument("--duration", default=None, help="block duration bounds, e.g. 12..48")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None, help="JSON file with a full missing-pattern spec")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="train a model from a JSON run config")
    p.add_argument("-c", "--config", required=True)
    p.add_argument("-o", "--output", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("impute", help="complete a series with a trained model")
    p.add_argument("-m", "--model", required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--window", type=int, default=None)
    p.add_argument("--allow-window-mismatch", action="store_true")
    p.set_defaults(func=cmd_impute)

    p = sub.add_parser("baseline", help="complete a series with a classical imputer")
    p.add_argument("--method", choices=("mean", "linear"), required=True)
    p.add_argument("-i", "--input", required=True)
    p.add_argument("--mask", default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("eval", help="MAE/RMSE on cells absent from the observation mask")
    p.add_argument("--pred", required=True)
    p.add_argument("--truth", required=True)
    p.add_argument("--mask", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("spectrum", help="singular values and cumulative energy of a matrix")
    p.add_argument("-i", "--input", required=True)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_spectrum)

    p = sub.add_parser("bench", help="attention scaling vs a quadratic control")
    p.add_argument("--attention", choices=("temporal", "spatial"), required=True)
    p.add_argument("--sizes", default="256,512")
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr,
                        level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError(f"--threads must be >= 1, got {args.threads}")
        return args.func(args)
    except (ConfigError, ParseError, ContractError) as exc:
        _write_json({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return 3
    except OSError as exc:
        _write_json({"error": "FileError", "message": str(exc)}, sys.stderr)
        return 3
    except TrainingDiverged as exc:
        _write_json({"error": "TrainingDiverged", "message": str(exc)}, sys.stderr)
        return 2
    except LrImputeError as exc:
        _write_json({"error": type(exc).__name__, "message": str(exc)}, sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
