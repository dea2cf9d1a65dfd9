"""``kalmanbase`` command line: fit, eval, sweep, synth, report.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure. Outputs other than ``run.log`` are byte-identical across reruns
with the same config, inputs and seed.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from .config import RunConfig, load_config
from .data import (
    DatasetSplit, FormatSpec, SynthSpec, load_dataset, load_tracks, save_dataset, split_by_vehicle,
    synth_generate, window_samples,
)
from .evaluation import evaluate, predict_chunk
from .exceptions import ConfigError, DataError, KalmanBaseError
from .kalman import CvModel, CvParams
from .multimodal import ExplorationSpec, exploration_samples, quantize
from .report import (
    MM_COLUMNS, STEP_COLUMNS, build_report, dump_json, fmt, summary, write_exploration_csv,
    write_predictions_csv, write_step_csv,
)
from .rnn import RnnParams
from .training import TrainConfig, TrainingDiverged, fit

log = logging.getLogger("kalmanbase")

CHECKPOINT_FORMAT = "kalmanbase.checkpoint"


# --------------------------------------------------------------------------
# helpers


def _setup_run(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("kalmanbase")
    root.handlers = [h for h in root.handlers if not isinstance(h, logging.FileHandler)]
    root.addHandler(handler)
    root.setLevel(logging.INFO)
    log.info("%s started, output_dir=%s", command, out)
    dump_json(cfg.echo(), out / "config.json")
    return out


def load_split(cfg: RunConfig) -> DatasetSplit:
    data = cfg.data
    if data.cache is not None:
        return load_dataset(data.cache)
    if data.synth is not None:
        spec = SynthSpec.from_dict({**data.synth.model_dump(), "seed": cfg.seed, "dt": cfg.model.dt,
                                    "test_fraction": data.test_fraction})
        return synth_generate(spec)
    if not data.path.exists():
        raise DataError(f"data.path not found: {data.path}")
    fmt_spec = FormatSpec.ngsim() if data.format == "ngsim" else FormatSpec(**data.format.model_dump())
    tracks = load_tracks(data.path, fmt_spec)
    samples = window_samples(tracks, data.rate, data.source_rate, align_heading=data.align_heading)
    train, test = split_by_vehicle(samples, data.test_fraction, cfg.seed)
    return DatasetSplit(train, test, cfg.seed, {"source": str(data.path)})


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg.train
    return TrainConfig(learning_rate=t.learning_rate, betas=tuple(t.betas), eps=t.eps,
                       batch_size=t.batch_size, epochs=t.epochs, seed=cfg.seed,
                       clip_norm=t.clip_norm, val_fraction=t.val_fraction)


def write_checkpoint(path, kind, params, optimizer_state, tcfg, extra=None) -> None:
    dump_json({"format": CHECKPOINT_FORMAT, "version": 1, "model": kind, "params": params.to_dict(),
               "optimizer_state": optimizer_state, "train_config": tcfg.to_dict(), **(extra or {})}, path)


def read_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    d = json.loads(path.read_text())
    if d.get("format") != CHECKPOINT_FORMAT:
        raise DataError(f"{path} is not a checkpoint")
    p = d["params"]
    params = RnnParams.from_dict(p) if p.get("format") == "kalmanbase.rnn_params" else CvParams.from_dict(p)
    return d["model"], params


def _mode_set(cfg: RunConfig, sigma_theta=None, sigma_alpha=None):
    e = cfg.exploration
    return quantize(ExplorationSpec(e.sigma_theta if sigma_theta is None else sigma_theta,
                                    e.sigma_alpha if sigma_alpha is None else sigma_alpha,
                                    e.k, e.n_mc, cfg.seed))


def _resolve_checkpoint(cfg: RunConfig, checkpoint):
    return Path(checkpoint) if checkpoint else Path(cfg.output_dir) / "checkpoint.json"


# --------------------------------------------------------------------------
# commands


def cmd_fit(cfg: RunConfig) -> Path:
    out = _setup_run(cfg, "fit")
    split = load_split(cfg)
    predictor = "rnn" if cfg.model.kind == "rnn" else "cv"
    tcfg = train_config(cfg)
    log_path = out / "training_log.jsonl"
    with open(log_path, "w") as fh:
        def record(rec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
            fh.flush()
        try:
            params, records, opt_state = fit(split, tcfg, predictor, hidden_size=cfg.model.hidden_size,
                                             callback=record, dt=cfg.model.dt)
        except TrainingDiverged as exc:
            if exc.checkpoint is not None:
                write_checkpoint(out / "checkpoint_diverged.json", cfg.model.kind, exc.checkpoint, {}, tcfg)
            raise
    write_checkpoint(out / "checkpoint.json", cfg.model.kind, params, opt_state, tcfg,
                     {"n_train": len(split.train), "initial_val_loss": records[0]["val_loss"]})
    log.info("fit done: %d epochs, final val loss %s", len(records) - 1, records[-1]["val_loss"])
    return out / "checkpoint.json"


def _evaluate_point(cfg, params, test, modes):
    return evaluate(params, test, modes, dt=cfg.model.dt, workers=cfg.workers,
                    level=cfg.report.ellipse_level, cov_scale_power=cfg.model.cov_scale_power)


def cmd_eval(cfg: RunConfig, checkpoint=None) -> Path:
    out = _setup_run(cfg, "eval")
    kind, params = read_checkpoint(_resolve_checkpoint(cfg, checkpoint))
    test = load_split(cfg).test
    if len(test) == 0:
        raise DataError("no samples in the test set")
    modes = None
    if cfg.model.kind == "cv_multimodal":
        if not isinstance(params, CvParams):
            raise ConfigError("cv_multimodal needs a constant-velocity checkpoint")
        modes = _mode_set(cfg)
        dump_json(modes.to_dict(), out / "modes.json")
    res = _evaluate_point(cfg, params, test, modes)
    write_step_csv(out / "metrics.csv", res.steps, STEP_COLUMNS, res.dt)
    if res.multimodal is not None:
        write_step_csv(out / "metrics_multimodal.csv", res.multimodal, MM_COLUMNS, res.dt)
    dump_json(summary(res.steps, res.dt, res.multimodal, cfg.model.kind, res.n_samples), out / "summary.json")
    dump_json(res.covariance.to_dict(), out / "covariance.json")
    if isinstance(params, CvParams):
        write_exploration_csv(out / "exploration.csv",
                              exploration_samples(test.histories, test.futures, params,
                                                  CvModel(cfg.model.dt)))
    if cfg.report.write_predictions:
        means, covs, probs = predict_chunk(params, test.histories, test.futures.shape[1], cfg.model.dt,
                                           modes, cfg.model.cov_scale_power)
        write_predictions_csv(out / "predictions.csv", means, covs, probs)
    log.info("eval done on %d samples", res.n_samples)
    return out


SWEEP_SECONDS = (1, 2, 3, 4, 5)


def cmd_sweep(cfg: RunConfig, checkpoint=None) -> Path:
    out = _setup_run(cfg, "sweep")
    _, params = read_checkpoint(_resolve_checkpoint(cfg, checkpoint))
    if not isinstance(params, CvParams):
        raise ConfigError("sweep needs a constant-velocity checkpoint")
    test = load_split(cfg).test
    if len(test) == 0:
        raise DataError("no samples in the test set")
    grid = sorted({(float(t), float(a)) for t in cfg.sweep.sigma_theta for a in cfg.sweep.sigma_alpha})
    header = ["sigma_theta_rad", "sigma_alpha"]
    header += [f"{label}@{t}s" for _, label in MM_COLUMNS for t in SWEEP_SECONDS]
    rows = []
    for st, sa in grid:
        res = _evaluate_point(cfg, params, test, _mode_set(cfg, st, sa))
        s = summary(res.steps, res.dt, res.multimodal, "cv_multimodal", res.n_samples)["multimodal"]
        rows.append([fmt(st), fmt(sa)] + [fmt(v) for _, label in MM_COLUMNS for v in s[label]])
        log.info("sweep point sigma_theta=%s sigma_alpha=%s done", st, sa)
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)
    return out / "sweep.csv"


def cmd_synth(spec: SynthSpec, out_path, force: bool = False) -> Path:
    out_path = Path(out_path)
    spec_path = out_path.with_suffix(".spec.json")
    if not force and (out_path.exists() or spec_path.exists()):
        raise ConfigError(f"{out_path} exists; pass --force to overwrite")
    out_path.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(synth_generate(spec), out_path)
    dump_json(spec.to_dict(), spec_path)
    return out_path


def cmd_report(metrics_dir, out_dir=None) -> list[Path]:
    return build_report(metrics_dir, out_dir)


# --------------------------------------------------------------------------
# argument parsing


def _add_run_args(p: argparse.ArgumentParser, checkpoint: bool = False) -> None:
    p.add_argument("--config", "-c", required=True, help="run configuration JSON")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key, e.g. train.epochs=5 (value parsed as JSON)")
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.add_argument("--output-dir")
    if checkpoint:
        p.add_argument("--checkpoint", help="defaults to <output_dir>/checkpoint.json")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kalmanbase", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    _add_run_args(sub.add_parser("fit", help="train filter parameters"))
    _add_run_args(sub.add_parser("eval", help="evaluate a checkpoint on the test split"), checkpoint=True)
    _add_run_args(sub.add_parser("sweep", help="grid over exploration stds"), checkpoint=True)
    p = sub.add_parser("synth", help="generate a synthetic dataset cache")
    p.add_argument("--spec", help="generator settings JSON (defaults if omitted)")
    p.add_argument("--out", required=True, help="output .npz path")
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true", help="overwrite an existing cache")
    p = sub.add_parser("report", help="tables, calibration flags and ellipse SVG from eval outputs")
    p.add_argument("--input", required=True, help="eval output directory")
    p.add_argument("--out", help="defaults to the input directory")
    return parser


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "synth":
        raw = {}
        if args.spec:
            spec_path = Path(args.spec)
            if not spec_path.exists():
                raise ConfigError(f"spec file not found: {spec_path}")
            raw = json.loads(spec_path.read_text())
        if args.seed is not None:
            raw["seed"] = args.seed
        path = cmd_synth(SynthSpec.from_dict(raw), args.out, args.force)
        print(path)
        return 0
    if args.command == "report":
        for p in cmd_report(args.input, args.out):
            print(p)
        return 0
    cfg = load_config(args.config, args.set, args.seed, args.workers, args.output_dir)
    if args.command == "fit":
        print(cmd_fit(cfg))
    elif args.command == "eval":
        print(cmd_eval(cfg, args.checkpoint))
    else:
        print(cmd_sweep(cfg, args.checkpoint))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except KalmanBaseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (json.JSONDecodeError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
