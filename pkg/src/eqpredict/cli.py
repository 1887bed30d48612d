"""Command-line front end: gen, train, eval, predict, check-equivariance.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 audit failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import math
import sys
from dataclasses import asdict, replace
from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np

from .config import ConfigError, RunConfig, load_config
from .evaluation import (
    MetricRow,
    baseline_predictions,
    equivariance_audit,
    predict_scenes,
    rotation_about,
    scene_centroid,
    scene_metrics,
    table_header,
)
from .geometry import RigidTransform, Vec2
from .plots import loss_curve_svg, trajectory_svg
from .predictor import MotionPredictor, PredictionReport
from .scene_data import SPLITS, SceneFormatError, load_scene, read_dataset, split, synth_generate, write_dataset
from .training import (
    CHECKPOINT_NAME,
    TrainLog,
    TrainingDiverged,
    eval_horizons,
    load_checkpoint,
    train,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_AUDIT = 0, 1, 2, 3

# Fields that change the network or its inputs; optimizer settings may differ.
MODEL_KEYS = ("t_in", "t_out", "n_agents", "n_lanes", "lane_points", "repeats", "hidden_dim",
              "mlp_layers", "n_heads", "d_model", "d_ctx", "ffn_dim", "channels", "n_categories",
              "map_mode", "encoder", "rate_hz")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _configs(args):
    overrides = {"seed": str(args.seed)} if args.seed is not None else {}
    try:
        return load_config(args.config, overrides)
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}", EXIT_USAGE) from exc
    except ConfigError as exc:
        raise CliError(f"config error: {exc}", EXIT_USAGE) from exc


def _dataset(path, splits=SPLITS):
    try:
        return read_dataset(path, splits)
    except (SceneFormatError, OSError) as exc:
        raise CliError(f"data error: {exc}", EXIT_DATA) from exc


def _checkpoint(path):
    try:
        return load_checkpoint(path)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint: {exc}", EXIT_DATA) from exc
    except ValueError as exc:
        raise CliError(f"bad checkpoint {path}: {exc}", EXIT_DATA) from exc


def _dims_mismatch(cfg: RunConfig, dims) -> dict:
    want = asdict(cfg.scene_dims)
    have = asdict(dims)
    return {k: (want[k], have[k]) for k in want if want[k] != have[k]}


def _describe(diff: dict) -> str:
    return ", ".join(f"{k} (model {a!r} vs {b!r})" for k, (a, b) in sorted(diff.items()))


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _csv_text(rows: Sequence[Sequence[str]]) -> str:
    buf = io.StringIO()
    csv.writer(buf, lineterminator="\n").writerows(rows)
    return buf.getvalue()


# -- verbs --------------------------------------------------------------------------
def cmd_gen(args) -> int:
    run, synth = _configs(args)
    scenes = synth_generate(synth, run.scene_dims)
    train_s, val_s, test_s = split(scenes, synth.ratios, synth.seed)
    out = Path(args.out)
    try:
        manifest = write_dataset(out, {"train": train_s, "val": val_s, "test": test_s}, run.scene_dims, synth)
    except OSError as exc:
        raise CliError(f"cannot write dataset: {exc}", EXIT_DATA) from exc
    digest = hashlib.sha256(manifest.read_bytes()).hexdigest()[:16]
    print(f"wrote {len(scenes)} scenes to {out}: train {len(train_s)}, val {len(val_s)}, test {len(test_s)}")
    print(f"manifest sha256 {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    out = Path(args.out)
    start, log = 0, None
    if args.resume:
        model, start = _checkpoint(out / CHECKPOINT_NAME)
        cfg = model.cfg
        try:
            log = TrainLog.from_csv((out / "trainlog.csv").read_text())
        except OSError as exc:
            raise CliError(f"cannot resume: {exc}", EXIT_DATA) from exc
        log.rows = [r for r in log.rows if r["epoch"] <= start]
        if args.epochs is not None:
            cfg = replace(cfg, epochs=args.epochs)
            model.cfg = cfg
    else:
        cfg, _ = _configs(args)
        if args.epochs is not None:
            cfg = replace(cfg, epochs=args.epochs)
        model = MotionPredictor(cfg)
    ds = _dataset(args.data, ("train", "val"))
    bad = _dims_mismatch(model.cfg, ds.dims)
    if bad:
        raise CliError(f"config does not match dataset: {_describe(bad)}", EXIT_USAGE)
    if not ds.splits["train"]:
        raise CliError("data error: training split is empty", EXIT_DATA)
    print(f"training {model.num_parameters()} parameters on {len(ds.splits['train'])} scenes "
          f"(config {model.cfg.config_hash()})")

    def progress(row):
        print(f"epoch {row['epoch']:3d}  loss {row['train_loss']:.6f}", flush=True)

    try:
        log = train(model, ds.splits["train"], ds.splits["val"], out, start, log, progress=progress)
    except TrainingDiverged as exc:
        print(f"error: {exc}; last good checkpoint kept in {out}", file=sys.stderr)
        return EXIT_DATA
    _write(out / "loss_curve.svg", loss_curve_svg(
        [r["epoch"] for r in log.rows], [("train loss (m)", log.train_losses())], title="Training loss"))
    print(f"wrote {out / CHECKPOINT_NAME}, {out / 'trainlog.csv'}, {out / 'loss_curve.svg'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = _checkpoint(args.checkpoint)
    if args.config:
        wanted, _ = _configs(args)
        diff = wanted.diff(model.cfg, MODEL_KEYS)
        if diff:
            raise CliError("config mismatch with checkpoint: " + ", ".join(
                f"{k} (config {a!r} vs checkpoint {b!r})" for k, (a, b) in sorted(diff.items())), EXIT_USAGE)
    ds = _dataset(args.data, args.splits)
    bad = _dims_mismatch(model.cfg, ds.dims)
    if bad:
        raise CliError(f"config mismatch with dataset: {_describe(bad)}", EXIT_USAGE)
    horizons = eval_horizons(model.cfg)
    n_params = model.num_parameters()
    timing = Path(args.checkpoint).parent / "trainlog.timing.csv"
    train_time = ""
    if timing.exists():
        secs = [float(line.split(",")[1]) for line in timing.read_text().splitlines()[1:] if line]
        train_time = f"{sum(secs):.1f}s"
    rows: List[MetricRow] = []
    for name in args.splits:
        scenes = ds.splits[name]
        if not scenes:
            continue
        ade, fde = scene_metrics(predict_scenes(model, scenes), scenes, model.cfg.rate_hz, horizons)
        rows.append(MetricRow(name, f"model[{model.cfg.map_mode}]", ade, fde, n_params, train_time))
        ade, fde = scene_metrics(baseline_predictions(scenes, model.cfg.t_out), scenes, model.cfg.rate_hz, horizons)
        rows.append(MetricRow(name, "constant_velocity", ade, fde, 0, ""))
    if not rows:
        raise CliError("data error: no scenes in the requested splits", EXIT_DATA)
    header = table_header(horizons)
    # metrics.csv is the deterministic output; wall-clock time is printed only.
    text = _csv_text([header[:-1]] + [r.cells(horizons)[:-1] for r in rows])
    out = Path(args.out)
    _write(out / "metrics.csv", text)
    widths = [max(len(header[i]), *(len(r.cells(horizons)[i]) for r in rows)) for i in range(len(header))]
    for cells in [header] + [r.cells(horizons) for r in rows]:
        print("  ".join(c.ljust(w) for c, w in zip(cells, widths)).rstrip())
    print(f"wrote {out / 'metrics.csv'}")
    return EXIT_OK


def cmd_predict(args) -> int:
    model, _ = _checkpoint(args.checkpoint)
    try:
        scene = load_scene(args.scene, model.cfg.scene_dims)
    except (SceneFormatError, OSError) as exc:
        raise CliError(f"data error: {exc}", EXIT_DATA) from exc
    report = model.forward(scene)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    out = Path(args.out)
    svg_path = out if out.suffix == ".svg" else out / f"{scene.scene_id}.svg"
    record_path = svg_path.with_suffix(".csv")
    _write(svg_path, trajectory_svg(scene, report))
    header = PredictionReport.record_header(model.cfg.t_out, sorted(report.ade))
    _write(record_path, header + "\n" + report.to_record() + "\n")
    print(report.to_record())
    return EXIT_OK


def cmd_check_equivariance(args) -> int:
    if args.trials < 1:
        raise CliError("trials must be at least 1", EXIT_USAGE)
    if args.checkpoint == "random-params":
        cfg, _ = _configs(args)
        model = MotionPredictor(cfg)
        source = f"random parameters (seed {cfg.seed})"
    else:
        model, _ = _checkpoint(args.checkpoint)
        source = str(args.checkpoint)
    ds = _dataset(args.data, args.splits)
    bad = _dims_mismatch(model.cfg, ds.dims)
    if bad:
        raise CliError(f"config mismatch with dataset: {_describe(bad)}", EXIT_USAGE)
    scenes = [s for name in args.splits for s in ds.splits[name]]
    if args.limit:
        scenes = scenes[: args.limit]
    if not scenes:
        raise CliError("data error: no scenes to audit", EXIT_DATA)
    fixed = args.rotation is not None or args.translation is not None
    if fixed:
        theta = math.radians(args.rotation or 0.0)
        shift = np.array(args.translation or (0.0, 0.0), dtype=np.float64)
        reports = []
        for s in scenes:
            center = scene_centroid(s) if args.about_centroid else np.zeros(2)
            rot = rotation_about(theta, center)
            g = RigidTransform(rot.rotation, Vec2.from_array(rot.translation.array + shift))
            reports.append(equivariance_audit(model, [s], transforms=[g]))
        worst = max(reports, key=lambda r: r.max_deviation)
        report = replace(worst, scenes_checked=sum(r.scenes_checked for r in reports),
                         degenerate=[d for r in reports for d in r.degenerate], trials=1)
    else:
        report = equivariance_audit(model, scenes, trials=args.trials, seed=model.cfg.seed if args.seed is None else args.seed)
    print(f"model: {source}")
    print(report.summary())
    if args.out:
        _write(Path(args.out) / "equivariance.txt", f"model: {source}\n{report.summary()}\n")
    return EXIT_OK if report.passed else EXIT_AUDIT


# -- argument parsing ---------------------------------------------------------------
def _common(p: argparse.ArgumentParser, out_required: bool = True) -> None:
    p.add_argument("--config", help="flat key = value config file")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.add_argument("--out", required=out_required, help="output path")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="eqpredict", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset directory")
    _common(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model, checkpointing every epoch")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.add_argument("--resume", action="store_true", help="continue from <out>/checkpoint.ckpt")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="ADE/FDE table for a checkpoint, with the baseline row")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--splits", nargs="+", default=["val", "test"], choices=SPLITS)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict one scene and draw it")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--scene", required=True, help="scene CSV file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("check-equivariance", help="audit forward(g.scene) against g.forward(scene)")
    _common(p, out_required=False)
    p.add_argument("--checkpoint", required=True, help='checkpoint path or "random-params"')
    p.add_argument("--data", required=True)
    p.add_argument("--splits", nargs="+", default=["test"], choices=SPLITS)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--limit", type=int, default=0, help="audit at most this many scenes")
    p.add_argument("--rotation", type=float, help="fixed rotation in degrees instead of random transforms")
    p.add_argument("--translation", type=float, nargs=2, metavar=("DX", "DY"))
    p.add_argument("--about-centroid", action="store_true", help="rotate about each scene's agent centroid")
    p.set_defaults(func=cmd_check_equivariance)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
