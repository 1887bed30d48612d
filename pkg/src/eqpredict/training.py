"""Training loop, checkpoints and the per-epoch training log."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Union

import numpy as np

from .autodiff import checkpoint as ckpt
from .autodiff.tensor import backward
from .autodiff.optim import adam_step
from .config import RunConfig, run_config_from_text
from .predictor import MotionPredictor, computable_horizons, horizon_label, metrics
from .scene_data import Scene, SceneBatch, collate

CHECKPOINT_NAME = "checkpoint.ckpt"


class TrainingDiverged(RuntimeError):
    pass


def eval_horizons(cfg: RunConfig) -> List[float]:
    """Standard 1/2/3 s horizons that fit in T_out, plus the full horizon."""
    hs = computable_horizons(cfg.t_out, cfg.rate_hz)
    full = cfg.t_out / cfg.rate_hz
    if full not in hs:
        hs.append(full)
    return hs


# -- checkpoints --------------------------------------------------------------
def save_checkpoint(path: Union[str, Path], model: MotionPredictor, epoch: int) -> None:
    meta = {f"config.{k}": v for k, v in (line.split(" = ") for line in model.cfg.to_text().splitlines())}
    meta["epoch"] = str(epoch)
    meta["config_hash"] = model.cfg.config_hash()
    ckpt.save(path, model.store, meta)


def load_checkpoint(path: Union[str, Path]) -> tuple:
    """Return ``(model, epoch)`` rebuilt from a checkpoint file."""
    params, adam, meta = ckpt.read(path)
    cfg_text = "".join(f"{k[len('config.'):]} = {v}\n" for k, v in meta.items() if k.startswith("config."))
    cfg = run_config_from_text(cfg_text)
    model = MotionPredictor(cfg)
    ckpt.load_into(model.store, params, adam)
    return model, int(meta.get("epoch", 0))


# -- training log ---------------------------------------------------------------
@dataclass
class TrainLog:
    horizons: Sequence[float]
    config_hash: str
    rows: List[dict] = field(default_factory=list)
    seconds: List[float] = field(default_factory=list)

    @property
    def columns(self) -> List[str]:
        cols = ["epoch", "train_loss"]
        for h in self.horizons:
            cols += [f"val_ade_{horizon_label(h)}", f"val_fde_{horizon_label(h)}"]
        return cols + ["config_hash"]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.columns)
        for row in self.rows:
            w.writerow([row["epoch"]] + [repr(row[c]) for c in self.columns[1:-1]] + [self.config_hash])
        return buf.getvalue()

    def timing_csv(self) -> str:
        return "epoch,seconds\n" + "".join(f"{r['epoch']},{s:.3f}\n" for r, s in zip(self.rows, self.seconds))

    @classmethod
    def from_csv(cls, text: str) -> "TrainLog":
        reader = csv.DictReader(io.StringIO(text))
        rows = list(reader)
        horizons = []
        for col in reader.fieldnames or []:
            if col.startswith("val_ade_"):
                horizons.append(float(col[len("val_ade_"):-1]))
        log = cls(horizons, rows[0]["config_hash"] if rows else "")
        for r in rows:
            log.rows.append({k: (int(v) if k == "epoch" else v if k == "config_hash" else float(v)) for k, v in r.items()})
        return log

    def train_losses(self) -> List[float]:
        return [r["train_loss"] for r in self.rows]


def evaluate_model(model: MotionPredictor, batch: SceneBatch, horizons: Sequence[float], chunk: int = 256):
    """Scene-averaged (ADE, FDE) dicts over ``batch``."""
    preds = np.concatenate([model.predict(batch.take(range(i, min(i + chunk, len(batch)))))
                            for i in range(0, len(batch), chunk)])
    return metrics(preds, batch.future, model.cfg.rate_hz, horizons)


def train_epoch(model: MotionPredictor, train: SceneBatch, epoch: int) -> float:
    cfg = model.cfg
    order = np.random.default_rng([cfg.seed, epoch]).permutation(len(train))
    total = 0.0
    for start in range(0, len(order), cfg.batch_size):
        idx = order[start : start + cfg.batch_size]
        model.store.zero_grad(fill=True)
        loss = model.loss(train.take(idx))
        value = loss.item()
        if not math.isfinite(value):
            raise TrainingDiverged(f"non-finite loss at epoch {epoch}, batch starting {start}")
        backward(loss)
        adam_step(model.store, cfg.lr)
        total += value * len(idx)
    return total / len(order)


def train(
    model: MotionPredictor,
    train_scenes: Sequence[Scene],
    val_scenes: Sequence[Scene],
    out_dir: Optional[Union[str, Path]] = None,
    start_epoch: int = 0,
    log: Optional[TrainLog] = None,
    epochs: Optional[int] = None,
    progress: Optional[Callable[[dict], None]] = None,
) -> TrainLog:
    """Train for epochs ``start_epoch+1 .. epochs`` (1-based), checkpointing each one."""
    cfg = model.cfg
    epochs = cfg.epochs if epochs is None else epochs
    horizons = eval_horizons(cfg)
    log = log or TrainLog(horizons, cfg.config_hash())
    train_batch = collate(list(train_scenes))
    val_batch = collate(list(val_scenes)) if val_scenes else None
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    for epoch in range(start_epoch + 1, epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(model, train_batch, epoch)
        row = {"epoch": epoch, "train_loss": loss}
        if val_batch is not None:
            ade, fde = evaluate_model(model, val_batch, horizons)
        else:
            ade = fde = {h: float("nan") for h in horizons}
        for h in horizons:
            row[f"val_ade_{horizon_label(h)}"] = ade[h]
            row[f"val_fde_{horizon_label(h)}"] = fde[h]
        log.rows.append(row)
        log.seconds.append(time.perf_counter() - t0)
        if out is not None:
            save_checkpoint(out / f"checkpoint_epoch{epoch:03d}.ckpt", model, epoch)
            save_checkpoint(out / CHECKPOINT_NAME, model, epoch)
            (out / "trainlog.csv").write_text(log.to_csv())
            (out / "trainlog.timing.csv").write_text(log.timing_csv())
        if progress is not None:
            progress(row)
    return log
