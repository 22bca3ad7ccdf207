"""Training with per-epoch validation model selection, and single-case inference."""

from __future__ import annotations

import csv
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from ..errors import DataError, NumericError
from ..metrics import QualityScore
from ..volgrid import load_case, preprocess
from .model import RegressorModel, forward, loss_and_grad
from .optim import OptimState, adam_step

log = logging.getLogger(__name__)

LOG_COLUMNS = ["epoch", "train_loss", "val_mae_wh", "wall_ms"]


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 46
    lr0: float = 1e-5
    decay: float = 0.005
    decay_mode: str = "lr"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    chunk: int = 8  # samples per forward/backward pass inside a batch


@dataclass
class TrainLog:
    rows: list[dict] = field(default_factory=list)
    best_epoch: int = 0

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=LOG_COLUMNS, lineterminator="\n")
            w.writeheader()
            for r in self.rows:
                w.writerow({k: r[k] for k in LOG_COLUMNS})


def load_inputs(records, root, dims, norm_mode: str = "per_volume") -> np.ndarray:
    """Preprocess every (image, seg) case in a manifest into a float32 input stack."""
    root = Path(root)
    out = np.empty((len(records),) + tuple(dims) + (5,), dtype=np.float32)
    for i, rec in enumerate(records):
        try:
            image, seg = load_case(root / rec.image, root / rec.seg)
        except FileNotFoundError as e:
            raise DataError(f"case {rec.case_id}: missing file {e.filename}") from e
        out[i] = preprocess(image, seg, dims, norm_mode)
    return out


def predict_batch(model: RegressorModel, x: np.ndarray, chunk: int = 8) -> np.ndarray:
    return forward(model, x, chunk)


def train(model: RegressorModel, train_x: np.ndarray, train_y: np.ndarray,
          val_x: np.ndarray, val_y: np.ndarray, cfg: TrainConfig, seed: int = 0,
          progress=None) -> tuple[RegressorModel, TrainLog]:
    """Adam training; returns the epoch checkpoint with the lowest validation WH MAE.

    Shuffling uses ``default_rng([seed, epoch])`` so a rerun with the same
    inputs reproduces the log and parameters exactly (timings aside).
    """
    if len(train_x) == 0 or len(val_x) == 0:
        raise DataError("training and validation sets must be non-empty")
    train_y = np.asarray(train_y, dtype=np.float64)
    val_y = np.asarray(val_y, dtype=np.float64)
    model = model.copy()
    opt = OptimState.for_model(model, lr0=cfg.lr0, decay=cfg.decay, beta1=cfg.beta1,
                               beta2=cfg.beta2, eps=cfg.eps, decay_mode=cfg.decay_mode)
    best = model.copy()
    best_mae = np.inf
    tlog = TrainLog()
    n = len(train_x)
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = np.random.default_rng([seed, epoch]).permutation(n)
        total = 0.0
        for start in range(0, n, cfg.batch_size):
            idx = np.sort(order[start:start + cfg.batch_size])
            loss, grad, _ = loss_and_grad(model.spec, model.params, train_x[idx], train_y[idx], cfg.chunk)
            if not np.isfinite(loss):
                raise NumericError(f"non-finite training loss at epoch {epoch}")
            adam_step(model, grad, opt)
            total += loss * len(idx)
        pred = forward(model, val_x, cfg.chunk)
        val_mae = float(np.mean(np.abs(pred[:, 4] - val_y[:, 4])))
        if val_mae < best_mae:
            best_mae, best = val_mae, model.copy()
            tlog.best_epoch = epoch
        row = {"epoch": epoch, "train_loss": repr(total / n), "val_mae_wh": repr(val_mae),
               "wall_ms": f"{(time.perf_counter() - t0) * 1000:.1f}"}
        tlog.rows.append(row)
        log.info("epoch %d  train_loss %.5f  val_mae_wh %.4f", epoch, total / n, val_mae)
        if progress is not None:
            progress(row)
    best.meta = dict(best.meta, best_epoch=tlog.best_epoch,
                     best_val_mae_wh=None if not np.isfinite(best_mae) else best_mae)
    return best, tlog


def predict_case(model: RegressorModel, image_path, seg_path,
                 norm_mode: str = "per_volume") -> tuple[QualityScore, float]:
    """Full preprocessing plus forward pass for one case; returns (score, latency ms)."""
    t0 = time.perf_counter()
    image, seg = load_case(image_path, seg_path)
    x = preprocess(image, seg, model.spec.input_dims, norm_mode).astype(np.float32)
    y = forward(model, x[None], chunk=1)[0]
    ms = (time.perf_counter() - t0) * 1000.0
    return QualityScore(*(float(v) for v in y)), ms
