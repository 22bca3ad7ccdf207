"""End-to-end experiments: balance, split, train, evaluate, time, and write artifacts.

A run directory holds::

    config.json          echo of the resolved configuration
    report.json/.csv     held-out evaluation (deterministic)
    predictions.csv      per-case predicted and true scores on the test split
    errors_by_class.csv  per-case absolute errors, one column per class
    histogram.csv        WH DSC decile counts before and after balancing
    timing.json          regressor vs RCA wall-clock (not deterministic)
    train_log.csv        per-epoch loss / validation MAE (wall_ms not deterministic)
    model.arch.json      checkpoint header
    model.params.raw     checkpoint parameters
"""

from __future__ import annotations

import csv
import json
import logging
import os
import platform
import statistics
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import CLASS_NAMES
from .config import ExperimentConfig
from .datagen import CaseRecord, read_manifest, write_manifest
from .errors import ConfigError, DataError
from .metrics import EvalReport, balanced_subsample, bin_edges, bin_scores, mae_report
from .nnet.model import RegressorModel, init_model, save_model
from .nnet.train import TrainLog, load_inputs, predict_batch, predict_case, train
from .rca import RCA_COLUMNS, ReferenceDB, build_reference_db, rca_label_dataset, rca_predict, rca_scores
from .volgrid import load_case

log = logging.getLogger(__name__)

RESULT_VERSION = 1
CHECKPOINT_NAME = "model"


@dataclass
class ExperimentResult:
    report: EvalReport
    case_ids: list[str]
    preds: np.ndarray           # (N, 5) on the test split
    truths: np.ndarray          # (N, 5) true DSC on the test split
    timing: dict
    config: dict
    checkpoint: str | None
    hist_dataset: np.ndarray    # WH decile counts of the balancing scores, before balancing
    hist_balanced: np.ndarray
    train_log: TrainLog = field(default_factory=TrainLog)
    split_sizes: tuple[int, int, int] = (0, 0, 0)

    @property
    def errors(self) -> np.ndarray:
        return np.abs(self.preds - self.truths)


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------

def subject_of(rec: CaseRecord) -> str:
    # every segmentation of one phantom shares its image
    return rec.image


def split_records(records: Sequence[CaseRecord], ratios, seed: int) -> tuple[list[int], list[int], list[int]]:
    """Split indices into train/val/test by subject so no image appears in two splits.

    Subjects are shuffled with ``seed`` and dealt out until each split's
    sample count reaches its share of the total.
    """
    if len(ratios) != 3 or abs(sum(ratios) - 1.0) > 1e-9 or min(ratios) < 0:
        raise ConfigError(f"split ratios must be three non-negatives summing to 1, got {ratios}")
    groups: dict[str, list[int]] = {}
    for i, rec in enumerate(records):
        groups.setdefault(subject_of(rec), []).append(i)
    keys = sorted(groups)
    order = np.random.default_rng(seed).permutation(len(keys))
    n = len(records)
    bounds = [ratios[0] * n, (ratios[0] + ratios[1]) * n]
    parts: list[list[int]] = [[], [], []]
    taken = 0
    for k in order:
        members = groups[keys[k]]
        # assign by the position of the group's midpoint in the cumulative count
        mid = taken + len(members) / 2.0
        part = 0 if mid < bounds[0] else (1 if mid < bounds[1] else 2)
        parts[part].extend(members)
        taken += len(members)
    return tuple(sorted(p) for p in parts)


def assert_isolation(records: Sequence[CaseRecord], train_idx, val_idx, test_idx) -> None:
    test_ids = {records[i].case_id for i in test_idx}
    test_subj = {subject_of(records[i]) for i in test_idx}
    for name, idx in (("train", train_idx), ("val", val_idx)):
        ids = {records[i].case_id for i in idx}
        subj = {subject_of(records[i]) for i in idx}
        if ids & test_ids or subj & test_subj:
            raise DataError(f"test split leaks into {name}: {sorted(ids & test_ids)[:5]}")


# ---------------------------------------------------------------------------
# RCA labelling, optionally across processes
# ---------------------------------------------------------------------------

def _rca_chunk(args):
    records, root, db = args
    return rca_label_dataset(records, root, db)


def rca_label_parallel(records: Sequence[CaseRecord], root, db: ReferenceDB, out_path=None,
                       jobs: int = 1) -> list[CaseRecord]:
    """rca_label_dataset split over ``jobs`` processes; output order matches input order."""
    records = list(records)
    if jobs <= 1 or len(records) < 2:
        out = rca_label_dataset(records, root, db)
    else:
        size = -(-len(records) // jobs)
        chunks = [(records[i:i + size], str(root), db) for i in range(0, len(records), size)]
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = [r for part in ex.map(_rca_chunk, chunks) for r in part]
    if out_path is not None:
        extra = [c for c in (out[0].extra if out else {}) if c not in RCA_COLUMNS] + RCA_COLUMNS
        write_manifest(out_path, out, extra)
    return out


def reference_db(cfg: ExperimentConfig) -> ReferenceDB:
    return build_reference_db(cfg.rca.k, cfg.rca.seed, tuple(cfg.gen.dims), tuple(cfg.rca.search_radius))


# ---------------------------------------------------------------------------
# timing
# ---------------------------------------------------------------------------

def machine_info() -> dict:
    return {"platform": platform.platform(), "processor": platform.processor() or platform.machine(),
            "cpu_count": os.cpu_count(), "python": platform.python_version()}


def benchmark_timing(model: RegressorModel, records: Sequence[CaseRecord], root, db: ReferenceDB,
                     n_cases: int, norm_mode: str = "per_volume") -> dict:
    """Median per-case wall clock of the regressor and of RCA on the same cases.

    Both timings cover loading the case from disk plus inference. The first
    case is a warm-up and is excluded from both medians.
    """
    if n_cases < 1:
        raise ConfigError("benchmark needs n_cases >= 1")
    records = list(records)[: n_cases + 1]
    if len(records) < 2:
        raise DataError("benchmark needs at least two cases (one is a warm-up)")
    root = Path(root)
    reg_ms, rca_ms = [], []
    for rec in records:
        _, ms = predict_case(model, root / rec.image, root / rec.seg, norm_mode)
        reg_ms.append(ms)
        t0 = time.perf_counter()
        image, seg = load_case(root / rec.image, root / rec.seg)
        rca_predict(image, seg, db)
        rca_ms.append((time.perf_counter() - t0) * 1000.0)
    reg = statistics.median(reg_ms[1:])
    rca = statistics.median(rca_ms[1:])
    return {"n_cases": len(records) - 1, "regressor_ms": reg, "rca_ms": rca,
            "ratio": rca / reg, "rca_k": len(db), "machine": machine_info()}


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

def _truths(records) -> np.ndarray:
    return np.array([tuple(r.dsc) for r in records], dtype=np.float64)


def _experiment_records(cfg: ExperimentConfig, manifest: Path, out_dir: Path | None, jobs: int,
                        progress) -> tuple[list[CaseRecord], np.ndarray]:
    """Records entering balancing and the WH scores they are balanced on."""
    records = read_manifest(manifest)
    if not records:
        raise DataError(f"{manifest}: manifest is empty")
    true_wh = _truths(records)[:, 4]
    if cfg.experiment.id == 1:
        return records, true_wh
    # experiment 2 starts from the experiment-1 balanced pool
    if cfg.experiment.rca_manifest:
        rca_path = Path(cfg.experiment.rca_manifest)
        pool = read_manifest(rca_path)
        rca_scores(pool)  # fail early when the columns are missing
    else:
        idx = balanced_subsample(true_wh, cfg.seeds.balance)
        pool = [records[i] for i in idx]
        db = reference_db(cfg)
        if progress:
            progress(f"RCA labelling {len(pool)} cases against {len(db)} references")
        out_path = out_dir / "rca_manifest.csv" if out_dir is not None else None
        pool = rca_label_parallel(pool, manifest.parent, db, out_path, jobs)
    return pool, rca_scores(pool)[:, 4]


def run_experiment(cfg: ExperimentConfig, out_dir=None, jobs: int = 1, progress=None,
                   timing: bool = True) -> ExperimentResult:
    """Run experiment ``cfg.experiment.id`` and, when ``out_dir`` is given, write its artifacts."""
    cfg.validate()
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    manifest = Path(cfg.experiment.manifest)
    root = manifest.parent
    pool, bal_wh = _experiment_records(cfg, manifest, out_dir, jobs, progress)

    hist_dataset = bin_scores(bal_wh).counts
    idx = balanced_subsample(bal_wh, cfg.seeds.balance)
    records = [pool[i] for i in idx]
    hist_balanced = bin_scores(bal_wh[idx]).counts
    tr, va, te = split_records(records, cfg.experiment.split, cfg.seeds.split)
    if not te or not tr or not va:
        raise DataError(f"empty split: train {len(tr)}, val {len(va)}, test {len(te)}")
    assert_isolation(records, tr, va, te)

    truths = _truths(records)
    if cfg.label_source() == "rca":
        labels = rca_scores(records)
    else:
        labels = truths
    test_records = [records[i] for i in te]
    model = init_model(cfg.arch, cfg.seeds.init)
    tlog = TrainLog()
    if cfg.experiment.inject_oracle:
        # harness self-test: the evaluation path sees perfect predictions
        preds = truths[te].copy()
    else:
        if progress:
            progress(f"loading {len(records)} cases (train {len(tr)}, val {len(va)}, test {len(te)})")
        dims = tuple(cfg.gen.dims)
        x = load_inputs(records, root, dims, cfg.experiment.norm_mode)
        model, tlog = train(model, x[tr], labels[tr], x[va], labels[va], cfg.train,
                            cfg.seeds.train, progress=_epoch_progress(progress))
        preds = predict_batch(model, x[te], cfg.train.chunk)

    report = mae_report(preds, truths[te], cfg.experiment.threshold)
    report.notes = {"experiment": cfg.experiment.id, "label_source": cfg.label_source(),
                    "inject_oracle": cfg.experiment.inject_oracle,
                    "n_pool": len(pool), "n_balanced": len(records),
                    "n_train": len(tr), "n_val": len(va), "n_test": len(te),
                    "best_epoch": tlog.best_epoch}
    # descriptive WH error percentiles (small errors vs outliers), not a gate
    wh_err = np.abs(np.asarray(preds, float)[:, 4] - truths[te][:, 4])
    report.notes["wh_frac_err_lt_0.05"] = float(np.mean(wh_err < 0.05))
    report.notes["wh_frac_err_ge_0.12"] = float(np.mean(wh_err >= 0.12))

    timing_summary = {}
    if timing and cfg.experiment.timing_cases > 0:
        n = min(cfg.experiment.timing_cases, len(test_records) - 1)
        if n >= 1:
            if progress:
                progress(f"timing regressor vs RCA on {n} test cases")
            timing_summary = benchmark_timing(model, test_records, root, reference_db(cfg), n,
                                              cfg.experiment.norm_mode)

    result = ExperimentResult(report, [r.case_id for r in test_records], np.asarray(preds, float),
                              truths[te], timing_summary, cfg.to_dict(), None,
                              hist_dataset, hist_balanced, tlog, (len(tr), len(va), len(te)))
    if out_dir is not None:
        ckpt = out_dir / CHECKPOINT_NAME
        save_model(ckpt, model)
        result.checkpoint = str(ckpt)
        write_result(result, out_dir)
    return result


def run_experiment1(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    if cfg.experiment.id != 1:
        raise ConfigError("run_experiment1 needs experiment.id == 1")
    return run_experiment(cfg, out_dir, **kw)


def run_experiment2(cfg: ExperimentConfig, out_dir=None, **kw) -> ExperimentResult:
    if cfg.experiment.id != 2:
        raise ConfigError("run_experiment2 needs experiment.id == 2")
    return run_experiment(cfg, out_dir, **kw)


def _epoch_progress(progress):
    if progress is None:
        return None
    return lambda row: progress(f"epoch {row['epoch']}  loss {float(row['train_loss']):.5f}  "
                                f"val WH MAE {float(row['val_mae_wh']):.4f}")


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

def write_result(result: ExperimentResult, out_dir) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.json").write_text(json.dumps(result.config, indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    (out_dir / "report.json").write_text(result.report.to_json(), encoding="utf-8")
    (out_dir / "report.csv").write_text(result.report.to_csv(), encoding="utf-8")
    write_predictions(out_dir / "predictions.csv", result.case_ids, result.preds, result.truths)
    (out_dir / "timing.json").write_text(
        json.dumps({"version": RESULT_VERSION, **result.timing}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    result.train_log.write_csv(out_dir / "train_log.csv")
    emit_figures(result, out_dir)


def write_predictions(path, case_ids, preds, truths) -> None:
    cols = ["case_id"] + [f"pred_{c}" for c in CLASS_NAMES] + [f"true_{c}" for c in CLASS_NAMES]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(cols)
        for cid, p, t in zip(case_ids, preds, truths):
            w.writerow([cid] + [repr(float(v)) for v in p] + [repr(float(v)) for v in t])


def read_predictions(path) -> tuple[list[str], np.ndarray, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    ids = [r["case_id"] for r in rows]
    preds = np.array([[float(r[f"pred_{c}"]) for c in CLASS_NAMES] for r in rows]).reshape(-1, 5)
    truths = np.array([[float(r[f"true_{c}"]) for c in CLASS_NAMES] for r in rows]).reshape(-1, 5)
    return ids, preds, truths


def emit_figures(result: ExperimentResult, out_dir) -> None:
    """Box-plot data (per-case absolute error per class) and the decile histogram."""
    if len(result.case_ids) == 0:
        raise DataError("cannot emit figures for an empty test split")
    out_dir = Path(out_dir)
    with open(out_dir / "errors_by_class.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["case_id", *CLASS_NAMES])
        for cid, e in zip(result.case_ids, result.errors):
            w.writerow([cid] + [repr(float(v)) for v in e])
    edges = bin_edges()
    with open(out_dir / "histogram.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["bin", "lo", "hi", "dataset", "balanced"])
        for b in range(10):
            w.writerow([b, repr(float(edges[b])), repr(float(edges[b + 1])),
                        int(result.hist_dataset[b]), int(result.hist_balanced[b])])
