"""Overlap metrics, DSC histogram binning/balancing and evaluation statistics."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import CLASS_NAMES
from .errors import BalanceError, DataError, ShapeMismatchError
from .volgrid import LabelMap

N_BINS = 10
BANDS = ("all", "poor", "good")  # poor: true DSC < 0.5, good: true DSC >= 0.5
REPORT_VERSION = 1


class QualityScore(NamedTuple):
    """Per-class DSC: background, LV cavity, LV myocardium, RV cavity, whole heart."""

    bg: float
    lvc: float
    lvm: float
    rvc: float
    wh: float


def dice(a: np.ndarray, b: np.ndarray) -> float:
    """Dice overlap of two binary masks; two empty masks agree perfectly (1.0)."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ShapeMismatchError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(np.count_nonzero(a)) + int(np.count_nonzero(b))
    if total == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / total


def dice_all(pred: LabelMap | np.ndarray, gt: LabelMap | np.ndarray) -> QualityScore:
    p = pred.classes if isinstance(pred, LabelMap) else np.asarray(pred)
    g = gt.classes if isinstance(gt, LabelMap) else np.asarray(gt)
    if p.shape != g.shape:
        raise ShapeMismatchError(f"labelmap dims differ: {p.shape} vs {g.shape}")
    per_class = [dice(p == c, g == c) for c in range(4)]
    return QualityScore(*per_class, dice(p != 0, g != 0))


# ---------------------------------------------------------------------------
# binning and balancing
# ---------------------------------------------------------------------------

@dataclass
class BinnedHistogram:
    edges: np.ndarray
    counts: np.ndarray
    membership: np.ndarray


def bin_edges() -> np.ndarray:
    return np.arange(N_BINS + 1) / N_BINS


def bin_index(scores) -> np.ndarray:
    s = np.asarray(scores, dtype=np.float64)
    bad = ~((s >= 0.0) & (s <= 1.0))
    if bad.any():
        raise DataError(f"scores outside [0, 1]: {s[bad][:5].tolist()}")
    # compare against the decimal edges i/10 rather than flooring 10*s
    idx = np.searchsorted(bin_edges(), s, side="right") - 1
    return np.minimum(idx, N_BINS - 1)


def bin_scores(scores: Sequence[float]) -> BinnedHistogram:
    """Histogram into 10 equal bins over [0, 1]; the last bin is closed."""
    membership = bin_index(scores)
    counts = np.bincount(membership, minlength=N_BINS)
    return BinnedHistogram(bin_edges(), counts, membership)


def balanced_subsample(scores: Sequence[float], seed: int) -> np.ndarray:
    """Draw the same number of samples (the smallest bin count) from every bin.

    Returns sorted indices into ``scores``.
    """
    hist = bin_scores(scores)
    empty = [int(i) for i in np.flatnonzero(hist.counts == 0)]
    if empty:
        raise BalanceError(empty)
    n = int(hist.counts.min())
    rng = np.random.default_rng(seed)
    chosen = []
    for b in range(N_BINS):
        members = np.flatnonzero(hist.membership == b)
        chosen.append(rng.choice(members, size=n, replace=False))
    return np.sort(np.concatenate(chosen))


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class ClassificationStats:
    threshold: float
    tp: int
    fp: int
    tn: int
    fn: int
    tpr: float
    fpr: float
    accuracy: float


def classification_stats(pred_wh, true_wh, threshold: float = 0.7) -> ClassificationStats:
    """Good-vs-poor classification where positive means DSC >= threshold.

    TPR/FPR are 0 when their denominator is empty.
    """
    p = np.asarray(pred_wh, dtype=np.float64)
    t = np.asarray(true_wh, dtype=np.float64)
    if p.shape != t.shape:
        raise ShapeMismatchError(f"length mismatch: {p.shape} vs {t.shape}")
    pred_pos = p >= threshold
    true_pos = t >= threshold
    tp = int(np.sum(pred_pos & true_pos))
    fp = int(np.sum(pred_pos & ~true_pos))
    tn = int(np.sum(~pred_pos & ~true_pos))
    fn = int(np.sum(~pred_pos & true_pos))
    total = tp + fp + tn + fn
    return ClassificationStats(
        threshold=float(threshold), tp=tp, fp=fp, tn=tn, fn=fn,
        tpr=tp / (tp + fn) if tp + fn else 0.0,
        fpr=fp / (fp + tn) if fp + tn else 0.0,
        accuracy=(tp + tn) / total if total else 0.0,
    )


@dataclass
class BandStats:
    n: int
    mae: float | None
    sd: float | None


@dataclass
class EvalReport:
    """Per-class MAE/SD over the full range and the two true-quality bands."""

    classes: dict[str, dict[str, BandStats]]
    classification: ClassificationStats
    sd_kind: str = "population"
    version: int = REPORT_VERSION
    notes: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "sd_kind": self.sd_kind,
            "classes": {c: {b: asdict(s) for b, s in bands.items()}
                        for c, bands in self.classes.items()},
            "classification": asdict(self.classification),
            "notes": self.notes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            classes={c: {b: BandStats(**s) for b, s in bands.items()}
                     for c, bands in d["classes"].items()},
            classification=ClassificationStats(**d["classification"]),
            sd_kind=d["sd_kind"], version=d["version"], notes=d.get("notes", {}),
        )

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["class", "band", "n", "mae", "sd"])
        for c, bands in self.classes.items():
            for b in BANDS:
                s = bands[b]
                w.writerow([c, b, s.n, _fmt(s.mae), _fmt(s.sd)])
        return buf.getvalue()


def _fmt(x: float | None) -> str:
    return "" if x is None else repr(x)


def _band(err: np.ndarray) -> BandStats:
    if err.size == 0:
        return BandStats(0, None, None)
    return BandStats(int(err.size), float(err.mean()), float(err.std()))


def mae_report(preds, truths, threshold: float = 0.7) -> EvalReport:
    """MAE and population SD of |pred - truth| per class, split by the true DSC at 0.5."""
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 5) if len(preds) else np.empty((0, 5))
    t = np.asarray(truths, dtype=np.float64).reshape(-1, 5) if len(truths) else np.empty((0, 5))
    if p.shape != t.shape:
        raise ShapeMismatchError(f"preds {p.shape} vs truths {t.shape}")
    if p.shape[0] == 0:
        raise DataError("mae_report needs at least one sample")
    err = np.abs(p - t)
    classes = {}
    for j, name in enumerate(CLASS_NAMES):
        good = t[:, j] >= 0.5
        classes[name] = {
            "all": _band(err[:, j]),
            "poor": _band(err[~good, j]),
            "good": _band(err[good, j]),
        }
    stats = classification_stats(p[:, 4], t[:, 4], threshold)
    return EvalReport(classes=classes, classification=stats)
