"""Reverse classification accuracy: GT-free quality estimates from a reference database.

The test image/segmentation pair acts as a single atlas. For every reference
case the test image is rigidly aligned (integer translation maximizing NCC)
to the reference image, the test segmentation is carried along, and the
result is scored against the reference GT. The best score per class is the
quality prediction.
"""

from __future__ import annotations

import itertools
import logging
import time
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .datagen import CaseRecord, case_seed, generate_phantom, random_phantom_spec, write_manifest
from .errors import ConfigError, DataError
from .metrics import QualityScore, dice_all
from .volgrid import LabelMap, Volume, load_case, normalize_intensity, resample, translate_labels

log = logging.getLogger(__name__)

RCA_COLUMNS = ["rca_bg", "rca_lvc", "rca_lvm", "rca_rvc", "rca_wh", "rca_ms"]
TIE_TOL = 1e-9
DEFAULT_RADIUS = (4, 4, 1)


def _radius3(search_radius) -> tuple[int, int, int]:
    r = (search_radius,) * 3 if np.isscalar(search_radius) else tuple(search_radius)
    r = tuple(int(v) for v in r)
    if len(r) != 3 or min(r) < 0:
        raise ConfigError(f"search_radius must be >= 0, got {search_radius}")
    return r


def candidate_shifts(dims, search_radius) -> list[tuple[int, int, int]]:
    """Shifts in the search box ordered by L1 norm, then lexicographically.

    Shifts that leave no overlap are excluded. Taking the first maximum in
    this order implements the tie-break rule.
    """
    r = _radius3(search_radius)
    ranges = [range(-min(ri, n - 1), min(ri, n - 1) + 1) for ri, n in zip(r, dims)]
    shifts = list(itertools.product(*ranges))
    return sorted(shifts, key=lambda s: (sum(abs(v) for v in s), s))


class _Spectra:
    """Zero-padded FFT of an image plus its overlap sums for each candidate shift.

    ``role`` says which side of the correlation the image sits on: the sums
    of a moving image over the overlap use the fixed grid's support and vice
    versa. Both grids share dims, so the support spectrum is the same.
    """

    def __init__(self, a: np.ndarray, pad_shape, shifts, role: str):
        self.pad_shape = pad_shape
        ones = np.ones_like(a)
        one_hat = np.fft.rfftn(ones, pad_shape, axes=(0, 1, 2))
        self.hat = np.fft.rfftn(a, pad_shape, axes=(0, 1, 2))
        a2_hat = np.fft.rfftn(a * a, pad_shape, axes=(0, 1, 2))
        idx = _shift_index(shifts, pad_shape)
        if role == "moving":
            self.s1 = _corr(one_hat, self.hat, pad_shape)[idx]
            self.s2 = _corr(one_hat, a2_hat, pad_shape)[idx]
        else:
            self.s1 = _corr(self.hat, one_hat, pad_shape)[idx]
            self.s2 = _corr(a2_hat, one_hat, pad_shape)[idx]


def _shift_index(shifts, pad_shape):
    return tuple(np.array([s[a] for s in shifts]) % pad_shape[a] for a in range(3))


def _corr(fixed_hat, moving_hat, pad_shape) -> np.ndarray:
    # c[d] = sum_x f(x) m(x - d), circular over a padding wide enough to avoid wrap
    return np.fft.irfftn(fixed_hat * np.conj(moving_hat), pad_shape, axes=(0, 1, 2))


def _pad_shape(dims, r) -> tuple[int, ...]:
    return tuple(int(n + ri) for n, ri in zip(dims, r))


def _overlap_counts(dims, shifts) -> np.ndarray:
    return np.prod([[d - abs(s[a]) for a, d in enumerate(dims)] for s in shifts], axis=1).astype(float)


def _ncc(ms: _Spectra, fs: _Spectra, shifts, n: np.ndarray) -> np.ndarray:
    s_mf = _corr(fs.hat, ms.hat, ms.pad_shape)[_shift_index(shifts, ms.pad_shape)]
    cov = s_mf - ms.s1 * fs.s1 / n
    var_m = ms.s2 - ms.s1 ** 2 / n
    var_f = fs.s2 - fs.s1 ** 2 / n
    # guard against round-off in sum-of-squares variances
    floor = 1e-10 * n
    ok = (var_m > floor) & (var_f > floor)
    out = np.zeros(len(shifts))
    out[ok] = cov[ok] / np.sqrt(var_m[ok] * var_f[ok])
    return out


def ncc_map(moving: np.ndarray, fixed: np.ndarray, shifts) -> np.ndarray:
    """NCC over the overlap region for each shift ``d`` (moving displaced by ``d``).

    Zero-variance overlaps score 0 so constant images tie everywhere.
    """
    dims = moving.shape
    r = tuple(max(abs(s[a]) for s in shifts) for a in range(3))
    pad_shape = _pad_shape(dims, r)
    ms = _Spectra(moving, pad_shape, shifts, "moving")
    fs = _Spectra(fixed, pad_shape, shifts, "fixed")
    return _ncc(ms, fs, shifts, _overlap_counts(dims, shifts))


def best_shift(scores: np.ndarray, shifts) -> tuple[int, int, int]:
    """First shift (in tie-break order) whose score is within TIE_TOL of the best."""
    top = scores.max()
    k = int(np.flatnonzero(scores >= top - TIE_TOL)[0])
    return tuple(int(v) for v in shifts[k])


def register_translate(moving: Volume, fixed: Volume, search_radius=DEFAULT_RADIUS) -> tuple[int, int, int]:
    """Integer shift of ``moving`` within the search box that maximizes NCC with ``fixed``.

    A scalar radius applies to every axis. Ties go to the smallest L1 shift,
    then lexicographic order.
    """
    r = _radius3(search_radius)
    if moving.dims != fixed.dims:
        raise DataError(f"registration needs equal dims: {moving.dims} vs {fixed.dims}")
    m = normalize_intensity(moving).voxels
    f = normalize_intensity(fixed).voxels
    shifts = candidate_shifts(moving.dims, r)
    return best_shift(ncc_map(m, f, shifts), shifts)


def propagate_labels(atlas_labels: LabelMap, shift) -> LabelMap:
    return LabelMap(translate_labels(atlas_labels.classes, shift), atlas_labels.spacing)


# ---------------------------------------------------------------------------
# reference database
# ---------------------------------------------------------------------------

class ReferenceDB:
    """K reference (image, GT) pairs on the working grid, with cached spectra."""

    def __init__(self, entries: Sequence[tuple[Volume, LabelMap]], dims=None,
                 search_radius=DEFAULT_RADIUS):
        if len(entries) < 1:
            raise DataError("reference database is empty")
        self.radius = _radius3(search_radius)
        dims = tuple(dims) if dims is not None else entries[0][0].dims
        self.dims = dims
        self.images, self.labels = [], []
        for img, gt in entries:
            if img.dims != dims:
                img = resample(img, dims, "linear")
            if gt.dims != dims:
                gt = resample(gt, dims, "nearest")
            self.images.append(normalize_intensity(img))
            self.labels.append(gt)
        self.shifts = candidate_shifts(dims, self.radius)
        self.pad_shape = _pad_shape(dims, self.radius)
        self.overlap = _overlap_counts(dims, self.shifts)
        self._spectra = [_Spectra(v.voxels, self.pad_shape, self.shifts, "fixed") for v in self.images]

    def __len__(self) -> int:
        return len(self.images)

    def subset(self, order: Sequence[int]) -> "ReferenceDB":
        return ReferenceDB([(self.images[k], self.labels[k]) for k in order], self.dims, self.radius)


def build_reference_db(k: int, seed: int = 1000, dims=(32, 32, 8),
                       search_radius=DEFAULT_RADIUS) -> ReferenceDB:
    """Phantom reference set drawn from a seed stream disjoint from dataset seeds."""
    if k < 1:
        raise ConfigError("reference database needs k >= 1")
    entries = [generate_phantom(random_phantom_spec(case_seed(seed, 10**6 + i), dims)) for i in range(k)]
    return ReferenceDB(entries, dims, search_radius)


@dataclass
class RcaPrediction:
    score: QualityScore
    table: np.ndarray        # (K, 5) per-reference DSC
    argmax: tuple[int, ...]  # best reference per class
    shifts: list


def rca_predict(test_img: Volume, test_seg: LabelMap, db: ReferenceDB) -> RcaPrediction:
    if len(db) == 0:
        raise DataError("reference database is empty")
    if test_img.dims != db.dims:
        test_img = resample(test_img, db.dims, "linear")
        test_seg = resample(test_seg, db.dims, "nearest")
    m = normalize_intensity(test_img).voxels
    ms = _Spectra(m, db.pad_shape, db.shifts, "moving")
    table = np.empty((len(db), 5))
    shifts = []
    for k in range(len(db)):
        scores = _ncc(ms, db._spectra[k], db.shifts, db.overlap)
        shift = best_shift(scores, db.shifts)
        table[k] = dice_all(propagate_labels(test_seg, shift), db.labels[k])
        shifts.append(shift)
    best = table.max(axis=0)
    return RcaPrediction(QualityScore(*(float(v) for v in best)), table,
                         tuple(int(i) for i in table.argmax(axis=0)), shifts)


def rca_label_dataset(records: Sequence[CaseRecord], root, db: ReferenceDB,
                      out_path=None) -> list[CaseRecord]:
    """Attach RCA scores and per-case wall-clock (load + predict) to every record."""
    root = Path(root)
    out = []
    for rec in records:
        t0 = time.perf_counter()
        try:
            image, seg = load_case(root / rec.image, root / rec.seg)
        except FileNotFoundError as e:
            raise DataError(f"case {rec.case_id}: missing file {e.filename}") from e
        pred = rca_predict(image, seg, db)
        ms = (time.perf_counter() - t0) * 1000.0
        extra = dict(rec.extra)
        extra.update({c: repr(float(v)) for c, v in zip(RCA_COLUMNS, pred.score)})
        extra["rca_ms"] = f"{ms:.3f}"
        out.append(CaseRecord(rec.case_id, rec.image, rec.seg, rec.gt, rec.dsc,
                              rec.severity, rec.seed, extra))
    if out_path is not None:
        extra_cols = [c for c in out[0].extra if c not in RCA_COLUMNS] + RCA_COLUMNS if out else RCA_COLUMNS
        write_manifest(out_path, out, extra_cols)
    return out


def rca_scores(records: Sequence[CaseRecord]) -> np.ndarray:
    """(N, 5) array of the rca_* columns."""
    try:
        return np.array([[float(r.extra[c]) for c in RCA_COLUMNS[:5]] for r in records])
    except KeyError as e:
        raise DataError(f"manifest has no RCA column {e}") from e
