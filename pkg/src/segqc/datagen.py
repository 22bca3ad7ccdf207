"""Synthetic cardiac phantoms and a parametric segmentation corruptor.

Phantoms are a 2D short-axis cross-section (LV cavity disk, myocardial
annulus, RV crescent) extruded along z with a small per-slice jitter.
Corrupted copies of the ground-truth labels stand in for the output of a
real segmenter and span the whole DSC range.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import ConfigError, DataError
from .metrics import N_BINS, QualityScore, bin_scores, dice_all
from .volgrid import (BG, LVC, LVM, RVC, LabelMap, Volume, check_labels, save_case, save_labels,
                      translate_labels)

log = logging.getLogger(__name__)

MANIFEST_COLUMNS = ["case_id", "image", "seg", "gt", "dsc_bg", "dsc_lvc", "dsc_lvm",
                    "dsc_rvc", "dsc_wh", "severity", "seed"]
DSC_COLUMNS = MANIFEST_COLUMNS[4:9]

# severity 0 is the untouched GT; each further rung corrupts harder
DEFAULT_LADDER = (0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0)

_SIX = ndimage.generate_binary_structure(3, 1)


# ---------------------------------------------------------------------------
# phantoms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PhantomSpec:
    dims: tuple[int, int, int] = (32, 32, 8)
    centre: tuple[float, float] = (16.0, 16.0)   # LV centre (x, y), voxels
    lv_radius: float = 4.5
    myo_thickness: float = 2.0
    rv_offset: float = 6.0                         # LV centre -> RV centre distance
    rv_angle: float = math.pi                      # direction of the RV, radians
    rv_radius: float = 5.5
    intensities: tuple[float, float, float, float] = (0.2, 0.85, 0.4, 0.7)  # BG, LVC, LVM, RVC
    noise_sigma: float = 0.05
    slice_jitter: float = 0.3                      # per-slice centre jitter amplitude, voxels
    spacing: tuple[float, float, float] = (1.8, 1.8, 10.0)
    seed: int = 0

    def validate(self) -> "PhantomSpec":
        if min(self.lv_radius, self.rv_radius, self.rv_offset) <= 0:
            raise ConfigError("phantom radii and RV offset must be positive")
        if self.myo_thickness < 1:
            raise ConfigError("myocardium must be at least one voxel thick")
        if self.noise_sigma < 0 or self.slice_jitter < 0:
            raise ConfigError("noise sigma and slice jitter must be non-negative")
        return self


def random_phantom_spec(seed: int, dims=(32, 32, 8), base: PhantomSpec | None = None) -> PhantomSpec:
    """Draw anatomical variation (position, radii, RV placement) around ``base``."""
    base = base or PhantomSpec(dims=tuple(dims))
    rng = np.random.default_rng([seed, 0xFA17])
    nx, ny, _ = dims
    lv_radius = base.lv_radius * rng.uniform(0.85, 1.15)
    myo = base.myo_thickness * rng.uniform(0.85, 1.2)
    rv_offset = base.rv_offset * rng.uniform(0.9, 1.1)
    rv_angle = base.rv_angle + rng.uniform(-0.35, 0.35)
    rv_radius = base.rv_radius * rng.uniform(0.85, 1.15)
    # place the heart's bounding extent (not the LV) around the grid centre
    mid = (rv_offset + rv_radius - lv_radius - myo) / 2
    cx = nx / 2 - mid * math.cos(rv_angle) + rng.uniform(-2.0, 2.0)
    cy = ny / 2 - mid * math.sin(rv_angle) + rng.uniform(-2.0, 2.0)
    return replace(base, dims=tuple(dims), centre=(cx, cy), lv_radius=lv_radius,
                   myo_thickness=myo, rv_offset=rv_offset, rv_angle=rv_angle,
                   rv_radius=rv_radius, seed=int(seed))


def phantom_labels(spec: PhantomSpec) -> np.ndarray:
    spec.validate()
    nx, ny, nz = spec.dims
    rng = np.random.default_rng([spec.seed, 1])
    gx, gy = np.meshgrid(np.arange(nx), np.arange(ny), indexing="ij")
    labels = np.zeros(spec.dims, dtype=np.uint8)
    outer = spec.lv_radius + spec.myo_thickness
    for z in range(nz):
        cx, cy = np.asarray(spec.centre) + rng.uniform(-1, 1, size=2) * spec.slice_jitter
        d_lv = np.hypot(gx - cx, gy - cy)
        rx = cx + spec.rv_offset * math.cos(spec.rv_angle)
        ry = cy + spec.rv_offset * math.sin(spec.rv_angle)
        d_rv = np.hypot(gx - rx, gy - ry)
        sl = np.zeros((nx, ny), dtype=np.uint8)
        sl[(d_rv <= spec.rv_radius) & (d_lv > outer)] = RVC
        sl[(d_lv > spec.lv_radius) & (d_lv <= outer)] = LVM
        sl[d_lv <= spec.lv_radius] = LVC
        labels[:, :, z] = sl
    fg = labels != BG
    if fg[0].any() or fg[-1].any() or fg[:, 0].any() or fg[:, -1].any():
        raise DataError(f"phantom geometry exceeds the {nx}x{ny} grid")
    return labels


def generate_phantom(spec: PhantomSpec) -> tuple[Volume, LabelMap]:
    """Labels plus a piecewise-constant image with additive Gaussian noise."""
    labels = phantom_labels(spec)
    present = set(np.unique(labels).tolist())
    if present != {BG, LVC, LVM, RVC}:
        raise DataError(f"phantom is missing classes: {sorted({0, 1, 2, 3} - present)}")
    means = np.asarray(spec.intensities, dtype=np.float64)
    image = means[labels]
    if spec.noise_sigma > 0:
        rng = np.random.default_rng([spec.seed, 2])
        image = image + rng.normal(0.0, spec.noise_sigma, size=image.shape)
    return Volume(image.astype(np.float32), spec.spacing), LabelMap(labels, spec.spacing)


# ---------------------------------------------------------------------------
# corruption
# ---------------------------------------------------------------------------

OPERATORS = {
    # name: (parameter names, validator)
    "erode": (("r",), lambda r: isinstance(r, int) and 0 <= r <= 8),
    "dilate": (("r",), lambda r: isinstance(r, int) and 0 <= r <= 8),
    "translate": (("dx", "dy", "dz"), lambda *d: all(isinstance(v, int) and abs(v) <= 64 for v in d)),
    "drop_class": (("c", "fraction"), lambda c, f: c in (LVC, LVM, RVC) and 0.0 <= f <= 1.0),
    "boundary_noise": (("p",), lambda p: 0.0 <= p <= 1.0),
    "swap_region": (("fraction",), lambda f: 0.0 <= f <= 1.0),
}


@dataclass(frozen=True)
class CorruptionSpec:
    """An ordered list of ``(operator_name, params_tuple)`` applied at ``severity > 0``."""

    severity: float = 0.0
    operators: tuple = ()
    seed: int = 0

    def validate(self) -> "CorruptionSpec":
        if self.severity < 0:
            raise ConfigError(f"severity must be >= 0, got {self.severity}")
        for op in self.operators:
            name, params = op[0], tuple(op[1])
            if name not in OPERATORS:
                raise ConfigError(f"unknown corruption operator {name!r}")
            names, ok = OPERATORS[name]
            if len(params) != len(names) or not ok(*params):
                raise ConfigError(f"{name}{params}: parameters out of bounds ({', '.join(names)})")
        return self

    @classmethod
    def from_severity(cls, severity: float, seed: int) -> "CorruptionSpec":
        """Draw the operator list for one rung of the severity ladder.

        Magnitudes are randomized per case but their expected damage grows
        with severity, so mean WH DSC falls monotonically along the ladder.
        """
        s = float(severity)
        if s <= 0:
            return cls(0.0, (), seed)
        rng = np.random.default_rng([seed, 7])
        ops = []
        # geometric misplacement: the main driver of low WH DSC
        mag = 1.6 * s * rng.uniform(0.4, 1.3)
        ang = rng.uniform(0, 2 * math.pi)
        dx, dy = int(round(mag * math.cos(ang))), int(round(mag * math.sin(ang)))
        if dx or dy:
            ops.append(("translate", (dx, dy, 0)))
        r = int(rng.integers(0, 1 + int(s // 3)))
        if r:
            ops.append(("erode" if rng.random() < 0.5 else "dilate", (r,)))
        if rng.random() < s / 12:
            ops.append(("drop_class", (int(rng.integers(1, 4)), float(rng.uniform(0.2, 1.0)))))
        if rng.random() < 0.6:
            ops.append(("boundary_noise", (float(min(1.0, rng.uniform(0, 0.08 * s))),)))
        if rng.random() < s / 10:
            ops.append(("swap_region", (float(rng.uniform(0, min(1.0, s / 10))),)))
        return cls(s, tuple(ops), seed)


def _planar_cut(mask: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """The ``fraction`` of ``mask`` voxels lying furthest along a random direction."""
    idx = np.argwhere(mask)
    out = np.zeros_like(mask)
    if len(idx) == 0 or fraction <= 0:
        return out
    v = rng.normal(size=3)
    v[2] *= 0.25  # cuts mostly across the short axis
    proj = idx @ v
    n = int(round(fraction * len(idx)))
    if n == 0:
        return out
    take = idx[np.argsort(-proj, kind="stable")[:n]]
    out[tuple(take.T)] = True
    return out


def _erode(a: np.ndarray, r: int) -> np.ndarray:
    fg = a != BG
    kept = ndimage.binary_erosion(fg, _SIX, iterations=r, border_value=1)
    return np.where(kept, a, BG).astype(a.dtype)


def _dilate(a: np.ndarray, r: int) -> np.ndarray:
    fg = a != BG
    if not fg.any():
        return a.copy()
    grown = ndimage.binary_dilation(fg, _SIX, iterations=r)
    # new voxels take the class of the nearest original foreground voxel
    _, inds = ndimage.distance_transform_edt(~fg, return_indices=True)
    nearest = a[tuple(inds)]
    return np.where(grown, np.where(fg, a, nearest), BG).astype(a.dtype)


def _boundary_noise(a: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    pad = np.pad(a, 1, mode="edge")
    nx, ny, nz = a.shape
    neigh = np.stack([
        pad[2:, 1:-1, 1:-1], pad[:-2, 1:-1, 1:-1],
        pad[1:-1, 2:, 1:-1], pad[1:-1, :-2, 1:-1],
        pad[1:-1, 1:-1, 2:], pad[1:-1, 1:-1, :-2],
    ])
    boundary = (neigh != a).any(axis=0)
    flip = boundary & (rng.random(a.shape) < p)
    pick = rng.integers(0, 6, size=a.shape)
    replacement = np.take_along_axis(neigh, pick[None], axis=0)[0]
    return np.where(flip, replacement, a).astype(a.dtype)


def _swap_region(a: np.ndarray, fraction: float, rng: np.random.Generator) -> np.ndarray:
    region = _planar_cut(a != BG, fraction, rng)
    # cyclic relabelling of the foreground classes keeps the WH union intact
    perm = np.array([BG, LVC, LVM, RVC], dtype=a.dtype)
    if rng.random() < 0.5:
        perm[1:] = [LVM, RVC, LVC]
    else:
        perm[1:] = [RVC, LVC, LVM]
    return np.where(region, perm[a], a).astype(a.dtype)


def corrupt(labels: LabelMap, spec: CorruptionSpec) -> LabelMap:
    """Apply the corruption operators in order; severity 0 returns an exact copy."""
    spec.validate()
    check_labels(labels.classes)
    a = labels.classes.astype(np.uint8).copy()
    if spec.severity == 0:
        return LabelMap(a, labels.spacing)
    rng = np.random.default_rng([spec.seed, 11])
    for name, params in spec.operators:
        if name == "erode":
            a = _erode(a, *params)
        elif name == "dilate":
            a = _dilate(a, *params)
        elif name == "translate":
            a = translate_labels(a, params)
        elif name == "drop_class":
            c, fraction = params
            a = np.where(_planar_cut(a == c, fraction, rng), BG, a).astype(np.uint8)
        elif name == "boundary_noise":
            a = _boundary_noise(a, params[0], rng)
        elif name == "swap_region":
            a = _swap_region(a, params[0], rng)
    return LabelMap(a, labels.spacing)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class CaseRecord:
    case_id: str
    image: str
    seg: str
    gt: str
    dsc: QualityScore
    severity: float
    seed: int
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        out = {"case_id": self.case_id, "image": self.image, "seg": self.seg, "gt": self.gt}
        out.update({c: repr(float(v)) for c, v in zip(DSC_COLUMNS, self.dsc)})
        out["severity"] = repr(float(self.severity))
        out["seed"] = str(self.seed)
        out.update(self.extra)
        return out


def case_seed(seed: int, phantom: int) -> int:
    """Independent per-phantom stream so serial and parallel runs agree."""
    return int(np.random.SeedSequence([seed, phantom]).generate_state(1)[0])


def build_dataset(out_dir, n_cases: int, severity_ladder: Sequence[float] = DEFAULT_LADDER,
                  seed: int = 0, dims=(32, 32, 8), require_coverage: bool = True,
                  max_attempts: int = 3) -> Path:
    """Write ``n_cases`` phantoms x every ladder rung to ``out_dir`` plus ``manifest.csv``.

    GT and image are written once per phantom; each rung adds a corrupted
    segmentation. If some WH DSC decile ends up empty the dataset is rebuilt
    with more phantoms (``require_coverage=True``, up to ``max_attempts``)
    and otherwise a DataError is raised.
    """
    if n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    out_dir = Path(out_dir)
    n = n_cases
    for attempt in range(max_attempts):
        records = _write_cases(out_dir, n, severity_ladder, seed, dims)
        hist = bin_scores([r.dsc.wh for r in records])
        empty = [int(b) for b in np.flatnonzero(hist.counts == 0)]
        if not empty:
            break
        if not require_coverage:
            raise DataError(f"generated DSC distribution leaves bins {empty} empty")
        log.warning("bins %s empty with %d phantoms; regenerating with more", empty, n)
        n *= 2
    else:
        raise DataError(f"bins {empty} still empty after {max_attempts} attempts")
    manifest = out_dir / "manifest.csv"
    write_manifest(manifest, records)
    return manifest


def _write_cases(out_dir: Path, n: int, ladder, seed: int, dims) -> list[CaseRecord]:
    records = []
    for p in range(n):
        pseed = case_seed(seed, p)
        spec = random_phantom_spec(pseed, dims)
        image, gt = generate_phantom(spec)
        img_rel, gt_rel = f"cases/p{p:05d}_img", f"cases/p{p:05d}_gt"
        save_case(out_dir / img_rel, out_dir / gt_rel, image, gt)
        for k, sev in enumerate(ladder):
            cspec = CorruptionSpec.from_severity(sev, case_seed(pseed, k))
            seg = corrupt(gt, cspec)
            seg_rel = f"cases/p{p:05d}_s{k:02d}_seg"
            save_labels(out_dir / seg_rel, seg)
            records.append(CaseRecord(f"p{p:05d}_s{k:02d}", img_rel, seg_rel, gt_rel,
                                      dice_all(seg, gt), float(sev), cspec.seed))
    return records


def write_manifest(path, records: Sequence[CaseRecord], extra_columns: Sequence[str] = ()) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=MANIFEST_COLUMNS + list(extra_columns), lineterminator="\n")
        w.writeheader()
        for r in records:
            w.writerow(r.row())


def read_manifest(path) -> list[CaseRecord]:
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = set(MANIFEST_COLUMNS) - set(reader.fieldnames or [])
        if missing:
            raise DataError(f"{path}: manifest lacks columns {sorted(missing)}")
        out = []
        for row in reader:
            extra = {k: v for k, v in row.items() if k not in MANIFEST_COLUMNS}
            out.append(CaseRecord(
                row["case_id"], row["image"], row["seg"], row["gt"],
                QualityScore(*(float(row[c]) for c in DSC_COLUMNS)),
                float(row["severity"]), int(row["seed"]), extra))
    return out
