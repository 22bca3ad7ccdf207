"""3D image volumes, labelmaps, one-hot encoding, resampling and the portable case format.

Arrays are indexed ``[x, y, z]``. On disk voxels are packed x-fastest
(Fortran order), little-endian, next to a small JSON header::

    <name>.hdr.json  {"dims": [nx, ny, nz], "spacing": [sx, sy, sz],
                      "dtype": "f32" | "u8", "order": "x-fastest"}
    <name>.raw       nx*ny*nz packed elements
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import FormatError, InvalidLabelError, ModeError, ShapeMismatchError

BG, LVC, LVM, RVC = 0, 1, 2, 3
N_CLASSES = 4
N_CHANNELS = 5  # image + 4 one-hot masks

DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class Volume:
    """Scalar image on a regular grid. ``spacing`` is in millimetres."""

    voxels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels)
        if self.voxels.ndim != 3:
            raise ShapeMismatchError(f"volume must be 3D, got shape {self.voxels.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError(f"spacing must be three positive values, got {self.spacing}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.voxels.shape)


@dataclass
class LabelMap:
    """Integer class grid over {0=BG, 1=LVC, 2=LVM, 3=RVC}."""

    classes: np.ndarray
    spacing: tuple[float, float, float] = field(default=(1.0, 1.0, 1.0))

    def __post_init__(self):
        self.classes = np.asarray(self.classes)
        if self.classes.ndim != 3:
            raise ShapeMismatchError(f"labelmap must be 3D, got shape {self.classes.shape}")
        self.spacing = tuple(float(s) for s in self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(d) for d in self.classes.shape)

    def validate(self) -> "LabelMap":
        check_labels(self.classes)
        return self


def check_labels(classes: np.ndarray) -> None:
    """Raise InvalidLabelError naming the first voxel whose id is not in {0..3}."""
    classes = np.asarray(classes)
    bad = (classes < 0) | (classes >= N_CLASSES)
    if bad.any():
        # first offending voxel in x-fastest storage order
        flat = np.flatnonzero(bad.ravel(order="F"))[0]
        idx = np.unravel_index(flat, classes.shape, order="F")
        idx = tuple(int(i) for i in idx)
        raise InvalidLabelError(f"invalid class id {classes[idx]} at voxel {idx}")


def _label_array(labels) -> np.ndarray:
    return labels.classes if isinstance(labels, LabelMap) else np.asarray(labels)


def one_hot_encode(labels: LabelMap | np.ndarray) -> np.ndarray:
    """Return a ``(nx, ny, nz, 4)`` uint8 stack of masks ordered BG, LVC, LVM, RVC."""
    classes = _label_array(labels)
    check_labels(classes)
    return (classes[..., None] == np.arange(N_CLASSES)).astype(np.uint8)


def one_hot_decode(stack: np.ndarray) -> np.ndarray:
    return np.argmax(stack, axis=-1).astype(np.uint8)


def _nearest_index(n_in: int, n_out: int) -> np.ndarray:
    # floor((i + 0.5) * in / out), evaluated in exact integer arithmetic
    i = np.arange(n_out)
    return np.minimum(((2 * i + 1) * n_in) // (2 * n_out), n_in - 1)


def _linear_axis(a: np.ndarray, axis: int, n_out: int) -> np.ndarray:
    n_in = a.shape[axis]
    if n_in == n_out:
        return a
    # voxel-centre alignment with clamping at the edges
    pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    pos = np.clip(pos, 0.0, n_in - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    t = pos - lo
    shape = [1] * a.ndim
    shape[axis] = n_out
    t = t.reshape(shape)
    a_lo = np.take(a, lo, axis=axis)
    a_hi = np.take(a, hi, axis=axis)
    # a + t*(b - a) keeps constant fields exact
    return a_lo + t * (a_hi - a_lo)


def _check_dims(target_dims) -> tuple[int, int, int]:
    target = tuple(int(d) for d in target_dims)
    if len(target) != 3 or min(target) <= 0:
        raise ValueError(f"target_dims must be three positive integers, got {target_dims}")
    return target


def _scaled_spacing(spacing, dims, target):
    return tuple(s * d / t for s, d, t in zip(spacing, dims, target))


def resample(v: Volume | LabelMap, target_dims, mode: str = "linear") -> Volume | LabelMap:
    """Resample to ``target_dims`` with trilinear (images only) or nearest interpolation."""
    target = _check_dims(target_dims)
    if mode not in ("linear", "nearest"):
        raise ModeError(f"unknown resampling mode {mode!r}")
    if isinstance(v, LabelMap):
        if mode != "nearest":
            raise ModeError("labelmaps can only be resampled with mode='nearest'")
        a = v.classes
    else:
        a = v.voxels
    if mode == "nearest":
        out = a[np.ix_(*(_nearest_index(n, m) for n, m in zip(a.shape, target)))]
    else:
        out = a.astype(np.float64)
        for axis, n in enumerate(target):
            out = _linear_axis(out, axis, n)
        out = out.astype(a.dtype if np.issubdtype(a.dtype, np.floating) else np.float64)
    spacing = _scaled_spacing(v.spacing, a.shape, target)
    if isinstance(v, LabelMap):
        return LabelMap(out, spacing)
    return Volume(out, spacing)


def translate_labels(a: np.ndarray, shift) -> np.ndarray:
    """Integer translation by ``shift``; voxels entering from outside the grid become BG."""
    out = np.zeros_like(a)
    src, dst = [], []
    for n, d in zip(a.shape, shift):
        d = int(d)
        if abs(d) >= n:
            return out
        src.append(slice(max(0, -d), n - max(0, d)))
        dst.append(slice(max(0, d), n - max(0, -d)))
    out[tuple(dst)] = a[tuple(src)]
    return out


def normalize_intensity(v: Volume, mode: str = "per_volume", vmin: float | None = None,
                        vmax: float | None = None) -> Volume:
    """Min-max map voxels into [0, 1].

    ``mode="global"`` uses the supplied dataset-wide ``vmin``/``vmax`` and clips
    anything outside them. A degenerate range maps to all zeros.
    """
    x = v.voxels.astype(np.float64)
    if mode == "per_volume":
        lo, hi = float(x.min()), float(x.max())
    elif mode == "global":
        if vmin is None or vmax is None:
            raise ValueError("global normalization needs vmin and vmax")
        lo, hi = float(vmin), float(vmax)
    else:
        raise ModeError(f"unknown normalization mode {mode!r}")
    if hi <= lo:
        return Volume(np.zeros_like(x), v.spacing)
    return Volume(np.clip((x - lo) / (hi - lo), 0.0, 1.0), v.spacing)


def assemble_input(image: Volume, labels: LabelMap) -> np.ndarray:
    """Stack the image and one-hot masks into a ``(nx, ny, nz, 5)`` float64 tensor."""
    if image.dims != labels.dims:
        raise ShapeMismatchError(f"image dims {image.dims} != label dims {labels.dims}")
    out = np.empty(image.dims + (N_CHANNELS,), dtype=np.float64)
    out[..., 0] = image.voxels
    out[..., 1:] = one_hot_encode(labels)
    return out


def preprocess(image: Volume, labels: LabelMap, dims, norm_mode: str = "per_volume",
               vmin: float | None = None, vmax: float | None = None) -> np.ndarray:
    """Resample to the working grid, normalize, one-hot encode and assemble."""
    dims = _check_dims(dims)
    if image.dims != labels.dims:
        raise ShapeMismatchError(f"image dims {image.dims} != label dims {labels.dims}")
    image = resample(image, dims, "linear")
    labels = resample(labels, dims, "nearest")
    image = normalize_intensity(image, norm_mode, vmin, vmax)
    return assemble_input(image, labels)


# ---------------------------------------------------------------------------
# portable file format
# ---------------------------------------------------------------------------

def _stem(path: os.PathLike | str) -> Path:
    p = str(path)
    for suffix in (".hdr.json", ".raw"):
        if p.endswith(suffix):
            return Path(p[: -len(suffix)])
    return Path(p)


def _write_grid(path, a: np.ndarray, spacing, dtype_name: str) -> None:
    stem = _stem(path)
    stem.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "dims": [int(d) for d in a.shape],
        "spacing": [float(s) for s in spacing],
        "dtype": dtype_name,
        "order": "x-fastest",
    }
    Path(f"{stem}.hdr.json").write_text(json.dumps(header) + "\n", encoding="utf-8")
    payload = np.asarray(a).astype(DTYPES[dtype_name]).tobytes(order="F")
    Path(f"{stem}.raw").write_bytes(payload)


def _read_grid(path) -> tuple[np.ndarray, tuple, str]:
    stem = _stem(path)
    try:
        header = json.loads(Path(f"{stem}.hdr.json").read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{stem}.hdr.json: malformed header ({e})") from e
    for key in ("dims", "spacing", "dtype"):
        if key not in header:
            raise FormatError(f"{stem}.hdr.json: missing key {key!r}")
    if header.get("order", "x-fastest") != "x-fastest":
        raise FormatError(f"{stem}.hdr.json: unsupported order {header['order']!r}")
    dtype_name = header["dtype"]
    if dtype_name not in DTYPES:
        raise FormatError(f"{stem}.hdr.json: unknown dtype {dtype_name!r}")
    dims = tuple(int(d) for d in header["dims"])
    if len(dims) != 3 or min(dims) <= 0:
        raise FormatError(f"{stem}.hdr.json: bad dims {header['dims']}")
    dtype = DTYPES[dtype_name]
    payload = Path(f"{stem}.raw").read_bytes()
    n = dims[0] * dims[1] * dims[2]
    if len(payload) != n * dtype.itemsize:
        raise FormatError(
            f"{stem}.raw: payload holds {len(payload)} bytes, header expects "
            f"{n} x {dtype.itemsize} = {n * dtype.itemsize}")
    a = np.frombuffer(payload, dtype=dtype).reshape(dims, order="F").copy()
    return a, tuple(header["spacing"]), dtype_name


def save_volume(path, v: Volume) -> None:
    _write_grid(path, v.voxels, v.spacing, "f32")


def save_labels(path, labels: LabelMap) -> None:
    check_labels(labels.classes)
    _write_grid(path, labels.classes, labels.spacing, "u8")


def load_volume(path) -> Volume:
    a, spacing, dtype_name = _read_grid(path)
    if dtype_name != "f32":
        raise FormatError(f"{path}: image must be f32, got {dtype_name}")
    return Volume(a, spacing)


def load_labels(path) -> LabelMap:
    a, spacing, dtype_name = _read_grid(path)
    if dtype_name != "u8":
        raise FormatError(f"{path}: labelmap must be u8, got {dtype_name}")
    return LabelMap(a, spacing).validate()


def save_case(image_path, label_path, image: Volume, labels: LabelMap) -> None:
    if image.dims != labels.dims:
        raise ShapeMismatchError(f"image dims {image.dims} != label dims {labels.dims}")
    save_volume(image_path, image)
    save_labels(label_path, labels)


def load_case(image_path, label_path) -> tuple[Volume, LabelMap]:
    image = load_volume(image_path)
    labels = load_labels(label_path)
    if image.dims != labels.dims:
        raise FormatError(f"image dims {image.dims} disagree with label dims {labels.dims}")
    return image, labels
