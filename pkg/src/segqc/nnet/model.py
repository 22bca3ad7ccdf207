"""Desk-scale 3D residual regressor: architecture, parameters, forward and backward.

Layer equations (channels-last, ``IN`` = per-sample per-channel instance norm)::

    stem:   h = relu(conv3(x) + b)
    block:  r = IN2(conv3_b(relu(IN1(conv3_a(h)))))
            h = relu(skip(h) + r),  skip = identity, or conv1(h) + b when channels change
    pool:   2x2x2 average pooling before every block flagged in ``downsample``
    head:   y = sigmoid(dense(mean_xyz(h)))

Convolutions feeding a norm carry no bias (the norm would cancel it).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..errors import ConfigError, FormatError, ShapeMismatchError
from ..volgrid import N_CHANNELS
from . import layers as L

N_OUTPUTS = 5
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ArchSpec:
    input_dims: tuple[int, int, int] = (32, 32, 8)
    stem_channels: int = 8
    block_channels: tuple[int, ...] = (8, 16, 32)
    downsample: tuple[bool, ...] = (True, True, True)  # pool before block i
    norm_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "input_dims", tuple(int(d) for d in self.input_dims))
        object.__setattr__(self, "block_channels", tuple(int(c) for c in self.block_channels))
        object.__setattr__(self, "downsample", tuple(bool(d) for d in self.downsample))

    def validate(self) -> "ArchSpec":
        if len(self.input_dims) != 3 or min(self.input_dims) <= 0:
            raise ConfigError(f"input_dims must be 3 positive ints, got {self.input_dims}")
        if len(self.block_channels) < 1:
            raise ConfigError("need at least one residual block")
        if len(self.downsample) != len(self.block_channels):
            raise ConfigError("downsample needs one flag per block")
        if self.stem_channels < 1 or min(self.block_channels) < 1:
            raise ConfigError("channel counts must be positive")
        factor = 2 ** sum(self.downsample)
        for d in self.input_dims:
            if d % factor:
                raise ConfigError(
                    f"input dims {self.input_dims} not divisible by {factor} "
                    f"for downsampling schedule {self.downsample}")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown arch keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}


def param_layout(spec: ArchSpec) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; this order is the checkpoint tensor order."""
    s = spec.stem_channels
    out = [("stem.w", (3, 3, 3, N_CHANNELS, s)), ("stem.b", (s,))]
    cin = s
    for i, c in enumerate(spec.block_channels):
        p = f"block{i}"
        out += [
            (f"{p}.conv1.w", (3, 3, 3, cin, c)),
            (f"{p}.norm1.gamma", (c,)),
            (f"{p}.norm1.beta", (c,)),
            (f"{p}.conv2.w", (3, 3, 3, c, c)),
            (f"{p}.norm2.gamma", (c,)),
            (f"{p}.norm2.beta", (c,)),
        ]
        if cin != c:
            out += [(f"{p}.proj.w", (1, 1, 1, cin, c)), (f"{p}.proj.b", (c,))]
        cin = c
    out += [("head.w", (cin, N_OUTPUTS)), ("head.b", (N_OUTPUTS,))]
    return out


def param_count(spec: ArchSpec) -> int:
    return int(sum(np.prod(shape) for _, shape in param_layout(spec)))


def unflatten(spec: ArchSpec, flat: np.ndarray) -> dict[str, np.ndarray]:
    views, pos = {}, 0
    for name, shape in param_layout(spec):
        n = int(np.prod(shape))
        views[name] = flat[pos:pos + n].reshape(shape)
        pos += n
    if pos != flat.size:
        raise ShapeMismatchError(f"parameter vector has {flat.size} entries, spec needs {pos}")
    return views


@dataclass
class RegressorModel:
    spec: ArchSpec
    params: np.ndarray  # flat float32, ordered per param_layout
    seed: int = 0
    meta: dict = field(default_factory=dict)

    def views(self) -> dict[str, np.ndarray]:
        return unflatten(self.spec, self.params)

    def copy(self) -> "RegressorModel":
        return RegressorModel(self.spec, self.params.copy(), self.seed, dict(self.meta))


def init_model(spec: ArchSpec, seed: int = 0) -> RegressorModel:
    """Fan-in scaled uniform (He) weights, unit norm gains, zero biases."""
    spec.validate()
    rng = np.random.default_rng(seed)
    flat = np.zeros(param_count(spec), dtype=np.float32)
    views = unflatten(spec, flat)
    for name, shape in param_layout(spec):
        if name.endswith(".w"):
            fan_in = int(np.prod(shape[:-1]))
            limit = np.sqrt(6.0 / fan_in)
            views[name][...] = rng.uniform(-limit, limit, size=shape)
        elif name.endswith(".gamma"):
            views[name][...] = 1.0
    # a small head keeps initial outputs near 0.5 instead of saturating the sigmoid
    views["head.w"][...] *= 0.1
    return RegressorModel(spec, flat, seed)


def _check_input(spec: ArchSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    want = tuple(spec.input_dims) + (N_CHANNELS,)
    if x.ndim == 4:
        x = x[None]
    if x.ndim != 5 or x.shape[1:] != want:
        raise ShapeMismatchError(f"expected input (B, {want}), got {x.shape}")
    return x


def _forward(spec: ArchSpec, P: dict, x: np.ndarray, keep: bool):
    tape = []
    h, c = L.conv_forward(x, P["stem.w"], P["stem.b"])
    h, m = L.relu_forward(h)
    tape.append(("stem", c, m))
    for i, cout in enumerate(spec.block_channels):
        p = f"block{i}"
        pool = None
        if spec.downsample[i]:
            h, pool = L.avgpool_forward(h)
        r, c1 = L.conv_forward(h, P[f"{p}.conv1.w"])
        r, n1 = L.instnorm_forward(r, P[f"{p}.norm1.gamma"], P[f"{p}.norm1.beta"], spec.norm_eps)
        r, m1 = L.relu_forward(r)
        r, c2 = L.conv_forward(r, P[f"{p}.conv2.w"])
        r, n2 = L.instnorm_forward(r, P[f"{p}.norm2.gamma"], P[f"{p}.norm2.beta"], spec.norm_eps)
        if f"{p}.proj.w" in P:
            skip, cp = L.conv_forward(h, P[f"{p}.proj.w"], P[f"{p}.proj.b"])
        else:
            skip, cp = h, None
        h, m2 = L.relu_forward(skip + r)
        tape.append((p, pool, c1, n1, m1, c2, n2, cp, m2))
    g, gshape = L.gap_forward(h)
    z, dcache = L.dense_forward(g, P["head.w"], P["head.b"])
    y = L.sigmoid(z)
    if not keep:
        return y, None
    tape.append(("head", gshape, dcache, y))
    return y, tape


def _backward(spec: ArchSpec, P: dict, tape, dy: np.ndarray) -> dict[str, np.ndarray]:
    G = {}
    _, gshape, dcache, y = tape[-1]
    dz = L.sigmoid_backward(dy, y)
    dg, G["head.w"], G["head.b"] = L.dense_backward(dz, P["head.w"], dcache)
    dh = L.gap_backward(dg, gshape)
    for i in reversed(range(len(spec.block_channels))):
        p, pool, c1, n1, m1, c2, n2, cp, m2 = tape[1 + i]
        ds = L.relu_backward(dh, m2)
        dr, G[f"{p}.norm2.gamma"], G[f"{p}.norm2.beta"] = L.instnorm_backward(
            ds, P[f"{p}.norm2.gamma"], n2)
        dr, G[f"{p}.conv2.w"], _ = L.conv_backward(dr, P[f"{p}.conv2.w"], c2)
        dr = L.relu_backward(dr, m1)
        dr, G[f"{p}.norm1.gamma"], G[f"{p}.norm1.beta"] = L.instnorm_backward(
            dr, P[f"{p}.norm1.gamma"], n1)
        dh, G[f"{p}.conv1.w"], _ = L.conv_backward(dr, P[f"{p}.conv1.w"], c1)
        if cp is None:
            dh = dh + ds
        else:
            dskip, G[f"{p}.proj.w"], G[f"{p}.proj.b"] = L.conv_backward(
                ds, P[f"{p}.proj.w"], cp, with_bias=True)
            dh = dh + dskip
        if pool is not None:
            dh = L.avgpool_backward(dh, pool)
    _, c, m = tape[0]
    dh = L.relu_backward(dh, m)
    _, G["stem.w"], G["stem.b"] = L.conv_backward(dh, P["stem.w"], c, with_bias=True,
                                                  need_dx=False)
    return G


def _as_views(spec: ArchSpec, params: np.ndarray) -> dict[str, np.ndarray]:
    return unflatten(spec, np.asarray(params, dtype=np.float64))


def forward_params(spec: ArchSpec, params: np.ndarray, x: np.ndarray, chunk: int = 8) -> np.ndarray:
    x = _check_input(spec, x)
    P = _as_views(spec, params)
    out = [_forward(spec, P, x[i:i + chunk], keep=False)[0] for i in range(0, len(x), chunk)]
    return np.concatenate(out, axis=0)


def forward(model: RegressorModel, x: np.ndarray, chunk: int = 8) -> np.ndarray:
    """Predict a ``(B, 5)`` array of DSC values in (0, 1)."""
    return forward_params(model.spec, model.params, x, chunk)


def loss_and_grad(spec: ArchSpec, params: np.ndarray, x: np.ndarray, target: np.ndarray,
                  chunk: int = 8) -> tuple[float, np.ndarray, np.ndarray]:
    """MSE loss over the whole batch, its flat float64 gradient, and the predictions.

    The batch is processed in fixed-size chunks and the chunk gradients are
    summed in order, so results do not depend on anything but the inputs.
    """
    x = _check_input(spec, x)
    target = np.asarray(target, dtype=np.float64).reshape(len(x), N_OUTPUTS)
    P = _as_views(spec, params)
    denom = target.size
    layout = param_layout(spec)
    grad = np.zeros(sum(int(np.prod(s)) for _, s in layout), dtype=np.float64)
    gviews = unflatten(spec, grad)
    loss = 0.0
    preds = []
    for i in range(0, len(x), chunk):
        y, tape = _forward(spec, P, x[i:i + chunk], keep=True)
        part, dy = L.mse_loss(y, target[i:i + chunk], denom)
        loss += part
        G = _backward(spec, P, tape, dy)
        for name, _ in layout:
            gviews[name] += G[name]
        preds.append(y)
    return loss, grad, np.concatenate(preds, axis=0)


def backward(model: RegressorModel, x: np.ndarray, target: np.ndarray, chunk: int = 8) -> np.ndarray:
    """Gradient of the batch MSE loss with respect to every parameter."""
    return loss_and_grad(model.spec, model.params, x, target, chunk)[1]


# ---------------------------------------------------------------------------
# checkpoints: <name>.arch.json + <name>.params.raw (little-endian f32)
# ---------------------------------------------------------------------------

def _ckpt_stem(path) -> str:
    p = str(path)
    for suffix in (".arch.json", ".params.raw"):
        if p.endswith(suffix):
            return p[: -len(suffix)]
    return p


def save_model(path, model: RegressorModel) -> None:
    stem = _ckpt_stem(path)
    Path(stem).parent.mkdir(parents=True, exist_ok=True)
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "arch": model.spec.to_dict(),
        "seed": int(model.seed),
        "param_count": int(model.params.size),
        "tensors": [[name, list(shape)] for name, shape in param_layout(model.spec)],
        "meta": model.meta,
    }
    Path(f"{stem}.arch.json").write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    Path(f"{stem}.params.raw").write_bytes(model.params.astype("<f4").tobytes())


def load_model(path) -> RegressorModel:
    stem = _ckpt_stem(path)
    doc = json.loads(Path(f"{stem}.arch.json").read_text(encoding="utf-8"))
    if doc.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{stem}.arch.json: unsupported format version {doc.get('format_version')}")
    spec = ArchSpec.from_dict(doc["arch"]).validate()
    payload = Path(f"{stem}.params.raw").read_bytes()
    n = param_count(spec)
    if len(payload) != 4 * n:
        raise FormatError(f"{stem}.params.raw: expected {4 * n} bytes, found {len(payload)}")
    params = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    return RegressorModel(spec, params, doc.get("seed", 0), doc.get("meta", {}))
