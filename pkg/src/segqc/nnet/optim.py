"""Adam with bias correction and time-based learning-rate decay."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import NumericError, ShapeMismatchError
from .model import RegressorModel, param_layout


@dataclass
class OptimState:
    """Adam moments and schedule.

    ``decay`` is applied as ``lr_t = lr0 / (1 + decay * t)`` when
    ``decay_mode == "lr"``; with ``"weight"`` it is an L2 coefficient added
    to the gradient and the learning rate stays at ``lr0``.
    """

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr0: float = 1e-5
    decay: float = 0.005
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    decay_mode: str = "lr"

    @classmethod
    def for_model(cls, model: RegressorModel, **kw) -> "OptimState":
        n = model.params.size
        return cls(np.zeros(n), np.zeros(n), **kw)

    def lr(self, t: int | None = None) -> float:
        t = self.t if t is None else t
        if self.decay_mode == "lr":
            return self.lr0 / (1.0 + self.decay * t)
        return self.lr0


def _check_finite(model: RegressorModel, grads: np.ndarray) -> None:
    bad = ~np.isfinite(grads)
    if not bad.any():
        return
    first = int(np.flatnonzero(bad)[0])
    pos = 0
    for name, shape in param_layout(model.spec):
        n = int(np.prod(shape))
        if first < pos + n:
            break
        pos += n
    raise NumericError(
        f"{int(bad.sum())} non-finite gradient entries; first at index {first} "
        f"({name}[{first - pos}] = {grads[first]})")


def adam_step(model: RegressorModel, grads: np.ndarray, opt: OptimState):
    """One Adam update in float64; parameters are stored back as float32.

    Returns ``(model, opt)``, both updated in place.
    """
    g = np.asarray(grads, dtype=np.float64)
    if g.shape != model.params.shape:
        raise ShapeMismatchError(f"gradient length {g.size} != parameter count {model.params.size}")
    _check_finite(model, g)
    theta = model.params.astype(np.float64)
    if opt.decay_mode == "weight" and opt.decay:
        g = g + opt.decay * theta
    lr = opt.lr()
    opt.t += 1
    opt.m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    opt.v = opt.beta2 * opt.v + (1.0 - opt.beta2) * (g * g)
    m_hat = opt.m / (1.0 - opt.beta1 ** opt.t)
    v_hat = opt.v / (1.0 - opt.beta2 ** opt.t)
    theta -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)
    model.params = theta.astype(np.float32)
    return model, opt
