"""Saliency losses with analytic gradients: BCE, soft IoU, SSIM and their sum.

Every loss takes a prediction ``S`` in (0, 1) and a binary target ``G`` of the
same shape and returns ``(value, dL/dS)``.  Arrays are ``(n, 1, h, w)`` or a
single ``(h, w)`` map; per-image reductions run over all axes but the first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ShapeError

BCE_CLAMP = 1e-7
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2
COMPONENTS = ("bce", "ssim", "iou")


@dataclass(frozen=True)
class LossValue:
    bce: float = 0.0
    ssim: float = 0.0
    iou: float = 0.0
    selected: tuple[str, ...] = field(default=COMPONENTS)

    @property
    def total(self) -> float:
        return self.bce + self.ssim + self.iou

    def components(self) -> dict[str, float]:
        return {name: getattr(self, name) for name in self.selected}

    def to_dict(self) -> dict:
        return {"total": self.total, **self.components()}


def _check_pair(s: np.ndarray, g: np.ndarray) -> None:
    if s.shape != g.shape:
        raise ShapeError(f"prediction shape {s.shape} does not match target shape {g.shape}")
    if s.ndim < 2:
        raise ShapeError(f"saliency maps need at least 2 dims, got {s.shape}")


def bce_loss(s: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray]:
    _check_pair(s, g)
    sc = np.clip(s, BCE_CLAMP, 1.0 - BCE_CLAMP)
    n = s.size
    value = -np.mean(g * np.log(sc) + (1.0 - g) * np.log1p(-sc))
    inside = (s >= BCE_CLAMP) & (s <= 1.0 - BCE_CLAMP)
    grad = (-(g / sc) + (1.0 - g) / (1.0 - sc)) / n * inside
    return float(value), grad


def _per_image(x: np.ndarray) -> np.ndarray:
    return x[None] if x.ndim == 2 else x


def iou_loss(s: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray]:
    """Batch mean of ``1 - sum(SG) / sum(S + G - SG)``; an empty pair scores 0."""
    _check_pair(s, g)
    s3, g3 = _per_image(s), _per_image(g)
    axes = tuple(range(1, s3.ndim))
    batch = s3.shape[0]
    inter = (s3 * g3).sum(axis=axes)
    union = (s3 + g3 - s3 * g3).sum(axis=axes)
    empty = union <= 0
    safe = np.where(empty, 1.0, union)
    ratio = np.where(empty, 1.0, inter / safe)
    value = float(np.mean(1.0 - ratio))
    shape = (batch,) + (1,) * (s3.ndim - 1)
    u, i = safe.reshape(shape), inter.reshape(shape)
    grad = -(g3 * u - i * (1.0 - g3)) / (u * u) / batch
    grad = np.where(empty.reshape(shape), 0.0, grad)
    return value, grad.reshape(s.shape)


@lru_cache(maxsize=32)
def gaussian_filter_matrix(n: int, size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    """Banded 1-D Gaussian smoothing matrix, rows renormalized over the in-bounds taps."""
    half = size // 2
    taps = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    m = np.zeros((n, n))
    for i in range(n):
        lo, hi = max(0, i - half), min(n, i + half + 1)
        m[i, lo:hi] = taps[lo - i + half: hi - i + half]
    m /= m.sum(axis=1, keepdims=True)
    m.setflags(write=False)
    return m


def _smooth(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    return mh @ x @ mw.T


def _smooth_adjoint(x: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    return mh.T @ x @ mw


def ssim_map(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    h, w = x.shape[-2:]
    mh, mw = gaussian_filter_matrix(h), gaussian_filter_matrix(w)
    mx, my = _smooth(x, mh, mw), _smooth(y, mh, mw)
    vx = _smooth(x * x, mh, mw) - mx * mx
    vy = _smooth(y * y, mh, mw) - my * my
    cxy = _smooth(x * y, mh, mw) - mx * my
    return ((2 * mx * my + SSIM_C1) * (2 * cxy + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))


def ssim_loss(s: np.ndarray, g: np.ndarray) -> tuple[float, np.ndarray]:
    """``1 - mean SSIM`` with an 11x11 Gaussian window (sigma 1.5), gradient w.r.t. ``s``.

    Windows that overhang the border are truncated and renormalized, so the
    local statistics are weighted averages of in-bounds pixels only.
    """
    _check_pair(s, g)
    x, y = s, g
    h, w = x.shape[-2:]
    mh, mw = gaussian_filter_matrix(h), gaussian_filter_matrix(w)
    mx, my = _smooth(x, mh, mw), _smooth(y, mh, mw)
    pxx = _smooth(x * x, mh, mw)
    pyy = _smooth(y * y, mh, mw)
    pxy = _smooth(x * y, mh, mw)
    a1 = 2 * mx * my + SSIM_C1
    a2 = 2 * (pxy - mx * my) + SSIM_C2
    b1 = mx * mx + my * my + SSIM_C1
    b2 = (pxx - mx * mx) + (pyy - my * my) + SSIM_C2
    d = b1 * b2
    smap = a1 * a2 / d
    n = smap.size
    value = float(1.0 - smap.mean())

    ds_dmx = 2 * my * (a2 - a1) / d - 2 * mx * smap * (1.0 / b1 - 1.0 / b2)
    ds_dpxx = -smap / b2
    ds_dpxy = 2 * a1 / d
    grad = -(
        _smooth_adjoint(ds_dmx, mh, mw)
        + 2 * x * _smooth_adjoint(ds_dpxx, mh, mw)
        + y * _smooth_adjoint(ds_dpxy, mh, mw)
    ) / n
    return value, grad


_LOSSES = {"bce": bce_loss, "ssim": ssim_loss, "iou": iou_loss}


def parse_components(components) -> tuple[str, ...]:
    if isinstance(components, str):
        components = [c for c in components.replace("+", ",").split(",") if c]
    chosen = tuple(dict.fromkeys(c.strip().lower() for c in components))
    unknown = [c for c in chosen if c not in _LOSSES]
    if unknown or not chosen:
        raise ValueError(f"loss components must be a non-empty subset of {COMPONENTS}, got {list(components)}")
    return tuple(c for c in COMPONENTS if c in chosen)


def hybrid_loss(s: np.ndarray, g: np.ndarray, components=COMPONENTS) -> tuple[LossValue, np.ndarray]:
    """Unit-weight sum of the selected components and its gradient."""
    chosen = parse_components(components)
    values = {}
    grad = np.zeros_like(s, dtype=np.result_type(s, np.float64))
    for name in chosen:
        v, gr = _LOSSES[name](s, g)
        values[name] = v
        grad += gr
    return LossValue(selected=chosen, **values), grad
