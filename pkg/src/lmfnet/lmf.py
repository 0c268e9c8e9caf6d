"""The Lightweight Multi-scale Feature (LMF) layer.

Each of the ``n`` branches owns one depthwise dilated kernel that is applied
to every one of the ``m`` input maps.  The ``m`` results are concatenated
along channels and fused by the branch's own 1x1 convolution, giving ``n``
output maps.  Every convolution is followed by batch norm and ReLU.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .layers import BatchNorm2d, DepthwiseConv, Identity, MaxPool2, Module, PointwiseConv, ReLU, Upsample2

BASE_DILATIONS = (1, 4, 12, 36, 108)
FIRST_LAYER_DILATIONS = (1, 4, 1)
RESAMPLE_MODES = ("none", "pool", "upsample")


def truncate_dilation_vector(base, n: int) -> list[int]:
    """Keep the first ``n`` dilation rates of ``base``."""
    base = list(base)
    if not 1 <= n <= len(base):
        raise ConfigError(f"branch count {n} out of range 1..{len(base)} for base {base}")
    return base[:n]


@dataclass(frozen=True)
class LMFConfig:
    dilations: tuple[int, ...]
    m: int
    c_in: int
    c_out: int
    kernel_size: int = 3
    resample: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.dilations) < 1:
            raise ConfigError("dilation vector must be non-empty")
        if any(d < 1 for d in self.dilations):
            raise ConfigError(f"dilations must be >= 1, got {self.dilations}")
        if self.m < 1 or self.c_in < 1 or self.c_out < 1:
            raise ConfigError(f"m, c_in, c_out must be positive: {self}")
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {self.kernel_size}")
        if self.resample not in RESAMPLE_MODES:
            raise ConfigError(f"resample must be one of {RESAMPLE_MODES}, got {self.resample!r}")

    @property
    def n(self) -> int:
        return len(self.dilations)

    def check_unit_dilation(self, where: str = "LMF layer", allow: bool = False) -> bool:
        """Warn when no branch has dilation 1 (skipped for the first encoder layer)."""
        ok = 1 in self.dilations
        if not ok and not allow:
            warnings.warn(
                f"{where}: dilation vector {list(self.dilations)} has no rate-1 branch; "
                "sampling becomes discontinuous",
                stacklevel=3,
            )
        return ok


def lmf_param_count(cfg: LMFConfig, include_bn: bool = True) -> int:
    n, m, k = cfg.n, cfg.m, cfg.kernel_size
    count = n * k * k * cfg.c_in + n * m * cfg.c_in * cfg.c_out
    if include_bn:
        count += n * 2 * cfg.c_in + n * 2 * cfg.c_out
    return count


class LMFBranch(Module):
    def __init__(self, cfg: LMFConfig, dilation: int, rng, dtype, name):
        self.cfg = cfg
        self.name = name
        self.dw = DepthwiseConv(cfg.c_in, cfg.kernel_size, dilation, rng=rng, dtype=dtype, name="dw")
        self.dw_bn = BatchNorm2d(cfg.c_in, dtype=dtype, name="dw_bn")
        self.dw_act = ReLU()
        self.pw = PointwiseConv(cfg.m * cfg.c_in, cfg.c_out, rng=rng, dtype=dtype, name="pw")
        self.pw_bn = BatchNorm2d(cfg.c_out, dtype=dtype, name="pw_bn")
        self.pw_act = ReLU()
        self.fused_shape = None
        self.resample = {"none": Identity, "pool": MaxPool2, "upsample": Upsample2}[cfg.resample]()

    def children(self):
        return [self.dw, self.dw_bn, self.pw, self.pw_bn]

    def forward(self, stacked: np.ndarray, batch: int) -> np.ndarray:
        # stacked holds the m input maps along the batch axis: (m*batch, c_in, h, w)
        m, c = self.cfg.m, self.cfg.c_in
        y = self.dw_act.forward(self.dw_bn.forward(self.dw.forward(stacked)))
        h, w = y.shape[2:]
        fused_in = y.reshape(m, batch, c, h, w).transpose(1, 0, 2, 3, 4).reshape(batch, m * c, h, w)
        self.fused_shape = fused_in.shape
        out = self.pw_act.forward(self.pw_bn.forward(self.pw.forward(fused_in)))
        return self.resample.forward(out)

    def backward(self, g: np.ndarray) -> np.ndarray:
        m, c = self.cfg.m, self.cfg.c_in
        g = self.resample.backward(g)
        g = self.pw.backward(self.pw_bn.backward(self.pw_act.backward(g)))
        batch, _, h, w = g.shape
        g = g.reshape(batch, m, c, h, w).transpose(1, 0, 2, 3, 4).reshape(m * batch, c, h, w)
        return self.dw.backward(self.dw_bn.backward(self.dw_act.backward(g)))


class LMFLayer(Module):
    def __init__(self, cfg: LMFConfig, rng=None, dtype=np.float64, name=None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.name = name
        self.branches = [LMFBranch(cfg, d, rng, dtype, name=f"branch{i}") for i, d in enumerate(cfg.dilations)]
        self._batch = None

    def children(self):
        return self.branches

    def forward(self, inputs: list[np.ndarray]) -> list[np.ndarray]:
        cfg = self.cfg
        if len(inputs) != cfg.m:
            raise ShapeError(f"LMF layer {self.name or ''} expects {cfg.m} input maps, got {len(inputs)}")
        shape = inputs[0].shape
        if len(shape) != 4 or shape[1] != cfg.c_in:
            raise ShapeError(f"LMF layer expects inputs (n, {cfg.c_in}, h, w), got {shape}")
        if any(x.shape != shape for x in inputs):
            raise ShapeError("LMF input maps differ in shape: " + ", ".join(str(x.shape) for x in inputs))
        self._batch = shape[0]
        stacked = inputs[0] if cfg.m == 1 else np.concatenate(inputs, axis=0)
        return [b.forward(stacked, self._batch) for b in self.branches]

    def backward(self, grads: list[np.ndarray]) -> list[np.ndarray]:
        if len(grads) != self.cfg.n:
            raise ShapeError(f"expected {self.cfg.n} output gradients, got {len(grads)}")
        total = None
        for branch, g in zip(self.branches, grads):
            d = branch.backward(g)
            total = d if total is None else total + d
        return list(np.split(total, self.cfg.m, axis=0))
