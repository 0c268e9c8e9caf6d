"""Static analysis of layer stacks and networks.

Receptive fields are computed three ways.  ``rf_dilated`` is the stacking
recurrence ``RF_i = RF_{i-1} + (k_i - 1) * d_i * J_{i-1}`` where ``J`` is the
product of preceding strides; it is exact and is what validation uses.
``rf_composed`` evaluates ``RF_i = k_i + (RF_{i-1} - 1) * d_i`` with ``d_i`` the
dilation (pools use their stride), and ``rf_composed_stride`` evaluates the
same expression with ``d_i`` the stride.  The composed forms are reported for
comparison; they over-count whenever dilations grow, e.g. 21 against a true
13 for three 3x3 layers with dilations 1, 2, 3.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import product

import numpy as np

from . import kernels as K
from .errors import ConfigError
from .layers import Module

# elementwise costs per output element
BN_OPS = 2
RELU_OPS = 1
MAXPOOL_OPS = 3
UPSAMPLE_OPS = 4
SIGMOID_OPS = 4
BIAS_OPS = 1


@dataclass(frozen=True)
class LayerSpec:
    kind: str = "conv"
    kernel_size: int = 3
    dilation: int = 1
    stride: int = 1
    in_channels: int | None = None
    out_channels: int | None = None
    separable: bool = False
    bias: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "pool"):
            raise ConfigError(f"layer kind must be 'conv' or 'pool', got {self.kind!r}")
        if min(self.kernel_size, self.dilation, self.stride) < 1:
            raise ConfigError(f"layer fields must be positive: {self}")
        if self.kind == "conv" and self.kernel_size % 2 == 0:
            raise ConfigError(f"conv kernel size must be odd, got {self.kernel_size}")

    @classmethod
    def pool(cls, size: int = 2) -> "LayerSpec":
        return cls("pool", kernel_size=size, dilation=1, stride=size)


@dataclass(frozen=True)
class LayerStackSpec:
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        object.__setattr__(self, "layers", tuple(self.layers))

    @classmethod
    def convs(cls, kernels, dilations, strides=None) -> "LayerStackSpec":
        if isinstance(kernels, int):
            kernels = [kernels] * len(dilations)
        strides = strides or [1] * len(dilations)
        if not len(kernels) == len(dilations) == len(strides):
            raise ConfigError("kernels, dilations and strides must have equal length")
        return cls(tuple(LayerSpec("conv", k, d, s) for k, d, s in zip(kernels, dilations, strides)))

    def __len__(self):
        return len(self.layers)

    @property
    def conv_layers(self) -> list[LayerSpec]:
        return [layer for layer in self.layers if layer.kind == "conv"]


# ---------------------------------------------------------------------------
# receptive field


@dataclass(frozen=True)
class ReceptiveField:
    rf_dilated: list[int]
    rf_composed: list[int]
    rf_composed_stride: list[int]

    def to_dict(self) -> dict:
        return {
            "rf_dilated": self.rf_dilated,
            "rf_composed": self.rf_composed,
            "rf_composed_stride": self.rf_composed_stride,
        }


def receptive_field(stack: LayerStackSpec) -> ReceptiveField:
    if len(stack) == 0:
        raise ConfigError("receptive field of an empty stack is undefined")
    exact, composed, composed_s = [], [], []
    rf, jump, a, b = 1, 1, 1, 1
    for layer in stack.layers:
        d = layer.dilation if layer.kind == "conv" else 1
        rf += (layer.kernel_size - 1) * d * jump
        jump *= layer.stride
        exact.append(rf)
        step = layer.dilation if layer.kind == "conv" else layer.stride
        a = layer.kernel_size + (a - 1) * step
        b = layer.kernel_size + (b - 1) * layer.stride
        composed.append(a)
        composed_s.append(b)
    return ReceptiveField(exact, composed, composed_s)


def gradient_support_probe(stack: LayerStackSpec, per_layer: bool = True) -> list[int]:
    """Measured receptive field per layer: backprop one output unit with all-ones kernels.

    Runs the real depthwise-conv backward on a 1-pixel-high strip wide enough
    that padding never clips the support, and routes pooling gradients to
    every window member so no tap is dropped by argmax selection.  With
    ``per_layer=False`` only the full stack is measured.
    """
    if len(stack) == 0:
        raise ConfigError("receptive field of an empty stack is undefined")
    bound = receptive_field(stack).rf_dilated[-1]
    total_stride = int(np.prod([layer.stride for layer in stack.layers]))
    width = 2 * bound + 4 * total_stride + 8
    width += (-width) % total_stride
    result = []
    depths = range(1, len(stack) + 1) if per_layer else [len(stack)]
    for depth in depths:
        layers = stack.layers[:depth]
        shapes = [width]
        for layer in layers:
            shapes.append(shapes[-1] // layer.stride)
        g = np.zeros((1, 1, 1, shapes[-1]))
        g[0, 0, 0, shapes[-1] // 2] = 1.0
        for layer, w_in in zip(reversed(layers), reversed(shapes[:-1])):
            if layer.kind == "pool":
                g = np.repeat(g, layer.stride, axis=3)[..., :w_in]
                continue
            geom = K.ConvGeometry(layer.kernel_size, layer.dilation, layer.stride)
            x = np.zeros((1, 1, 1, w_in))
            kernel = np.ones((1, 1, layer.kernel_size, layer.kernel_size))
            _, cache = K.conv2d_depthwise(x, kernel, geom)
            g, _ = K.conv2d_depthwise_backward(g, cache)
        nz = np.flatnonzero(g[0, 0, 0])
        result.append(int(nz[-1] - nz[0] + 1))
    return result


# ---------------------------------------------------------------------------
# gridding


def _taps(k: int, d: int) -> np.ndarray:
    half = (k - 1) // 2
    return np.arange(-half, half + 1) * d


def compose_taps(*tap_sets) -> np.ndarray:
    out = np.zeros(1, dtype=np.int64)
    for taps in tap_sets:
        out = np.unique((out[:, None] + np.asarray(taps)[None, :]).ravel())
    return out


def coverage_gaps(positions: np.ndarray) -> list[int]:
    """Integer positions between the extremes of ``positions`` that are never sampled."""
    positions = np.unique(positions)
    full = np.arange(positions[0], positions[-1] + 1)
    return full[~np.isin(full, positions)].tolist()


@dataclass(frozen=True)
class PairVerdict:
    index: int
    dilations: tuple[int, int]
    kernel_size: int
    ratio: float
    passed: bool
    gaps: list[int]

    def to_dict(self) -> dict:
        return {
            "pair": [self.index, self.index + 1],
            "dilations": list(self.dilations),
            "kernel_size": self.kernel_size,
            "ratio": self.ratio,
            "verdict": "PASS" if self.passed else "FAIL",
            "gaps": self.gaps,
        }


@dataclass(frozen=True)
class GriddingReport:
    pairs: list[PairVerdict]
    stack_positions: list[int]
    stack_gaps: list[int]

    @property
    def passed(self) -> bool:
        return all(p.passed for p in self.pairs)

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "pairs": [p.to_dict() for p in self.pairs],
            "stack_span": [self.stack_positions[0], self.stack_positions[-1]],
            "stack_gaps": self.stack_gaps,
        }


def pair_coverage(k_prev: int, d_prev: int, k_next: int, d_next: int) -> np.ndarray:
    """1-D positions reached by two stacked layers fed by a gap-free map at spacing ``d_prev``.

    Everything the earlier layers see is treated as a contiguous block of
    ``d_prev`` cells, which isolates the gaps introduced by this pair alone.
    """
    return compose_taps(np.arange(d_prev), _taps(k_prev, d_prev), _taps(k_next, d_next))


def gridding_check(stack: LayerStackSpec) -> GriddingReport:
    """Adjacent-pair rule ``d_next / d_prev <= k_prev`` plus exact coverage enumeration.

    Pair ``(i, i+1)`` passes when the next dilation does not outstride the
    span the previous kernel fills.  With ratio equal to ``k_prev`` the taps
    tile the line exactly; beyond it every composition leaves holes, which
    the per-pair coverage map reports.
    """
    convs = stack.conv_layers
    pairs = []
    for i, (a, b) in enumerate(zip(convs, convs[1:])):
        ratio = b.dilation / a.dilation
        gaps = coverage_gaps(pair_coverage(a.kernel_size, a.dilation, b.kernel_size, b.dilation))
        pairs.append(PairVerdict(i, (a.dilation, b.dilation), a.kernel_size, ratio,
                                 ratio <= a.kernel_size, gaps))
    positions = compose_taps(*(_taps(c.kernel_size, c.dilation) for c in convs))
    return GriddingReport(pairs, positions.tolist(), coverage_gaps(positions))


# ---------------------------------------------------------------------------
# parameter counting


def standard_conv_params(k: int, m: int, n: int) -> int:
    return k * k * m * n


def separable_conv_params(k: int, m: int, n: int) -> int:
    return k * k * m + m * n


def layer_params(layer: LayerSpec, batchnorm: bool = False) -> int:
    if layer.kind == "pool":
        return 0
    if layer.in_channels is None or layer.out_channels is None:
        raise ConfigError(f"parameter count needs channel counts: {layer}")
    m, n, k = layer.in_channels, layer.out_channels, layer.kernel_size
    count = separable_conv_params(k, m, n) if layer.separable else standard_conv_params(k, m, n)
    if layer.bias:
        count += n
    if batchnorm:
        count += 2 * n
    return count


def config_param_count(config) -> int:
    """Closed-form parameter count of the network a config describes."""
    from .lmf import lmf_param_count
    from .network import spatial_schedule

    sched = spatial_schedule(config)
    if not sched.ok:
        raise ConfigError(f"invalid network schedule: {sched.errors[0]}")
    total = sum(lmf_param_count(layer.cfg) for layer in sched.layers)
    last = sched.layers[-1].cfg
    feat = last.n * last.c_out
    if config.head.kind == "classifier":
        hidden, classes = config.head.hidden_width, config.head.num_classes
        total += feat * hidden + hidden + hidden * classes + classes
    else:
        total += feat + 1
    return total


def param_count(subject) -> int:
    """Exact parameter count of a layer stack, a network config or a built network.

    For a built network the closed-form count of its config is returned; it
    must equal ``subject.num_parameters()``, the enumerated storage.
    """
    if isinstance(subject, LayerStackSpec):
        return sum(layer_params(layer) for layer in subject.layers)
    if isinstance(subject, LayerSpec):
        return layer_params(subject)
    if isinstance(subject, Module) and hasattr(subject, "config"):
        return config_param_count(subject.config)
    if hasattr(subject, "encoder"):
        return config_param_count(subject)
    raise TypeError(f"cannot count parameters of {type(subject).__name__}")


# ---------------------------------------------------------------------------
# FLOPs


@dataclass
class LayerCost:
    name: str
    macs: int
    elementwise: int

    @property
    def flops(self) -> int:
        return 2 * self.macs + self.elementwise


@dataclass
class FlopReport:
    layers: list[LayerCost] = field(default_factory=list)

    @property
    def macs(self) -> int:
        return sum(layer.macs for layer in self.layers)

    @property
    def flops(self) -> int:
        return sum(layer.flops for layer in self.layers)

    def to_dict(self) -> dict:
        return {
            "macs": self.macs,
            "flops": self.flops,
            "layers": [{"name": c.name, "macs": c.macs, "flops": c.flops} for c in self.layers],
        }


def conv_macs(out_shape, kernel_size: int, in_per_group: int) -> int:
    """Output elements times kernel taps times input channels per group."""
    return int(np.prod(out_shape)) * kernel_size * kernel_size * in_per_group


def lmf_layer_cost(name: str, cfg, in_size, batch: int = 1) -> LayerCost:
    h, w = in_size
    hw = batch * h * w
    dw_out = cfg.n * cfg.m * cfg.c_in * hw
    pw_out = cfg.n * cfg.c_out * hw
    macs = dw_out * cfg.kernel_size**2 + pw_out * cfg.m * cfg.c_in
    elem = (dw_out + pw_out) * (BN_OPS + RELU_OPS)
    if cfg.resample == "pool":
        elem += MAXPOOL_OPS * pw_out // 4
    elif cfg.resample == "upsample":
        elem += UPSAMPLE_OPS * pw_out * 4
    return LayerCost(name, macs, elem)


def flops_count(subject, input_size=None, batch: int = 1) -> FlopReport:
    """MACs and FLOPs (2 per MAC plus elementwise work) for a network or config."""
    from .network import spatial_schedule

    config = subject.config if hasattr(subject, "config") else subject
    if input_size is not None and tuple(input_size) != tuple(config.input_size):
        from dataclasses import replace

        config = replace(config, input_size=tuple(input_size))
    sched = spatial_schedule(config)
    if not sched.ok:
        raise ConfigError(f"invalid network schedule: {sched.errors[0]}")
    report = FlopReport([lmf_layer_cost(layer.name, layer.cfg, layer.in_size, batch) for layer in sched.layers])
    last = sched.layers[-1]
    feat = last.cfg.n * last.cfg.c_out
    oh, ow = last.out_size
    if config.head.kind == "classifier":
        hidden, classes = config.head.hidden_width, config.head.num_classes
        gap = batch * feat * oh * ow
        report.layers.append(LayerCost("gap", 0, gap))
        report.layers.append(LayerCost("fc1", batch * feat * hidden, batch * hidden * (BIAS_OPS + RELU_OPS)))
        report.layers.append(LayerCost("fc2", batch * hidden * classes, batch * classes * BIAS_OPS))
    else:
        out = batch * oh * ow
        report.layers.append(LayerCost("head", out * feat, out * (BIAS_OPS + SIGMOID_OPS)))
    return report


# ---------------------------------------------------------------------------
# network report


def encoder_path(config) -> LayerStackSpec:
    """Deepest encoder path: branch ``i`` at stage ``i`` (clipped to the branch count), pools interleaved."""
    layers = []
    for i, stage in enumerate(config.encoder):
        if stage.resample == "pool":
            layers.append(LayerSpec.pool())
        d = stage.dilations[min(i, len(stage.dilations) - 1)]
        layers.append(LayerSpec("conv", stage.kernel_size, d))
    return LayerStackSpec(tuple(layers))


@dataclass
class AnalysisReport:
    params: int
    params_enumerated: int | None
    macs: int
    flops: int
    stage_rf: dict[str, dict]
    gridding: GriddingReport
    path_rf: ReceptiveField
    input_size: tuple[int, int]
    flop_layers: list[LayerCost] = field(default_factory=list)

    @property
    def gridding_passed(self) -> bool:
        return self.gridding.passed

    def to_dict(self) -> dict:
        return {
            "input_size": list(self.input_size),
            "params": self.params,
            "params_enumerated": self.params_enumerated,
            "macs": self.macs,
            "flops": self.flops,
            "gflops": self.flops / 1e9,
            "gmacs": self.macs / 1e9,
            "stages": self.stage_rf,
            "encoder_path_rf": self.path_rf.to_dict(),
            "gridding": self.gridding.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_text(self) -> str:
        lines = [
            f"input       {self.input_size[0]}x{self.input_size[1]}",
            f"params      {self.params:,}",
            f"MACs        {self.macs:,} ({self.macs / 1e9:.3f} G)",
            f"FLOPs       {self.flops:,} ({self.flops / 1e9:.3f} G)",
            "",
            f"{'stage':<10}{'dilations':<22}{'k':>3}{'rf_dilated':>12}{'rf_composed':>13}{'rf_stride':>11}",
        ]
        for name, row in self.stage_rf.items():
            lines.append(
                f"{name:<10}{str(row['dilations']):<22}{row['kernel_size']:>3}"
                f"{row['rf_dilated']:>12}{row['rf_composed']:>13}{row['rf_composed_stride']:>11}"
            )
        lines.append("")
        lines.append(f"{'pair':<8}{'dilations':<14}{'k':>3}{'ratio':>8}  verdict  gaps")
        for p in self.gridding.pairs:
            gaps = ",".join(map(str, p.gaps[:8])) + ("..." if len(p.gaps) > 8 else "")
            lines.append(
                f"{p.index}-{p.index + 1:<6}{str(list(p.dilations)):<14}{p.kernel_size:>3}{p.ratio:>8.2f}  "
                f"{'PASS' if p.passed else 'FAIL':<7}  {gaps or '-'}"
            )
        lines.append(f"gridding    {'PASS' if self.gridding.passed else 'FAIL'}")
        return "\n".join(lines)


def analyze_network(subject) -> AnalysisReport:
    """Parameter, FLOP, receptive-field and gridding report for a config or built network."""
    config = subject.config if hasattr(subject, "config") else subject
    enumerated = subject.num_parameters() if isinstance(subject, Module) else None
    flops = flops_count(config)
    path = encoder_path(config)
    path_rf = receptive_field(path)
    conv_idx = [i for i, layer in enumerate(path.layers) if layer.kind == "conv"]
    stage_rf = {}
    for s, (stage, i) in enumerate(zip(config.encoder, conv_idx), start=1):
        stage_rf[f"F{s}"] = {
            "dilations": list(stage.dilations),
            "kernel_size": stage.kernel_size,
            "rf_dilated": path_rf.rf_dilated[i],
            "rf_composed": path_rf.rf_composed[i],
            "rf_composed_stride": path_rf.rf_composed_stride[i],
        }
    grid = gridding_check(LayerStackSpec(tuple(path.conv_layers)))
    return AnalysisReport(
        params=config_param_count(config),
        params_enumerated=enumerated,
        macs=flops.macs,
        flops=flops.flops,
        stage_rf=stage_rf,
        gridding=grid,
        path_rf=path_rf,
        input_size=tuple(config.input_size),
        flop_layers=flops.layers,
    )


def exhaustive_stacks(kernels=(1, 3, 5), dilations=(1, 2, 3, 4), max_depth: int = 4, max_rf: int = 64):
    """All conv stacks over the given grid whose exact receptive field stays within ``max_rf``."""
    for depth in range(1, max_depth + 1):
        for ks in product(kernels, repeat=depth):
            for ds in product(dilations, repeat=depth):
                stack = LayerStackSpec.convs(list(ks), list(ds))
                if receptive_field(stack).rf_dilated[-1] <= max_rf:
                    yield stack
