"""LMFNet: encoder, mid/low-level fusion, decoder and heads.

Wiring (``F`` are lists of maps, one map per branch of the producing layer)::

    F1 = LMF(image)                         F2..F5 = LMF+pool(F_{i-1})
    FI = LMF+up(LMF+pool(F3))               FL = LMF+up(LMF+pool(F2))
    F6 = LMF+up(F5)                         F7 = LMF+up(F6)
    F8 = LMF+up(FI ++ F7)                   F9 = LMF+up(FL ++ F8)
    S  = sigmoid(conv1x1(concat(F9)))

``A ++ B`` concatenates channels map by map, so both sides must carry the
same number of maps and the same resolution.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from . import kernels as K
from .errors import ConfigError, ShapeError
from .layers import Linear, Module, PointwiseConv, ReLU, Sigmoid
from .lmf import BASE_DILATIONS, FIRST_LAYER_DILATIONS, LMFConfig, LMFLayer, truncate_dilation_vector

CONFIG_VERSION = 1

DEFAULT_ENCODER_WIDTHS = (12, 16, 32, 96, 160)
DEFAULT_DECODER_WIDTHS = (96, 32, 32, 16)
DEFAULT_ENCODER_BRANCHES = (3, 5, 5, 5, 5)
DEFAULT_DECODER_BRANCHES = (3, 3, 2, 2)


@dataclass(frozen=True)
class StageSpec:
    dilations: tuple[int, ...]
    out_channels: int
    kernel_size: int = 3
    resample: str = "none"

    def __post_init__(self):
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))

    @property
    def n(self) -> int:
        return len(self.dilations)


@dataclass(frozen=True)
class HeadSpec:
    kind: str = "saliency"
    num_classes: int = 0
    hidden_width: int = 0

    def __post_init__(self):
        if self.kind not in ("saliency", "classifier"):
            raise ConfigError(f"head kind must be 'saliency' or 'classifier', got {self.kind!r}")
        if self.kind == "classifier":
            if self.num_classes < 2:
                raise ConfigError(f"classifier needs num_classes >= 2, got {self.num_classes}")
            if self.hidden_width < 1:
                raise ConfigError(f"classifier needs a positive hidden_width, got {self.hidden_width}")


@dataclass(frozen=True)
class NetworkConfig:
    input_size: tuple[int, int]
    encoder: tuple[StageSpec, ...]
    fusion_mid: tuple[StageSpec, ...] = ()
    fusion_low: tuple[StageSpec, ...] = ()
    decoder: tuple[StageSpec, ...] = ()
    head: HeadSpec = field(default_factory=HeadSpec)
    in_channels: int = 3
    allow_missing_unit_dilation: bool = False
    version: int = CONFIG_VERSION

    def __post_init__(self):
        object.__setattr__(self, "input_size", tuple(int(v) for v in self.input_size))
        for name in ("encoder", "fusion_mid", "fusion_low", "decoder"):
            object.__setattr__(self, name, tuple(getattr(self, name)))

    # -- JSON ---------------------------------------------------------------
    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_size"] = list(self.input_size)
        for name in ("encoder", "fusion_mid", "fusion_low", "decoder"):
            d[name] = [dict(s, dilations=list(s["dilations"])) for s in d[name]]
        return d

    def to_json(self, indent: int = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        if not isinstance(d, dict):
            raise ConfigError("network config must be a JSON object")
        version = d.get("version", CONFIG_VERSION)
        if version != CONFIG_VERSION:
            raise ConfigError(f"unsupported network config version {version}")
        allowed = {"input_size", "encoder", "fusion_mid", "fusion_low", "decoder", "head",
                   "in_channels", "allow_missing_unit_dilation", "version"}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        try:
            stages = {
                name: tuple(_stage_from_dict(s, f"{name}[{i}]") for i, s in enumerate(d.get(name, [])))
                for name in ("encoder", "fusion_mid", "fusion_low", "decoder")
            }
            head = HeadSpec(**d.get("head", {}))
            return cls(
                input_size=tuple(d["input_size"]),
                head=head,
                in_channels=int(d.get("in_channels", 3)),
                allow_missing_unit_dilation=bool(d.get("allow_missing_unit_dilation", False)),
                **stages,
            )
        except KeyError as exc:
            raise ConfigError(f"network config missing field {exc}") from None
        except TypeError as exc:
            raise ConfigError(f"malformed network config: {exc}") from None

    @classmethod
    def from_json(cls, text: str) -> "NetworkConfig":
        try:
            return cls.from_dict(json.loads(text))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None


def _stage_from_dict(s: dict, where: str) -> StageSpec:
    if not isinstance(s, dict):
        raise ConfigError(f"{where}: stage must be an object")
    s = dict(s)
    if "branches" in s:
        base = s.pop("base_dilations", BASE_DILATIONS)
        s["dilations"] = truncate_dilation_vector(base, int(s.pop("branches")))
    try:
        return StageSpec(**s)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path) -> NetworkConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return NetworkConfig.from_json(text)


def packaged_config(name: str) -> NetworkConfig:
    """Load one of the JSON configs shipped with the package (``default``, ``tiny``, ...)."""
    text = (resources.files("lmfnet") / "configs" / f"{name}.json").read_text(encoding="utf-8")
    return NetworkConfig.from_json(text)


def _scale(width: int, factor: float) -> int:
    return max(4, int(round(width * factor / 4)) * 4) if factor != 1.0 else width


def default_sod_config(input_size=(256, 256), width_scale: float = 1.0,
                       encoder_widths=DEFAULT_ENCODER_WIDTHS, decoder_widths=DEFAULT_DECODER_WIDTHS,
                       base_dilations=BASE_DILATIONS, first_dilations=FIRST_LAYER_DILATIONS,
                       first_kernel: int = 5) -> NetworkConfig:
    """Default SOD network; ``width_scale`` multiplies every channel width (rounded to 4)."""
    enc_w = [_scale(c, width_scale) for c in encoder_widths]
    dec_w = [_scale(c, width_scale) for c in decoder_widths]
    encoder = [StageSpec(tuple(first_dilations), enc_w[0], first_kernel, "none")]
    for n, c in zip(DEFAULT_ENCODER_BRANCHES[1:], enc_w[1:]):
        encoder.append(StageSpec(tuple(truncate_dilation_vector(base_dilations, n)), c, 3, "pool"))
    decoder = [
        StageSpec(tuple(truncate_dilation_vector(base_dilations, n)), c, 3, "upsample")
        for n, c in zip(DEFAULT_DECODER_BRANCHES, dec_w)
    ]
    # fusion up-layers emit as many maps as the decoder stage they are concatenated with
    mid_c, low_c = enc_w[2], enc_w[1]
    fusion_mid = (
        StageSpec(tuple(truncate_dilation_vector(base_dilations, 3)), mid_c, 3, "pool"),
        StageSpec(tuple(truncate_dilation_vector(base_dilations, decoder[1].n)), mid_c, 3, "upsample"),
    )
    fusion_low = (
        StageSpec(tuple(truncate_dilation_vector(base_dilations, 3)), low_c, 3, "pool"),
        StageSpec(tuple(truncate_dilation_vector(base_dilations, decoder[2].n)), low_c, 3, "upsample"),
    )
    return NetworkConfig(tuple(input_size), tuple(encoder), fusion_mid, fusion_low, tuple(decoder))


def default_classifier_config(num_classes: int = 100, hidden_width: int = 192, width_scale: float = 1.0,
                              input_size=(32, 32)) -> NetworkConfig:
    sod = default_sod_config(input_size, width_scale)
    return NetworkConfig(tuple(input_size), sod.encoder,
                         head=HeadSpec("classifier", num_classes, hidden_width))


# ---------------------------------------------------------------------------
# layer resolution and the spatial schedule


@dataclass
class ResolvedLayer:
    name: str
    cfg: LMFConfig
    in_size: tuple[int, int]
    out_size: tuple[int, int]


@dataclass
class Schedule:
    """Per-stage output resolutions plus consistency flags.

    ``errors`` make the config unbuildable; ``warnings`` are advisory
    (for example a 1x1 bottleneck).
    """

    sizes: dict[str, tuple[int, int]]
    layers: list[ResolvedLayer]
    errors: list[str]
    warnings: list[str]

    @property
    def ok(self) -> bool:
        return not self.errors

    @property
    def flags(self) -> list[str]:
        return self.errors + self.warnings

    def as_table(self) -> dict[str, list[int]]:
        return {k: list(v) for k, v in self.sizes.items()}


def _after(size, resample):
    h, w = size
    if resample == "pool":
        return h // 2, w // 2
    if resample == "upsample":
        return h * 2, w * 2
    return h, w


def spatial_schedule(config: NetworkConfig) -> Schedule:
    sizes: dict[str, tuple[int, int]] = {}
    layers: list[ResolvedLayer] = []
    errors: list[str] = []
    warns: list[str] = []
    maps: dict[str, tuple[int, int]] = {}  # name -> (map count, channels)

    def add(name, spec: StageSpec, m, c_in, size):
        if spec.resample == "pool" and (size[0] % 2 or size[1] % 2):
            errors.append(f"{name}: odd resolution {size[0]}x{size[1]} at a pooling stage")
        if spec.resample == "pool" and min(size) < 2:
            errors.append(f"{name}: resolution {size[0]}x{size[1]} cannot be pooled")
        try:
            cfg = LMFConfig(spec.dilations, m, c_in, spec.out_channels, spec.kernel_size, spec.resample)
        except ConfigError as exc:
            errors.append(f"{name}: {exc}")
            cfg = None
        out = _after(size, spec.resample)
        if cfg is not None:
            layers.append(ResolvedLayer(name, cfg, size, out))
        sizes[name] = out
        maps[name] = (spec.n, spec.out_channels)
        return out

    h, w = config.input_size
    if h < 1 or w < 1:
        errors.append(f"input: non-positive resolution {h}x{w}")
        return Schedule(sizes, layers, errors, warns)
    enc = config.encoder
    if len(enc) != 5:
        errors.append(f"encoder: expected 5 stages, got {len(enc)}")
        return Schedule(sizes, layers, errors, warns)
    if enc[0].resample != "none":
        errors.append("F1: first encoder stage must not resample")
    for i, s in enumerate(enc[1:], start=2):
        if s.resample != "pool":
            errors.append(f"F{i}: encoder stages 2-5 must pool")

    size, m, c = (h, w), 1, config.in_channels
    for i, spec in enumerate(enc, start=1):
        size = add(f"F{i}", spec, m, c, size)
        m, c = spec.n, spec.out_channels
    if min(sizes["F5"]) <= 1:
        warns.append(f"F5: degenerate {sizes['F5'][0]}x{sizes['F5'][1]} bottleneck")

    if config.head.kind == "classifier":
        return Schedule(sizes, layers, errors, warns)

    for label, src, specs in (("I", "F3", config.fusion_mid), ("L", "F2", config.fusion_low)):
        if len(specs) != 2 or specs[0].resample != "pool" or specs[1].resample != "upsample":
            errors.append(f"F{label}: fusion path must be a pool layer followed by an upsample layer")
            return Schedule(sizes, layers, errors, warns)
        m, c = maps[src]
        s1 = add(f"F{label}_pool", specs[0], m, c, sizes[src])
        add(f"F{label}", specs[1], specs[0].n, specs[0].out_channels, s1)

    dec = config.decoder
    if len(dec) != 4 or any(s.resample != "upsample" for s in dec):
        errors.append("decoder: expected 4 upsampling stages")
        return Schedule(sizes, layers, errors, warns)
    size, (m, c) = sizes["F5"], maps["F5"]
    for i, spec in enumerate(dec, start=6):
        if i in (8, 9):
            side = "FI" if i == 8 else "FL"
            prev = f"F{i - 1}"
            if sizes[side] != size:
                errors.append(f"F{i}: concat of {side} {sizes[side]} and {prev} {size} has mismatched resolution")
            if maps[side][0] != m:
                errors.append(f"F{i}: concat of {side} ({maps[side][0]} maps) and {prev} ({m} maps) "
                              "has mismatched map count")
            c = c + maps[side][1]
        size = add(f"F{i}", spec, m, c, size)
        m, c = spec.n, spec.out_channels
    if sizes["F9"] != (h, w):
        errors.append(f"F9: output resolution {sizes['F9']} differs from input {(h, w)}")
    return Schedule(sizes, layers, errors, warns)


def _validate(config: NetworkConfig) -> Schedule:
    sched = spatial_schedule(config)
    if not sched.ok:
        raise ConfigError(f"invalid network schedule: {sched.errors[0]}")
    for layer in sched.layers:
        if layer.name != "F1":
            layer.cfg.check_unit_dilation(layer.name, allow=config.allow_missing_unit_dilation)
    return sched


# ---------------------------------------------------------------------------
# networks


class _Net(Module):
    def __init__(self, config: NetworkConfig, seed: int, dtype):
        self.config = config
        self.dtype = np.dtype(dtype)
        self.schedule = None
        self._rng = np.random.default_rng(seed)

    def _check_images(self, images: np.ndarray):
        h, w = self.config.input_size
        if images.ndim != 4 or images.shape[1] != self.config.in_channels or images.shape[2:] != (h, w):
            raise ShapeError(
                f"images must be (n, {self.config.in_channels}, {h}, {w}) for this network, got {images.shape}"
            )
        return np.asarray(images, dtype=self.dtype)

    def _layer(self, resolved: ResolvedLayer) -> LMFLayer:
        return LMFLayer(resolved.cfg, rng=self._rng, dtype=self.dtype, name=resolved.name)


class SODNetwork(_Net):
    def __init__(self, config: NetworkConfig, seed: int = 0, dtype=np.float64):
        super().__init__(config, seed, dtype)
        if config.head.kind != "saliency":
            raise ConfigError("SOD network needs a saliency head")
        self.schedule = _validate(config)
        self.stages = {r.name: self._layer(r) for r in self.schedule.layers}
        f9 = self.stages["F9"].cfg
        self.head = PointwiseConv(f9.n * f9.c_out, 1, bias=True, rng=self._rng, dtype=self.dtype, name="head")
        self.head_act = Sigmoid()
        self._cache = None

    def children(self):
        return list(self.stages.values()) + [self.head]

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = self._check_images(images)
        st = self.stages
        F = {"F1": st["F1"].forward([x])}
        for i in range(2, 6):
            F[f"F{i}"] = st[f"F{i}"].forward(F[f"F{i - 1}"])
        F["FI"] = st["FI"].forward(st["FI_pool"].forward(F["F3"]))
        F["FL"] = st["FL"].forward(st["FL_pool"].forward(F["F2"]))
        F["F6"] = st["F6"].forward(F["F5"])
        F["F7"] = st["F7"].forward(F["F6"])
        cat8 = [K.concat_channels([a, b]) for a, b in zip(F["FI"], F["F7"])]
        F["F8"] = st["F8"].forward([c[0] for c in cat8])
        cat9 = [K.concat_channels([a, b]) for a, b in zip(F["FL"], F["F8"])]
        F["F9"] = st["F9"].forward([c[0] for c in cat9])
        head_in, head_sizes = K.concat_channels(F["F9"])
        self._cache = (cat8[0][1], cat9[0][1], head_sizes)
        return self.head_act.forward(self.head.forward(head_in))

    def backward(self, grad_s: np.ndarray) -> np.ndarray:
        """Backpropagate dL/dS; accumulates parameter grads and returns dL/dimages."""
        sizes8, sizes9, head_sizes = self._cache
        st = self.stages
        g9 = K.split_channels(self.head.backward(self.head_act.backward(grad_s)), head_sizes)
        g_cat9 = st["F9"].backward(g9)
        g_fl, g8 = zip(*(K.split_channels(g, sizes9) for g in g_cat9))
        g_cat8 = st["F8"].backward(list(g8))
        g_fi, g7 = zip(*(K.split_channels(g, sizes8) for g in g_cat8))
        g6 = st["F7"].backward(list(g7))
        g5 = st["F6"].backward(g6)
        g2_side = st["FL_pool"].backward(st["FL"].backward(list(g_fl)))
        g3_side = st["FI_pool"].backward(st["FI"].backward(list(g_fi)))
        g4 = st["F5"].backward(g5)
        g3 = [a + b for a, b in zip(st["F4"].backward(g4), g3_side)]
        g2 = [a + b for a, b in zip(st["F3"].backward(g3), g2_side)]
        g1 = st["F2"].backward(g2)
        return st["F1"].backward(g1)[0]


class ClassifierNetwork(_Net):
    def __init__(self, config: NetworkConfig, num_classes: int | None = None, seed: int = 0, dtype=np.float64):
        super().__init__(config, seed, dtype)
        head = config.head
        if head.kind != "classifier":
            raise ConfigError("classifier network needs a classifier head")
        self.num_classes = int(num_classes if num_classes is not None else head.num_classes)
        if self.num_classes < 2:
            raise ConfigError(f"num_classes must be >= 2, got {self.num_classes}")
        self.schedule = _validate(config)
        self.stages = {r.name: self._layer(r) for r in self.schedule.layers}
        f5 = self.stages["F5"].cfg
        self.fc1 = Linear(f5.n * f5.c_out, head.hidden_width, rng=self._rng, dtype=self.dtype, name="fc1")
        self.fc_act = ReLU()
        self.fc2 = Linear(head.hidden_width, self.num_classes, rng=self._rng, dtype=self.dtype, name="fc2")
        self._cache = None

    def children(self):
        return list(self.stages.values()) + [self.fc1, self.fc2]

    def forward(self, images: np.ndarray) -> np.ndarray:
        x = [self._check_images(images)]
        for i in range(1, 6):
            x = self.stages[f"F{i}"].forward(x)
        feat, sizes = K.concat_channels(x)
        pooled, gap_shape = K.global_avg_pool(feat)
        self._cache = (sizes, gap_shape)
        return self.fc2.forward(self.fc_act.forward(self.fc1.forward(pooled)))

    def backward(self, grad_logits: np.ndarray) -> np.ndarray:
        sizes, gap_shape = self._cache
        g = self.fc1.backward(self.fc_act.backward(self.fc2.backward(grad_logits)))
        g = K.split_channels(K.global_avg_pool_backward(g, gap_shape), sizes)
        for i in range(5, 0, -1):
            g = self.stages[f"F{i}"].backward(g)
        return g[0]


def build_sod_network(config: NetworkConfig, seed: int = 0, dtype=np.float64) -> SODNetwork:
    return SODNetwork(config, seed=seed, dtype=dtype)


def build_classifier(config: NetworkConfig, num_classes: int | None = None, seed: int = 0,
                     dtype=np.float64) -> ClassifierNetwork:
    return ClassifierNetwork(config, num_classes=num_classes, seed=seed, dtype=dtype)


def build_network(config: NetworkConfig, seed: int = 0, dtype=np.float64):
    if config.head.kind == "classifier":
        return build_classifier(config, seed=seed, dtype=dtype)
    return build_sod_network(config, seed=seed, dtype=dtype)


def forward_sod(network: SODNetwork, images: np.ndarray) -> np.ndarray:
    return network.forward(images)


def forward_classifier(network: ClassifierNetwork, images: np.ndarray) -> np.ndarray:
    return network.forward(images)

