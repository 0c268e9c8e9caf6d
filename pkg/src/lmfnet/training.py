"""Optimizers, learning-rate schedules, augmentation and the training loops."""

from __future__ import annotations

import json
import logging
import math
import queue
import threading
from contextlib import nullcontext
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import kernels as K
from .errors import ConfigError, LabelRangeError, NumericalError, ShapeError
from .losses import COMPONENTS, hybrid_loss, parse_components

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class OptimizerState:
    kind: str
    lr: float
    weight_decay: float = 0.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    momentum: float = 0.9
    step: int = 0
    buffers: dict[str, list[np.ndarray]] = field(default_factory=dict)

    def hyper(self) -> dict:
        d = asdict(self)
        d.pop("buffers")
        return d


def _check_shapes(values, grads):
    if len(values) != len(grads):
        raise ShapeError(f"{len(values)} parameters but {len(grads)} gradients")
    for v, g in zip(values, grads):
        if v.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match parameter {v.shape}")


def adam_step(values, grads, state: OptimizerState, lr: float | None = None) -> None:
    """In-place Adam update with bias correction; weight decay is added to the gradient."""
    _check_shapes(values, grads)
    lr = state.lr if lr is None else lr
    if "m" not in state.buffers:
        state.buffers["m"] = [np.zeros_like(v) for v in values]
        state.buffers["v"] = [np.zeros_like(v) for v in values]
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(values, grads, state.buffers["m"], state.buffers["v"]):
        if state.weight_decay:
            g = g + state.weight_decay * p
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def sgd_momentum_step(values, grads, state: OptimizerState, lr: float | None = None) -> None:
    """``v <- mu v + g + wd p``; ``p <- p - lr v``."""
    _check_shapes(values, grads)
    lr = state.lr if lr is None else lr
    if "velocity" not in state.buffers:
        state.buffers["velocity"] = [np.zeros_like(v) for v in values]
    state.step += 1
    for p, g, vel in zip(values, grads, state.buffers["velocity"]):
        vel *= state.momentum
        vel += g
        if state.weight_decay:
            vel += state.weight_decay * p
        p -= lr * vel


class Optimizer:
    """Binds an optimizer state to a list of ``Param`` objects."""

    def __init__(self, params, state: OptimizerState):
        if state.kind not in ("adam", "sgd-momentum"):
            raise ConfigError(f"unknown optimizer {state.kind!r}")
        self.params = list(params)
        self.state = state

    @classmethod
    def adam(cls, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=1e-4):
        return cls(params, OptimizerState("adam", lr, weight_decay, beta1, beta2, eps))

    @classmethod
    def sgd(cls, params, lr=0.1, momentum=0.9, weight_decay=5e-4):
        return cls(params, OptimizerState("sgd-momentum", lr, weight_decay, momentum=momentum))

    def step(self, lr: float | None = None) -> None:
        values = [p.value for p in self.params]
        grads = [p.grad for p in self.params]
        if self.state.kind == "adam":
            adam_step(values, grads, self.state, lr)
        else:
            sgd_momentum_step(values, grads, self.state, lr)

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


# ---------------------------------------------------------------------------
# schedules


@dataclass(frozen=True)
class ScheduleSpec:
    kind: str = "exponential"
    base_lr: float = 1e-3
    rate: float = 0.98
    milestones: tuple[int, ...] = ()
    factor: float = 0.2

    def __post_init__(self):
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        if self.kind not in ("exponential", "multistep", "constant"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if self.base_lr <= 0:
            raise ConfigError(f"base learning rate must be positive, got {self.base_lr}")
        if self.kind == "exponential" and not 0 < self.rate < 1:
            raise ConfigError(f"exponential decay rate must lie in (0, 1), got {self.rate}")
        if self.kind == "multistep":
            if any(b <= a for a, b in zip(self.milestones, self.milestones[1:])):
                raise ConfigError(f"milestones must be strictly increasing, got {list(self.milestones)}")
            if not 0 < self.factor < 1:
                raise ConfigError(f"multistep factor must lie in (0, 1), got {self.factor}")


def schedule_lr(spec: ScheduleSpec, epoch: int) -> float:
    if epoch < 0:
        raise ValueError(f"epoch must be non-negative, got {epoch}")
    if spec.kind == "exponential":
        return spec.base_lr * spec.rate**epoch
    if spec.kind == "multistep":
        passed = sum(1 for m in spec.milestones if epoch >= m)
        return spec.base_lr * spec.factor**passed
    return spec.base_lr


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    brightness: float = 0.0
    contrast: float = 1.0
    crop: tuple[int, int, int, int] | None = None  # top, left, height, width
    flip: bool = False


BRIGHTNESS = 0.2
CONTRAST = (0.8, 1.25)
CROP = (0.8, 1.0)


def sample_augment_params(rng: np.random.Generator, size: tuple[int, int]) -> AugmentParams:
    h, w = size
    brightness = rng.uniform(-BRIGHTNESS, BRIGHTNESS)
    contrast = rng.uniform(*CONTRAST)
    ch = max(1, int(round(h * rng.uniform(*CROP))))
    cw = max(1, int(round(w * rng.uniform(*CROP))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < 0.5)
    return AugmentParams(brightness, contrast, (top, left, ch, cw), flip)


def apply_augment(image: np.ndarray, mask: np.ndarray, params: AugmentParams) -> tuple[np.ndarray, np.ndarray]:
    """Photometric jitter on the image, then a shared crop-resize and horizontal flip.

    ``image`` is ``(c, h, w)`` and ``mask`` is ``(1, h, w)``; output shapes equal input shapes.
    """
    c, h, w = image.shape
    out = image
    if params.contrast != 1.0 or params.brightness != 0.0:
        mean = image.mean(axis=(1, 2), keepdims=True)
        out = np.clip((image - mean) * params.contrast + mean + params.brightness, 0.0, 1.0)
    m = mask
    if params.crop is not None and params.crop != (0, 0, h, w):
        top, left, ch, cw = params.crop
        out = K.resize_bilinear(out[None, :, top:top + ch, left:left + cw], h, w)[0][0]
        m = K.resize_nearest(m[None, :, top:top + ch, left:left + cw], h, w)[0]
    if params.flip:
        out = out[..., ::-1]
        m = m[..., ::-1]
    return np.ascontiguousarray(out, dtype=image.dtype), np.ascontiguousarray(m, dtype=mask.dtype)


def augment_sod(image, mask, rng) -> tuple[np.ndarray, np.ndarray]:
    return apply_augment(image, mask, sample_augment_params(rng, image.shape[1:]))


def augment_cifar(images: np.ndarray, rng: np.random.Generator, pad: int = 4) -> np.ndarray:
    """Random translation by up to ``pad`` pixels (zero fill) and horizontal flip, per image."""
    n, c, h, w = images.shape
    padded = np.pad(images, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    tops = rng.integers(0, 2 * pad + 1, n)
    lefts = rng.integers(0, 2 * pad + 1, n)
    flips = rng.random(n) < 0.5
    out = np.empty_like(images)
    for i in range(n):
        crop = padded[i, :, tops[i]:tops[i] + h, lefts[i]:lefts[i] + w]
        out[i] = crop[..., ::-1] if flips[i] else crop
    return out


# ---------------------------------------------------------------------------
# recipes


@dataclass(frozen=True)
class Recipe:
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    momentum: float = 0.9
    schedule: ScheduleSpec = field(default_factory=ScheduleSpec)
    batch_size: int = 8
    epochs: int = 200
    max_steps: int | None = None
    loss: tuple[str, ...] = COMPONENTS
    augment: bool = True
    seed: int = 0
    checkpoint_every: int = 10
    dtype: str = "float64"
    strict_deterministic: bool = False
    prefetch: int = 2

    def __post_init__(self):
        object.__setattr__(self, "loss", parse_components(self.loss))
        if isinstance(self.schedule, dict):
            object.__setattr__(self, "schedule", ScheduleSpec(**self.schedule))
        if self.optimizer not in ("adam", "sgd-momentum"):
            raise ConfigError(f"optimizer must be 'adam' or 'sgd-momentum', got {self.optimizer!r}")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.schedule.base_lr != self.lr:
            object.__setattr__(self, "schedule", replace(self.schedule, base_lr=self.lr))

    @classmethod
    def sod_default(cls, **overrides) -> "Recipe":
        return cls(**overrides)

    @classmethod
    def classifier_default(cls, **overrides) -> "Recipe":
        base = dict(
            optimizer="sgd-momentum",
            lr=0.1,
            weight_decay=5e-4,
            schedule=ScheduleSpec("multistep", 0.1, milestones=(60, 120, 160, 200), factor=0.2),
            batch_size=128,
            epochs=240,
        )
        base.update(overrides)
        return cls(**base)

    def scaled_to(self, epochs: int) -> "Recipe":
        """Same recipe over ``epochs``, with multistep milestones moved proportionally."""
        sched = self.schedule
        if sched.kind == "multistep":
            ms = sorted({max(1, round(m * epochs / self.epochs)) for m in sched.milestones if m < self.epochs})
            sched = replace(sched, milestones=tuple(ms))
        return replace(self, epochs=epochs, schedule=sched)

    def make_optimizer(self, params) -> Optimizer:
        if self.optimizer == "adam":
            return Optimizer.adam(params, self.lr, self.beta1, self.beta2, weight_decay=self.weight_decay)
        return Optimizer.sgd(params, self.lr, self.momentum, self.weight_decay)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = list(self.loss)
        d["schedule"]["milestones"] = list(self.schedule.milestones)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "Recipe":
        if not isinstance(d, dict):
            raise ConfigError("recipe must be a JSON object")
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown recipe keys: {sorted(unknown)}")
        d = dict(d)
        if "schedule" in d:
            s = dict(d["schedule"])
            s.setdefault("base_lr", d.get("lr", cls.lr))
            try:
                d["schedule"] = ScheduleSpec(**s)
            except TypeError as exc:
                raise ConfigError(f"malformed schedule: {exc}") from None
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"malformed recipe: {exc}") from None


def load_recipe(path) -> Recipe:
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read recipe {path}: {exc}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe is not valid JSON: {exc}") from None
    return Recipe.from_dict(data)


# ---------------------------------------------------------------------------
# threading


def thread_limit(strict: bool):
    """Context that pins BLAS to one thread in strict mode."""
    if not strict:
        return nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=1)


class Prefetcher:
    """Runs ``make_batch(i)`` for ``i`` in order on a worker thread through a bounded queue.

    Batches come out in index order whatever the thread timing, so results
    do not depend on whether prefetching is enabled.
    """

    _DONE = object()

    def __init__(self, make_batch: Callable[[int], object], count: int, depth: int = 2):
        self._make = make_batch
        self._count = count
        self._queue: queue.Queue = queue.Queue(maxsize=max(1, depth))
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        try:
            for i in range(self._count):
                if self._stop.is_set():
                    return
                self._queue.put(self._make(i))
        except BaseException as exc:  # surfaced in the consumer thread
            self._queue.put(exc)
        self._queue.put(self._DONE)

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._DONE:
                return
            if isinstance(item, BaseException):
                raise item
            yield item

    def close(self):
        self._stop.set()
        while self._thread.is_alive():
            try:
                self._queue.get_nowait()
            except queue.Empty:
                self._thread.join(timeout=0.05)


def _batches(make_batch, count, recipe: Recipe):
    if recipe.strict_deterministic or recipe.prefetch < 1:
        for i in range(count):
            yield make_batch(i)
        return
    pre = Prefetcher(make_batch, count, recipe.prefetch)
    try:
        yield from pre
    finally:
        pre.close()


# ---------------------------------------------------------------------------
# SOD training


@dataclass
class TrainResult:
    epoch_losses: list[float] = field(default_factory=list)
    step_losses: list[float] = field(default_factory=list)
    components: list[dict] = field(default_factory=list)
    best_loss: float = math.inf
    best_epoch: int = -1
    steps: int = 0
    train_top1: list[float] = field(default_factory=list)
    train_top5: list[float] = field(default_factory=list)
    eval_top1: list[float] = field(default_factory=list)
    eval_top5: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _network_dtype(network, recipe: Recipe):
    want = np.dtype(recipe.dtype)
    if network.dtype != want:
        raise ConfigError(f"network is {network.dtype} but the recipe asks for {want}")
    return want


def train_sod(
    network,
    images: np.ndarray,
    masks: np.ndarray,
    recipe: Recipe | None = None,
    checkpoint_dir=None,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Train a saliency network on ``images (n, 3, h, w)`` and binary ``masks (n, 1, h, w)``.

    An epoch is one pass over a fresh permutation.  Training stops after
    ``recipe.epochs`` epochs or ``recipe.max_steps`` steps, whichever is first;
    a partial final epoch still records its mean loss.
    """
    recipe = recipe or Recipe.sod_default()
    n = len(images)
    if n == 0:
        raise ConfigError("training set is empty")
    if masks.shape != (n, 1) + images.shape[2:]:
        raise ShapeError(f"masks {masks.shape} do not match images {images.shape}")
    dtype = _network_dtype(network, recipe)
    images = np.asarray(images, dtype=dtype)
    masks = np.asarray(masks, dtype=dtype)
    rng = np.random.default_rng(recipe.seed)
    opt = recipe.make_optimizer(network.parameters())
    result = TrainResult()
    per_epoch = math.ceil(n / recipe.batch_size)
    size = images.shape[2:]

    with thread_limit(recipe.strict_deterministic):
        network.train()
        for epoch in range(recipe.epochs):
            if recipe.max_steps is not None and result.steps >= recipe.max_steps:
                break
            lr = schedule_lr(recipe.schedule, epoch)
            order = rng.permutation(n)
            steps = per_epoch
            if recipe.max_steps is not None:
                steps = min(steps, recipe.max_steps - result.steps)
            aug = [
                [sample_augment_params(rng, size) for _ in order[b * recipe.batch_size:(b + 1) * recipe.batch_size]]
                if recipe.augment else None
                for b in range(steps)
            ]

            def make_batch(b, order=order, aug=aug):
                idx = order[b * recipe.batch_size:(b + 1) * recipe.batch_size]
                x, y = images[idx], masks[idx]
                if aug[b] is not None:
                    pairs = [apply_augment(x[i], y[i], p) for i, p in enumerate(aug[b])]
                    x = np.stack([p[0] for p in pairs])
                    y = np.stack([p[1] for p in pairs])
                return x, y

            losses = []
            for b, (x, y) in enumerate(_batches(make_batch, steps, recipe)):
                opt.zero_grad()
                s = network.forward(x)
                value, grad = hybrid_loss(s, y, recipe.loss)
                if not np.isfinite(value.total):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                network.backward(grad.astype(dtype, copy=False))
                opt.step(lr)
                losses.append(value.total)
                result.step_losses.append(value.total)
                result.components.append(value.components())
                result.steps += 1
            mean = float(np.mean(losses))
            result.epoch_losses.append(mean)
            log.info("epoch %d lr %.3g loss %.5f", epoch, lr, mean)
            if on_epoch is not None:
                on_epoch(epoch, mean)
            if checkpoint_dir is not None:
                _epoch_checkpoints(network, opt, checkpoint_dir, recipe, epoch, mean, result)
            if mean < result.best_loss:
                result.best_loss, result.best_epoch = mean, epoch
    return result


def _epoch_checkpoints(network, opt, directory, recipe: Recipe, epoch: int, loss: float, result: TrainResult):
    from .checkpoint import save_checkpoint

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    extra = {"epoch": epoch, "loss": loss, "recipe": recipe.to_dict()}
    if loss < result.best_loss:
        save_checkpoint(directory / "best.lmfk", network, opt.state, extra)
    if recipe.checkpoint_every and (epoch + 1) % recipe.checkpoint_every == 0:
        save_checkpoint(directory / "last.lmfk", network, opt.state, extra)


def predict(network, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Eval-mode forward in batches."""
    network.eval()
    outs = [network.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


# ---------------------------------------------------------------------------
# classification


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    n, c = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if labels.min(initial=0) < 0 or labels.max(initial=0) >= c:
        raise LabelRangeError(f"labels must lie in [0, {c})")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    loss = -logp[np.arange(n), labels].mean()
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return float(loss), grad / n


def topk_accuracy(logits: np.ndarray, labels: np.ndarray, k: int = 1) -> float:
    """Fraction of rows whose label is among the ``k`` largest logits (ties broken by index)."""
    labels = np.asarray(labels)
    k = min(k, logits.shape[1])
    top = np.argsort(-logits, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(top == labels[:, None], axis=1)))


def classifier_logits(network, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
    network.eval()
    return np.concatenate(
        [network.forward(images[i:i + batch_size]) for i in range(0, len(images), batch_size)], axis=0
    )


def train_classifier(
    network,
    images: np.ndarray,
    labels: np.ndarray,
    recipe: Recipe | None = None,
    eval_images: np.ndarray | None = None,
    eval_labels: np.ndarray | None = None,
    checkpoint_dir=None,
    eval_every: int = 1,
    on_epoch: Callable[[int, float], None] | None = None,
) -> TrainResult:
    """Softmax cross-entropy training.

    Every ``eval_every`` epochs, and after the last one, top-1/top-5 accuracy
    is measured in eval mode on the training set and on the optional held-out
    set.  ``eval_every=0`` keeps only the final measurement.
    """
    recipe = recipe or Recipe.classifier_default()
    n = len(images)
    if n == 0:
        raise ConfigError("training set is empty")
    labels = np.asarray(labels, dtype=np.int64)
    if labels.min() < 0 or labels.max() >= network.num_classes:
        raise LabelRangeError(f"labels must lie in [0, {network.num_classes})")
    dtype = _network_dtype(network, recipe)
    images = np.asarray(images, dtype=dtype)
    rng = np.random.default_rng(recipe.seed)
    opt = recipe.make_optimizer(network.parameters())
    result = TrainResult()
    per_epoch = math.ceil(n / recipe.batch_size)

    with thread_limit(recipe.strict_deterministic):
        for epoch in range(recipe.epochs):
            if recipe.max_steps is not None and result.steps >= recipe.max_steps:
                break
            network.train()
            lr = schedule_lr(recipe.schedule, epoch)
            order = rng.permutation(n)
            steps = per_epoch
            if recipe.max_steps is not None:
                steps = min(steps, recipe.max_steps - result.steps)
            seeds = rng.integers(0, 2**63 - 1, steps)

            def make_batch(b, order=order, seeds=seeds):
                idx = order[b * recipe.batch_size:(b + 1) * recipe.batch_size]
                x = images[idx]
                if recipe.augment:
                    x = augment_cifar(x, np.random.default_rng(seeds[b]))
                return x, labels[idx]

            losses = []
            for b, (x, y) in enumerate(_batches(make_batch, steps, recipe)):
                opt.zero_grad()
                logits = network.forward(x)
                loss, grad = softmax_cross_entropy(logits, y)
                if not np.isfinite(loss):
                    raise NumericalError(f"non-finite loss at epoch {epoch}, batch {b}")
                network.backward(grad.astype(dtype, copy=False))
                opt.step(lr)
                losses.append(loss)
                result.step_losses.append(loss)
                result.steps += 1
            mean = float(np.mean(losses))
            result.epoch_losses.append(mean)
            last = epoch == recipe.epochs - 1 or (
                recipe.max_steps is not None and result.steps >= recipe.max_steps
            )
            if not (last or (eval_every and (epoch + 1) % eval_every == 0)):
                log.info("epoch %d lr %.3g loss %.4f", epoch, lr, mean)
            else:
                _record_accuracy(network, images, labels, eval_images, eval_labels, result)
            if on_epoch is not None:
                on_epoch(epoch, mean)
            if checkpoint_dir is not None:
                _epoch_checkpoints(network, opt, checkpoint_dir, recipe, epoch, mean, result)
            if mean < result.best_loss:
                result.best_loss, result.best_epoch = mean, epoch
    return result


def _record_accuracy(network, images, labels, eval_images, eval_labels, result: TrainResult):
    logits = classifier_logits(network, images)
    result.train_top1.append(topk_accuracy(logits, labels, 1))
    result.train_top5.append(topk_accuracy(logits, labels, 5))
    if eval_images is not None:
        logits = classifier_logits(network, np.asarray(eval_images, dtype=network.dtype))
        result.eval_top1.append(topk_accuracy(logits, np.asarray(eval_labels), 1))
        result.eval_top5.append(topk_accuracy(logits, np.asarray(eval_labels), 5))
    log.info("train top1 %.4f%s", result.train_top1[-1],
             f" eval top1 {result.eval_top1[-1]:.4f}" if result.eval_top1 else "")


def packaged_recipe(name: str) -> Recipe:
    """Load a recipe shipped with the package (``sod``, ``cifar``)."""
    from importlib import resources

    text = (resources.files("lmfnet") / "configs" / f"recipe_{name}.json").read_text(encoding="utf-8")
    try:
        return Recipe.from_dict(json.loads(text))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"recipe is not valid JSON: {exc}") from None
