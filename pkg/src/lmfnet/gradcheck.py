"""Central finite-difference gradient checking.

A check compares analytic gradients with ``(f(x+eps) - f(x-eps)) / 2eps`` on
a sample of entries per tensor.  The error for one tensor is
``max|a - n| / max(max|a|, max|n|, tiny)`` over the sampled entries.

Networks built from ReLU and max pooling are piecewise smooth, and at
``eps=1e-4`` a perturbation of an early weight routinely moves some
pre-activation across zero somewhere in the net.  With ``freeze_gates`` the
gate decisions recorded at the base point are replayed during the perturbed
evaluations, which checks the backward pass against the exact local
derivative the forward pass defines.  Live evaluations still run so that the
number of entries whose stencil crossed a gate is reported.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels as K

TINY = 1e-30


@dataclass
class TensorCheck:
    name: str
    max_rel_error: float
    entries: int
    gate_crossings: int = 0
    finite: bool = True


@dataclass
class GradCheckReport:
    eps: float
    tensors: list[TensorCheck] = field(default_factory=list)
    frozen_gates: bool = False

    @property
    def max_rel_error(self) -> float:
        return max((t.max_rel_error for t in self.tensors), default=0.0)

    @property
    def worst(self) -> TensorCheck | None:
        return max(self.tensors, key=lambda t: t.max_rel_error, default=None)

    @property
    def gate_crossings(self) -> int:
        return sum(t.gate_crossings for t in self.tensors)

    def passed(self, tol: float = 1e-4) -> bool:
        return all(t.finite and t.max_rel_error < tol for t in self.tensors)

    def to_dict(self) -> dict:
        return {
            "eps": self.eps,
            "frozen_gates": self.frozen_gates,
            "max_rel_error": self.max_rel_error,
            "gate_crossings": self.gate_crossings,
            "tensors": [vars(t) for t in self.tensors],
        }


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    if analytic.size == 0:
        return 0.0
    if not (np.all(np.isfinite(analytic)) and np.all(np.isfinite(numeric))):
        return float("inf")
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), TINY)
    return float(np.abs(analytic - numeric).max() / scale)


def grad_check(
    loss_fn: Callable[[], float],
    grad_fn: Callable[[], dict[str, np.ndarray]],
    tensors: dict[str, np.ndarray],
    eps: float = 1e-4,
    max_entries: int | None = None,
    seed: int = 0,
    freeze_gates: bool = False,
    count_crossings: bool = True,
) -> GradCheckReport:
    """Check ``grad_fn`` against central differences of ``loss_fn``.

    ``tensors`` maps names to the arrays ``loss_fn`` reads; they are perturbed
    in place and restored.  ``grad_fn`` runs forward and backward at the base
    point and returns analytic gradients keyed like ``tensors``.
    """
    rng = np.random.default_rng(seed)
    report = GradCheckReport(eps=eps, frozen_gates=freeze_gates)

    base = K.GateTrace()
    with K.gate_trace(base):
        grads = grad_fn()
    grads = {k: np.array(v, dtype=np.float64, copy=True) for k, v in grads.items()}

    def live():
        t = K.GateTrace()
        with K.gate_trace(t):
            value = loss_fn()
        return value, t

    def frozen():
        with K.gate_trace(K.GateTrace("replay", base.gates)):
            return loss_fn()

    for name, arr in tensors.items():
        if name not in grads:
            raise KeyError(f"no analytic gradient for {name!r}")
        if not arr.flags.c_contiguous:
            raise ValueError(f"tensor {name!r} must be C-contiguous to be perturbed in place")
        flat = arr.reshape(-1)
        n = flat.size
        idx = np.arange(n) if max_entries is None or n <= max_entries else rng.choice(n, max_entries, replace=False)
        analytic = grads[name].reshape(-1)[idx]
        numeric = np.empty(len(idx))
        crossings = 0
        finite = True

        def side(value):
            flat[i] = value
            if not freeze_gates:
                out, trace = live()
                return out, not trace.same_as(base)
            out = frozen()
            return out, count_crossings and not live()[1].same_as(base)

        for j, i in enumerate(idx):
            orig = flat[i]
            up, crossed_up = side(orig + eps)
            down, crossed_down = side(orig - eps)
            flat[i] = orig
            crossings += crossed_up or crossed_down
            if not (np.isfinite(up) and np.isfinite(down)):
                finite = False
            numeric[j] = (up - down) / (2 * eps)
        err = relative_error(analytic, numeric) if finite else float("inf")
        report.tensors.append(TensorCheck(name, err, len(idx), crossings, finite))
    return report


# ---------------------------------------------------------------------------
# suites


def _kernel_cases(rng):
    x = rng.standard_normal((2, 3, 4, 4))
    y = rng.standard_normal((2, 2, 4, 4))
    dw = rng.standard_normal((3, 1, 3, 3))
    pw = rng.standard_normal((4, 3, 1, 1))
    bias = rng.standard_normal(4)
    gamma, beta = rng.uniform(0.5, 1.5, 3), rng.standard_normal(3)
    lin_x, lin_w, lin_b = rng.standard_normal((2, 5)), rng.standard_normal((3, 5)), rng.standard_normal(3)

    cases = {
        "conv2d_depthwise": (
            lambda: K.conv2d_depthwise(x, dw, K.ConvGeometry(3, 2)),
            lambda r, c: dict(zip(("x", "w"), K.conv2d_depthwise_backward(r, c))),
            {"x": x, "w": dw},
        ),
        "conv2d_pointwise": (
            lambda: K.conv2d_pointwise(x, pw, bias),
            lambda r, c: dict(zip(("x", "w", "b"), K.conv2d_pointwise_backward(r, c))),
            {"x": x, "w": pw, "b": bias},
        ),
        "linear": (
            lambda: K.linear(lin_x, lin_w, lin_b),
            lambda r, c: dict(zip(("x", "w", "b"), K.linear_backward(r, c))),
            {"x": lin_x, "w": lin_w, "b": lin_b},
        ),
        "maxpool2": (lambda: K.maxpool2(x), lambda r, c: {"x": K.maxpool2_backward(r, c)}, {"x": x}),
        "upsample_bilinear2": (
            lambda: K.upsample_bilinear2(x),
            lambda r, c: {"x": K.upsample_bilinear2_backward(r, c)},
            {"x": x},
        ),
        "relu": (lambda: K.relu(x), lambda r, c: {"x": K.relu_backward(r, c)}, {"x": x}),
        "sigmoid": (lambda: K.sigmoid(x), lambda r, c: {"x": K.sigmoid_backward(r, c)}, {"x": x}),
        "global_avg_pool": (
            lambda: K.global_avg_pool(x),
            lambda r, c: {"x": K.global_avg_pool_backward(r, c)},
            {"x": x},
        ),
        "concat_channels": (
            lambda: K.concat_channels([x, y]),
            lambda r, c: dict(zip(("x", "y"), K.split_channels(r, c))),
            {"x": x, "y": y},
        ),
    }
    for mode in (True, False):
        cases[f"batchnorm_{'train' if mode else 'eval'}"] = (
            (lambda m: lambda: K.batchnorm(x, gamma, beta, np.zeros(3), np.ones(3), m))(mode),
            lambda r, c: dict(zip(("x", "gamma", "beta"), K.batchnorm_backward(r, c))),
            {"x": x, "gamma": gamma, "beta": beta},
        )
    return cases


def kernel_suite(eps: float = 1e-4, seed: int = 0) -> dict[str, GradCheckReport]:
    """Check every differentiable kernel on a small random case."""
    rng = np.random.default_rng(seed)
    reports = {}
    for name, (fwd, bwd, tensors) in _kernel_cases(rng).items():
        probe = np.random.default_rng(seed + 1).standard_normal(fwd()[0].shape)

        def loss(fwd=fwd, probe=probe):
            return float((fwd()[0] * probe).sum())

        def grads(fwd=fwd, bwd=bwd, probe=probe):
            return bwd(probe, fwd()[1])

        reports[name] = grad_check(loss, grads, tensors, eps=eps, seed=seed)
    return reports


def loss_suite(eps: float = 1e-4, seed: int = 0, size: int = 16) -> dict[str, GradCheckReport]:
    from .losses import COMPONENTS, hybrid_loss

    rng = np.random.default_rng(seed)
    s = rng.uniform(0.05, 0.95, (2, 1, size, size))
    g = (rng.random((2, 1, size, size)) > 0.5).astype(np.float64)
    reports = {}
    for subset in [(c,) for c in COMPONENTS] + [COMPONENTS]:
        name = "+".join(subset)
        reports[name] = grad_check(
            lambda subset=subset: hybrid_loss(s, g, subset)[0].total,
            lambda subset=subset: {"S": hybrid_loss(s, g, subset)[1]},
            {"S": s},
            eps=eps,
            seed=seed,
        )
    return reports


def disc_mask(n: int, h: int, w: int, rng) -> np.ndarray:
    """Binary masks holding one random disc each."""
    yy, xx = np.mgrid[0:h, 0:w]
    out = np.zeros((n, 1, h, w))
    for i in range(n):
        cy, cx = rng.uniform(0.3, 0.7) * h, rng.uniform(0.3, 0.7) * w
        r = rng.uniform(0.15, 0.3) * min(h, w)
        out[i, 0] = ((yy - cy) ** 2 + (xx - cx) ** 2 <= r * r).astype(np.float64)
    return out


def network_check(
    network,
    batch: int = 2,
    eps: float = 1e-4,
    entries_per_tensor: int = 1,
    seed: int = 0,
    components=None,
    freeze_gates: bool = True,
    count_crossings: bool = True,
) -> GradCheckReport:
    """Check a saliency network end to end through the hybrid loss, in train mode.

    Batch 2 keeps batch-norm statistics at the 2x2 bottleneck from being so
    few samples that the second-order term of the central difference dominates.
    """
    from .losses import COMPONENTS, hybrid_loss

    components = components or COMPONENTS
    rng = np.random.default_rng(seed)
    h, w = network.config.input_size
    images = rng.uniform(0.0, 1.0, (batch, network.config.in_channels, h, w))
    target = disc_mask(batch, h, w, rng)
    network.train()

    def loss():
        return hybrid_loss(network.forward(images), target, components)[0].total

    def grads():
        network.zero_grad()
        _, g = hybrid_loss(network.forward(images), target, components)
        dx = network.backward(g)
        out = {name: p.grad for name, p in network.named_parameters()}
        out["input"] = dx
        return out

    tensors = {name: p.value for name, p in network.named_parameters()}
    tensors["input"] = images
    return grad_check(
        loss, grads, tensors, eps=eps, max_entries=entries_per_tensor, seed=seed,
        freeze_gates=freeze_gates, count_crossings=count_crossings,
    )
