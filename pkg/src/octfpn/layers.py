"""Layer definitions on top of the tape primitives, plus the weighted CCE loss.

The module has two faces.  The functional helpers (:func:`conv2d`,
:func:`global_avg_pool`, ...) evaluate a single primitive eagerly on arrays
and accept either a single ``(h, w, c)`` map or a batch.  :class:`GraphBuilder`
appends layers to a :class:`~octfpn.autodiff.Tape` and owns parameter
initialisation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from . import rng as rng_mod
from .autodiff import PRIMITIVES, GraphError, Tape, default_dtype

LOG_FLOOR = 1e-12


# ---------------------------------------------------------------------------
# layer specs
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Conv2D:
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: str = "same"
    relu: bool = True

    def __post_init__(self):
        if self.kernel_size not in (1, 3):
            raise ValueError(f"kernel size must be 1 or 3, got {self.kernel_size}")
        if self.padding not in ("same", "valid"):
            raise ValueError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.stride != 1:
            raise ValueError("only stride 1 convolutions are supported")


@dataclass(frozen=True)
class Dense:
    out_units: int
    relu: bool = False


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0 <= self.rate < 1:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class MaxPool2x2:
    pass


@dataclass(frozen=True)
class GlobalAvgPool:
    pass


@dataclass(frozen=True)
class UpsampleNearest2x:
    pass


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Softmax:
    pass


LayerSpec = Union[Conv2D, Dense, Dropout, MaxPool2x2, GlobalAvgPool, UpsampleNearest2x, ReLU, Softmax]


# ---------------------------------------------------------------------------
# graph construction
# ---------------------------------------------------------------------------


def he_normal(seed: int, name: str, shape, fan_in: int) -> np.ndarray:
    std = np.sqrt(2.0 / fan_in)
    value = rng_mod.stream(seed, "init", name).normal(0.0, std, size=shape)
    return value.astype(default_dtype())


class GraphBuilder:
    """Appends layers to a tape and He-initialises their parameters.

    Every parameter is drawn from its own named stream, so a layer's initial
    weights depend only on ``seed`` and the parameter name.
    """

    def __init__(self, tape: Tape | None = None, seed: int = 0, materialize: bool = True):
        self.tape = tape if tape is not None else Tape()
        self.seed = seed
        # materialize=False records structure only (cheap parameter counting)
        self.materialize = materialize
        self.params: dict[str, np.ndarray] = {}

    def weight(self, name: str, shape, fan_in: int) -> int:
        if self.materialize:
            self.params[name] = he_normal(self.seed, name, shape, fan_in)
        return self.tape.parameter(name, shape)

    def bias(self, name: str, size: int) -> int:
        if self.materialize:
            self.params[name] = np.zeros(size, dtype=default_dtype())
        return self.tape.parameter(name, (size,))

    def conv(self, x: int, name: str, spec: Conv2D) -> int:
        cin = self.tape.shape(x)[-1]
        k = spec.kernel_size
        kernel = self.weight(f"{name}/kernel", (k, k, cin, spec.out_channels), k * k * cin)
        bias = self.bias(f"{name}/bias", spec.out_channels)
        y = self.tape.conv2d(x, kernel, spec.padding, name=f"{name}/conv")
        y = self.tape.add(y, bias, name=f"{name}/preact" if spec.relu else name)
        return self.tape.relu(y, name=name) if spec.relu else y

    def dense(self, x: int, name: str, spec: Dense) -> int:
        fan_in = self.tape.shape(x)[-1]
        kernel = self.weight(f"{name}/kernel", (fan_in, spec.out_units), fan_in)
        bias = self.bias(f"{name}/bias", spec.out_units)
        y = self.tape.matmul(x, kernel, name=f"{name}/matmul")
        y = self.tape.add(y, bias, name=f"{name}/preact" if spec.relu else name)
        return self.tape.relu(y, name=name) if spec.relu else y

    def layer(self, x: int, name: str, spec: LayerSpec) -> int:
        if isinstance(spec, Conv2D):
            return self.conv(x, name, spec)
        if isinstance(spec, Dense):
            return self.dense(x, name, spec)
        if isinstance(spec, Dropout):
            return self.tape.dropout(x, spec.rate, name=name)
        if isinstance(spec, MaxPool2x2):
            return self.tape.max_pool(x, name=name)
        if isinstance(spec, GlobalAvgPool):
            return self.tape.global_avg_pool(x, name=name)
        if isinstance(spec, UpsampleNearest2x):
            return self.tape.upsample(x, name=name)
        if isinstance(spec, ReLU):
            return self.tape.relu(x, name=name)
        if isinstance(spec, Softmax):
            return self.tape.softmax(x, name=name)
        raise TypeError(f"not a layer spec: {spec!r}")


def cce_graph(tape: Tape, probs: int, name: str = "loss") -> tuple[int, int]:
    """Append a weighted CCE loss reading per-sample targets from an input.

    The ``targets`` input holds ``weight[y] / batch`` at the true class and 0
    elsewhere (see :func:`loss_targets`), so the loss node evaluates to
    ``(1/B) sum_b weight[y_b] * -log p[b, y_b]``.
    """
    n_classes = tape.shape(probs)[-1]
    targets = tape.input("targets", (None, n_classes))
    logp = tape.log(probs, floor=LOG_FLOOR, name=f"{name}/log")
    picked = tape.multiply(targets, logp, name=f"{name}/picked")
    loss = tape.scale(tape.sum(picked, name=f"{name}/sum"), -1.0, name=name)
    return targets, loss


def loss_targets(labels, weights, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=int)
    weights = np.asarray(weights, dtype=np.float64)
    if len(weights) != n_classes:
        raise ValueError(f"{len(weights)} class weights for {n_classes} classes")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise ValueError(f"label index out of range for {n_classes} classes")
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = weights[labels] / max(labels.size, 1)
    return out


# ---------------------------------------------------------------------------
# eager helpers
# ---------------------------------------------------------------------------


def _eager(op, xs, **attrs):
    return PRIMITIVES[op].forward(list(xs), attrs, {"training": False})


def _batched(x):
    x = np.asarray(x)
    return (x[None], True) if x.ndim == 3 else (x, False)


def conv2d(x, kernels, bias=None, padding: str = "same") -> np.ndarray:
    """Cross-correlate ``x`` (``(h, w, c)`` or batched) with ``(k, k, cin, cout)`` kernels."""
    xb, single = _batched(x)
    kernels = np.asarray(kernels)
    if xb.shape[-1] != kernels.shape[2]:
        raise GraphError(f"conv2d channel mismatch: input has {xb.shape[-1]}, kernel expects {kernels.shape[2]}")
    out = _eager("conv2d", [xb, kernels], padding=padding)
    if bias is not None:
        out = out + np.asarray(bias)
    return out[0] if single else out


def max_pool2x2(x) -> np.ndarray:
    xb, single = _batched(x)
    out = _eager("max_pool", [xb])
    return out[0] if single else out


def upsample_nearest2x(x) -> np.ndarray:
    xb, single = _batched(x)
    out = _eager("upsample", [xb])
    return out[0] if single else out


def global_avg_pool(x) -> np.ndarray:
    xb, single = _batched(x)
    out = _eager("global_avg_pool", [xb])
    return out[0] if single else out


def softmax(z) -> np.ndarray:
    return _eager("softmax", [np.asarray(z, dtype=float)])


def weighted_cce(probs, labels, weights) -> float:
    """Mean over the batch of ``weight[y] * -log p[y]``, log argument clamped at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels, dtype=int)
    weights = np.asarray(weights, dtype=np.float64)
    if probs.ndim != 2 or probs.shape[0] != labels.size:
        raise ValueError(f"probs {probs.shape} do not match {labels.size} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= probs.shape[1]):
        raise ValueError(f"label index out of range for {probs.shape[1]} classes")
    if np.any(weights <= 0):
        raise ValueError("class weights must be positive")
    picked = probs[np.arange(labels.size), labels]
    return float(np.mean(weights[labels] * -np.log(np.maximum(picked, LOG_FLOOR))))
