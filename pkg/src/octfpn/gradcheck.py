"""Finite-difference checks for every primitive and for a small fusion graph."""

from __future__ import annotations

from typing import Callable

from . import autodiff as ad
from . import rng as rng_mod
from .backbone import BackboneConfig
from .fusion import FusionConfig, build_model
from .layers import loss_targets

STEP = 1e-5
TOLERANCE = 1e-4

# (name, operand shapes, builder); every operand becomes a trainable parameter
_PRIMITIVE_CASES: list[tuple[str, list[tuple], Callable]] = [
    ("add", [(2, 3, 4), (4,)], lambda t, a, b: t.add(a, b)),
    ("subtract", [(2, 3), (2, 3)], lambda t, a, b: t.subtract(a, b)),
    ("multiply", [(2, 3), (2, 3)], lambda t, a, b: t.multiply(a, b)),
    ("matmul", [(3, 4), (4, 2)], lambda t, a, b: t.matmul(a, b)),
    ("conv2d_3x3_same", [(2, 5, 5, 2), (3, 3, 2, 3)], lambda t, a, b: t.conv2d(a, b, "same")),
    ("conv2d_3x3_valid", [(2, 5, 5, 2), (3, 3, 2, 3)], lambda t, a, b: t.conv2d(a, b, "valid")),
    ("conv2d_1x1", [(2, 4, 4, 3), (1, 1, 3, 2)], lambda t, a, b: t.conv2d(a, b, "same")),
    ("max_pool", [(2, 4, 4, 2)], lambda t, a: t.max_pool(a)),
    ("upsample", [(2, 3, 3, 2)], lambda t, a: t.upsample(a)),
    ("relu", [(2, 3, 3, 2)], lambda t, a: t.relu(a)),
    ("concat", [(2, 3), (2, 2)], lambda t, a, b: t.concat([a, b])),
    ("global_avg_pool", [(2, 3, 3, 4)], lambda t, a: t.global_avg_pool(a)),
    ("dropout_inference", [(2, 5)], lambda t, a: t.dropout(a, 0.5)),
    ("softmax", [(3, 4)], lambda t, a: t.softmax(a)),
    ("log", [(2, 3)], lambda t, a: t.log(a)),
    ("reshape", [(2, 2, 2, 3)], lambda t, a: t.reshape(a, (12,))),
    ("scale", [(2, 3)], lambda t, a: t.scale(a, -2.5)),
]


def primitive_case(name: str, shapes, build, seed: int = 0):
    """A tape computing ``sum(op(operands) * R)`` for a fixed random ``R``."""
    rng = rng_mod.stream(seed, "gradcheck", name)
    tape = ad.Tape()
    params = {}
    ids = []
    for j, shape in enumerate(shapes):
        pname = f"operand{j}"
        ids.append(tape.parameter(pname, shape))
        value = rng.normal(size=shape)
        if name == "log":
            value = rng.uniform(0.5, 2.0, size=shape)
        params[pname] = value
    out = build(tape, *ids)
    # a random projection makes every output element matter
    proj = tape.parameter("projection", tape.shape(out), trainable=False)
    params["projection"] = rng.normal(size=tape.shape(out))
    loss = tape.sum(tape.multiply(out, proj))
    return tape, loss, params


def micro_fusion_case(seed: int = 0):
    """Small but complete fusion graph: 16x16 input, four scales, top-3, softmax + CCE."""
    backbone = BackboneConfig(((1, 3), (1, 4), (1, 5), (1, 6)), (16, 16, 1), "gradcheck")
    fusion = FusionConfig(top_k=3, lateral_channels=3, head_units=5, n_classes=3)
    with ad.precision(64):
        model = build_model(backbone, fusion, seed=seed)
    rng = rng_mod.stream(seed, "gradcheck", "micro")
    params = dict(model.params)
    # non-zero biases keep units away from exact ReLU kinks at zero
    for name in params:
        if name.endswith("/bias"):
            params[name] = rng.normal(0.0, 0.1, size=params[name].shape)
    inputs = {
        "image": rng.normal(size=(2, 16, 16, 1)),
        "targets": loss_targets([0, 2], [0.26, 0.29, 0.45], 3),
    }
    return model.tape, model.loss, inputs, params


def dense_head_case(seed: int = 0):
    """conv -> GAP -> dense -> softmax -> CCE."""
    rng = rng_mod.stream(seed, "gradcheck", "dense_head")
    tape = ad.Tape()
    x = tape.input("image", (None, 6, 6, 2))
    k = tape.parameter("conv/kernel", (3, 3, 2, 4))
    b = tape.parameter("conv/bias", (4,))
    h = tape.relu(tape.add(tape.conv2d(x, k), b))
    w = tape.parameter("dense/kernel", (4, 3))
    c = tape.parameter("dense/bias", (3,))
    probs = tape.softmax(tape.add(tape.matmul(tape.global_avg_pool(h), w), c))
    t = tape.input("targets", (None, 3))
    loss = tape.scale(tape.sum(tape.multiply(t, tape.log(probs))), -1.0)
    params = {"conv/kernel": rng.normal(size=(3, 3, 2, 4)), "conv/bias": rng.normal(0, 0.1, size=4),
              "dense/kernel": rng.normal(size=(4, 3)), "dense/bias": rng.normal(0, 0.1, size=3)}
    inputs = {"image": rng.normal(size=(3, 6, 6, 2)), "targets": loss_targets([0, 1, 2], [1, 1, 1], 3)}
    return tape, loss, inputs, params


def run_suite(step: float = STEP, seed: int = 0) -> list[tuple[str, float]]:
    """Max relative error per case, in 64-bit precision."""
    results = []
    with ad.precision(64):
        for name, shapes, build in _PRIMITIVE_CASES:
            tape, loss, params = primitive_case(name, shapes, build, seed)
            results.append((name, ad.grad_check(tape, loss, {}, params, step)))
        tape, loss, inputs, params = dense_head_case(seed)
        results.append(("conv_gap_dense_cce", ad.grad_check(tape, loss, inputs, params, step)))
        tape, loss, inputs, params = micro_fusion_case(seed)
        results.append(("micro_fusion_graph", ad.grad_check(tape, loss, inputs, params, step)))
    return results
