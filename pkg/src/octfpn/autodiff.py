"""Static computation tapes with reverse-mode differentiation.

A :class:`Tape` records a graph of primitive operations over named inputs and
named parameters.  Values are plain numpy arrays laid out channels-last with a
leading batch axis, e.g. ``(batch, height, width, channels)``.  The tape only
holds structure; parameter *values* live in an ordinary ``dict`` so the same
tape can be evaluated with different weights (training, transfer, gradient
checks).

Typical use::

    tape = Tape()
    x = tape.input("x", (None, 3))
    w = tape.parameter("w", (3, 2))
    y = tape.sum(tape.matmul(x, w))
    grads = backward(tape, y, {"x": xs}, {"w": ws})
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Mapping

import numpy as np

from . import rng as rng_mod

_DTYPES = {32: np.float32, 64: np.float64}
_precision = {"dtype": np.float32}


def set_precision(bits: int) -> None:
    """Select the global floating point width (32 or 64)."""
    if bits not in _DTYPES:
        raise ValueError(f"precision must be 32 or 64 bits, got {bits}")
    _precision["dtype"] = _DTYPES[bits]


def default_dtype():
    return _precision["dtype"]


@contextlib.contextmanager
def precision(bits: int):
    previous = _precision["dtype"]
    set_precision(bits)
    try:
        yield
    finally:
        _precision["dtype"] = previous


class GraphError(ValueError):
    """Raised for malformed graphs, unbound inputs and shape mismatches."""


# ---------------------------------------------------------------------------
# primitive catalog
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Primitive:
    name: str
    infer: Callable
    forward: Callable
    backward: Callable
    stochastic: bool = False


PRIMITIVES: dict[str, Primitive] = {}


def _primitive(name, infer, stochastic=False):
    def register(cls):
        PRIMITIVES[name] = Primitive(name, infer, cls.forward, cls.backward, stochastic)
        return cls

    return register


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _broadcast_shape(a, b):
    n = max(len(a), len(b))
    a = (1,) * (n - len(a)) + tuple(a)
    b = (1,) * (n - len(b)) + tuple(b)
    out = []
    for x, y in zip(a, b):
        if x == y or y == 1:
            out.append(x)
        elif x == 1:
            out.append(y)
        elif x is None or y is None:
            out.append(y if x is None else x)
        else:
            raise GraphError(f"cannot broadcast {a} with {b}")
    return tuple(out)


def _infer_broadcast(shapes, attrs):
    return _broadcast_shape(*shapes)


@_primitive("add", _infer_broadcast)
class _Add:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0] + xs[1]

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(g, xs[1].shape)


@_primitive("subtract", _infer_broadcast)
class _Subtract:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0] - xs[1]

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return _unbroadcast(g, xs[0].shape), _unbroadcast(-g, xs[1].shape)


@_primitive("multiply", _infer_broadcast)
class _Multiply:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0] * xs[1]

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return _unbroadcast(g * xs[1], xs[0].shape), _unbroadcast(g * xs[0], xs[1].shape)


def _infer_matmul(shapes, attrs):
    a, b = shapes
    if len(a) != 2 or len(b) != 2:
        raise GraphError(f"matmul expects 2-D operands, got {a} and {b}")
    if a[1] is not None and b[0] is not None and a[1] != b[0]:
        raise GraphError(f"matmul inner dimensions differ: {a} @ {b}")
    return (a[0], b[1])


@_primitive("matmul", _infer_matmul)
class _Matmul:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0] @ xs[1]

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return g @ xs[1].T, xs[0].T @ g


def same_padding(k: int) -> tuple[int, int]:
    """Zero padding (before, after) that keeps the spatial size for stride 1."""
    deficit = k - 1
    return deficit // 2, deficit - deficit // 2


def _infer_conv(shapes, attrs):
    x, w = shapes
    if len(x) != 4 or len(w) != 4:
        raise GraphError(f"conv2d expects NHWC input and (k,k,cin,cout) kernel, got {x}, {w}")
    k = w[0]
    if w[1] != k:
        raise GraphError(f"conv2d kernel must be square, got {w}")
    if x[3] is not None and x[3] != w[2]:
        raise GraphError(f"conv2d channel mismatch: input has {x[3]}, kernel expects {w[2]}")
    if attrs["padding"] == "same":
        return (x[0], x[1], x[2], w[3])
    if attrs["padding"] == "valid":
        shrink = lambda n: None if n is None else n - k + 1  # noqa: E731
        return (x[0], shrink(x[1]), shrink(x[2]), w[3])
    raise GraphError(f"unknown padding mode {attrs['padding']!r}")


def _im2col(xp, k, h, w):
    # xp: padded (B, h+k-1, w+k-1, C) -> (B*h*w, k*k*C) ordered (di, dj, c)
    if k == 1:
        return xp.reshape(-1, xp.shape[-1])
    windows = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(1, 2))
    # windows: (B, h, w, C, k, k)
    return windows.transpose(0, 1, 2, 4, 5, 3).reshape(-1, k * k * xp.shape[-1])


@_primitive("conv2d", _infer_conv)
class _Conv2d:
    @staticmethod
    def forward(xs, attrs, ctx):
        x, w = xs
        if x.ndim != 4 or x.shape[3] != w.shape[2]:
            raise GraphError(f"conv2d channel mismatch: input {x.shape}, kernel {w.shape}")
        k = w.shape[0]
        if attrs["padding"] == "same" and k > 1:
            (top, bottom), (left, right) = same_padding(k), same_padding(k)
            xp = np.pad(x, ((0, 0), (top, bottom), (left, right), (0, 0)))
        else:
            xp = x
        b, hp, wp, _ = xp.shape
        h, wd = hp - k + 1, wp - k + 1
        cols = _im2col(xp, k, h, wd)
        ctx["cols"] = cols
        ctx["padded_shape"] = xp.shape
        return (cols @ w.reshape(-1, w.shape[3])).reshape(b, h, wd, w.shape[3])

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        x, w = xs
        k, cout = w.shape[0], w.shape[3]
        g2 = g.reshape(-1, cout)
        dw = (ctx["cols"].T @ g2).reshape(w.shape)
        if not ctx.get("need_input_grad", True):
            return None, dw
        b, h, wd, _ = g.shape
        dcols = (g2 @ w.reshape(-1, cout).T).reshape(b, h, wd, k, k, w.shape[2])
        dxp = np.zeros(ctx["padded_shape"], dtype=g.dtype)
        for di in range(k):
            for dj in range(k):
                dxp[:, di:di + h, dj:dj + wd, :] += dcols[:, :, :, di, dj, :]
        if attrs["padding"] == "same" and k > 1:
            top, _ = same_padding(k)
            left, _ = same_padding(k)
            dxp = dxp[:, top:top + x.shape[1], left:left + x.shape[2], :]
        return dxp, dw


def _infer_pool(shapes, attrs):
    (x,) = shapes
    if len(x) != 4:
        raise GraphError(f"max_pool expects NHWC input, got {x}")
    for n in x[1:3]:
        if n is not None and n % 2:
            raise GraphError(f"max_pool needs even spatial size, got {x}")
    half = lambda n: None if n is None else n // 2  # noqa: E731
    return (x[0], half(x[1]), half(x[2]), x[3])


@_primitive("max_pool", _infer_pool)
class _MaxPool:
    @staticmethod
    def forward(xs, attrs, ctx):
        (x,) = xs
        if x.shape[1] % 2 or x.shape[2] % 2:
            raise GraphError(f"max_pool needs even spatial size, got {x.shape}")
        # window members in row-major order: (0,0), (0,1), (1,0), (1,1)
        parts = [x[:, 0::2, 0::2], x[:, 0::2, 1::2], x[:, 1::2, 0::2], x[:, 1::2, 1::2]]
        out = np.maximum(np.maximum(parts[0], parts[1]), np.maximum(parts[2], parts[3]))
        # one-hot routing masks; ties go to the first member in row-major order
        taken = np.zeros(out.shape, dtype=bool)
        masks = []
        for part in parts:
            hit = (part == out) & ~taken
            taken |= hit
            masks.append(hit)
        ctx["masks"] = masks
        return out

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        (x,) = xs
        dx = np.zeros_like(x, dtype=g.dtype)
        m = ctx["masks"]
        dx[:, 0::2, 0::2] = g * m[0]
        dx[:, 0::2, 1::2] = g * m[1]
        dx[:, 1::2, 0::2] = g * m[2]
        dx[:, 1::2, 1::2] = g * m[3]
        return (dx,)


def _infer_upsample(shapes, attrs):
    (x,) = shapes
    if len(x) != 4:
        raise GraphError(f"upsample expects NHWC input, got {x}")
    dbl = lambda n: None if n is None else 2 * n  # noqa: E731
    return (x[0], dbl(x[1]), dbl(x[2]), x[3])


@_primitive("upsample", _infer_upsample)
class _Upsample:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0].repeat(2, axis=1).repeat(2, axis=2)

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        b, h, w, c = g.shape
        return (g.reshape(b, h // 2, 2, w // 2, 2, c).sum(axis=(2, 4)),)


def _same_shape(shapes, attrs):
    return shapes[0]


@_primitive("relu", _same_shape)
class _Relu:
    @staticmethod
    def forward(xs, attrs, ctx):
        return np.maximum(xs[0], 0)

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (g * (xs[0] > 0),)


def _infer_concat(shapes, attrs):
    first = shapes[0]
    for s in shapes[1:]:
        if len(s) != len(first) or s[:-1] != first[:-1]:
            raise GraphError(f"concat operands disagree outside the channel axis: {shapes}")
    widths = [s[-1] for s in shapes]
    return first[:-1] + (None if None in widths else sum(widths),)


@_primitive("concat", _infer_concat)
class _Concat:
    @staticmethod
    def forward(xs, attrs, ctx):
        return np.concatenate(xs, axis=-1)

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        splits = np.cumsum([x.shape[-1] for x in xs])[:-1]
        return tuple(np.split(g, splits, axis=-1))


def _infer_gap(shapes, attrs):
    (x,) = shapes
    if len(x) != 4:
        raise GraphError(f"global_avg_pool expects NHWC input, got {x}")
    return (x[0], x[3])


@_primitive("global_avg_pool", _infer_gap)
class _GlobalAvgPool:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0].mean(axis=(1, 2))

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        x = xs[0]
        n = x.shape[1] * x.shape[2]
        return (np.broadcast_to((g / n)[:, None, None, :], x.shape).copy(),)


@_primitive("dropout", _same_shape, stochastic=True)
class _Dropout:
    @staticmethod
    def forward(xs, attrs, ctx):
        rate = attrs["rate"]
        if not ctx["training"] or rate == 0:
            ctx["mask"] = None
            return xs[0]
        keep = ctx["rng"].random(xs[0].shape) >= rate
        mask = keep.astype(xs[0].dtype) / xs[0].dtype.type(1.0 - rate)
        ctx["mask"] = mask
        return xs[0] * mask

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (g if ctx["mask"] is None else g * ctx["mask"],)


@_primitive("softmax", _same_shape)
class _Softmax:
    @staticmethod
    def forward(xs, attrs, ctx):
        z = xs[0] - xs[0].max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)


@_primitive("log", _same_shape)
class _Log:
    @staticmethod
    def forward(xs, attrs, ctx):
        return np.log(np.maximum(xs[0], attrs["floor"]))

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        x = xs[0]
        return (np.where(x > attrs["floor"], g / np.maximum(x, attrs["floor"]), 0).astype(g.dtype),)


def _infer_reshape(shapes, attrs):
    (x,) = shapes
    target = tuple(attrs["shape"])
    known = [d for d in x[1:]]
    if None not in known and -1 not in target:
        if int(np.prod(known)) != int(np.prod(target)):
            raise GraphError(f"cannot reshape per-sample {tuple(known)} to {target}")
    if -1 in target and None not in known:
        rest = int(np.prod([d for d in target if d != -1]))
        target = tuple(int(np.prod(known)) // rest if d == -1 else d for d in target)
    return (x[0],) + target


@_primitive("reshape", _infer_reshape)
class _Reshape:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0].reshape((xs[0].shape[0],) + tuple(attrs["shape"]))

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (g.reshape(xs[0].shape),)


@_primitive("scale", _same_shape)
class _Scale:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0] * xs[0].dtype.type(attrs["factor"])

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (g * g.dtype.type(attrs["factor"]),)


@_primitive("sum", lambda shapes, attrs: ())
class _Sum:
    @staticmethod
    def forward(xs, attrs, ctx):
        return np.asarray(xs[0].sum(), dtype=xs[0].dtype)

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (np.broadcast_to(g, xs[0].shape).copy(),)


@_primitive("identity", _same_shape)
class _Identity:
    @staticmethod
    def forward(xs, attrs, ctx):
        return xs[0]

    @staticmethod
    def backward(g, xs, out, attrs, ctx):
        return (g,)


# ---------------------------------------------------------------------------
# tape
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Node:
    id: int
    op: str  # primitive name, or "input" / "parameter"
    inputs: tuple[int, ...]
    attrs: Mapping
    shape: tuple
    name: str


@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    trainable: bool
    node: int


@dataclass
class Tape:
    """Recorded graph of primitive operations in topological order."""

    nodes: list[Node] = field(default_factory=list)
    parameters: dict[str, ParamSpec] = field(default_factory=dict)
    inputs: dict[str, int] = field(default_factory=dict)
    _names: dict[str, int] = field(default_factory=dict)

    def _push(self, op, inputs, attrs, shape, name):
        if name is None:
            name = f"{op}_{len(self.nodes)}"
        if name in self._names:
            raise GraphError(f"duplicate node name {name!r}")
        node = Node(len(self.nodes), op, tuple(inputs), dict(attrs), tuple(shape), name)
        self.nodes.append(node)
        self._names[name] = node.id
        return node.id

    def input(self, name: str, shape) -> int:
        """Declare a graph input; ``None`` in ``shape`` matches any size."""
        nid = self._push("input", (), {}, shape, name)
        self.inputs[name] = nid
        return nid

    def parameter(self, name: str, shape, trainable: bool = True) -> int:
        nid = self._push("parameter", (), {}, shape, name)
        self.parameters[name] = ParamSpec(name, tuple(shape), trainable, nid)
        return nid

    def apply(self, op: str, *inputs: int, name: str | None = None, **attrs) -> int:
        if op not in PRIMITIVES:
            raise GraphError(f"unknown primitive {op!r}")
        for i in inputs:
            if not 0 <= i < len(self.nodes):
                raise GraphError(f"{op}: operand {i} is not a node of this tape")
        shapes = [self.nodes[i].shape for i in inputs]
        try:
            shape = PRIMITIVES[op].infer(shapes, attrs)
        except GraphError as exc:
            raise GraphError(f"node {name or op!r}: {exc}") from None
        return self._push(op, inputs, attrs, shape, name)

    def node(self, ref) -> Node:
        return self.nodes[self._names[ref] if isinstance(ref, str) else ref]

    def id_of(self, ref) -> int:
        return self._names[ref] if isinstance(ref, str) else int(ref)

    def shape(self, ref) -> tuple:
        return self.node(ref).shape

    # convenience builders, one per primitive
    def add(self, a, b, name=None):
        return self.apply("add", a, b, name=name)

    def subtract(self, a, b, name=None):
        return self.apply("subtract", a, b, name=name)

    def multiply(self, a, b, name=None):
        return self.apply("multiply", a, b, name=name)

    def matmul(self, a, b, name=None):
        return self.apply("matmul", a, b, name=name)

    def conv2d(self, x, kernel, padding="same", name=None):
        return self.apply("conv2d", x, kernel, name=name, padding=padding)

    def max_pool(self, x, name=None):
        return self.apply("max_pool", x, name=name)

    def upsample(self, x, name=None):
        return self.apply("upsample", x, name=name)

    def relu(self, x, name=None):
        return self.apply("relu", x, name=name)

    def concat(self, xs, name=None):
        return self.apply("concat", *xs, name=name)

    def global_avg_pool(self, x, name=None):
        return self.apply("global_avg_pool", x, name=name)

    def dropout(self, x, rate, name=None):
        if not 0 <= rate < 1:
            raise GraphError(f"dropout rate must lie in [0, 1), got {rate}")
        return self.apply("dropout", x, name=name, rate=float(rate))

    def softmax(self, x, name=None):
        return self.apply("softmax", x, name=name)

    def log(self, x, floor=1e-12, name=None):
        return self.apply("log", x, name=name, floor=float(floor))

    def reshape(self, x, shape, name=None):
        return self.apply("reshape", x, name=name, shape=tuple(shape))

    def scale(self, x, factor, name=None):
        return self.apply("scale", x, name=name, factor=float(factor))

    def sum(self, x, name=None):
        return self.apply("sum", x, name=name)

    def identity(self, x, name=None):
        return self.apply("identity", x, name=name)

    def sinks(self) -> list[int]:
        used = {i for n in self.nodes for i in n.inputs}
        return [n.id for n in self.nodes if n.id not in used and n.op not in ("input", "parameter")]

    def ancestors(self, targets: Iterable[int]) -> set[int]:
        seen: set[int] = set()
        stack = list(targets)
        while stack:
            nid = stack.pop()
            if nid in seen:
                continue
            seen.add(nid)
            stack.extend(self.nodes[nid].inputs)
        return seen


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------


@dataclass
class Trace:
    """Values and saved context of one forward evaluation."""

    tape: Tape
    values: dict[int, np.ndarray]
    contexts: dict[int, dict]

    def __getitem__(self, ref) -> np.ndarray:
        return self.values[self.tape.id_of(ref)]


def _shape_matches(declared, actual):
    return len(declared) == len(actual) and all(d is None or d == a for d, a in zip(declared, actual))


def run(tape: Tape, inputs: Mapping[str, np.ndarray], params: Mapping[str, np.ndarray],
        outputs: Iterable | None = None, training: bool = False, rng_key: tuple = (0,)) -> Trace:
    """Forward-evaluate ``tape`` and keep everything backward needs.

    ``rng_key`` names the randomness of this evaluation: each stochastic node
    draws from the stream ``rng_key + (node name,)``.
    """
    dtype = default_dtype()
    wanted = tape.sinks() if outputs is None else [tape.id_of(o) for o in outputs]
    needed = tape.ancestors(wanted)
    values: dict[int, np.ndarray] = {}
    contexts: dict[int, dict] = {}
    for node in tape.nodes:
        if node.id not in needed:
            continue
        if node.op == "input":
            if node.name not in inputs:
                raise GraphError(f"input {node.name!r} is not bound")
            value = np.asarray(inputs[node.name], dtype=dtype)
            if not _shape_matches(node.shape, value.shape):
                raise GraphError(f"input {node.name!r}: expected shape {node.shape}, got {value.shape}")
            values[node.id] = value
            continue
        if node.op == "parameter":
            if node.name not in params:
                raise GraphError(f"parameter {node.name!r} has no value")
            value = np.asarray(params[node.name], dtype=dtype)
            if value.shape != node.shape:
                raise GraphError(f"parameter {node.name!r}: expected shape {node.shape}, got {value.shape}")
            values[node.id] = value
            continue
        prim = PRIMITIVES[node.op]
        ctx: dict = {"training": training}
        if prim.stochastic:
            ctx["rng"] = rng_mod.stream(*rng_key, node.name)
        xs = [values[i] for i in node.inputs]
        try:
            out = prim.forward(xs, node.attrs, ctx)
        except GraphError as exc:
            raise GraphError(f"node {node.name!r}: {exc}") from None
        except ValueError as exc:
            raise GraphError(f"node {node.name!r} ({node.op}): {exc}") from None
        if not _shape_matches(node.shape, out.shape):
            raise GraphError(f"node {node.name!r}: produced shape {out.shape}, declared {node.shape}")
        values[node.id] = out
        contexts[node.id] = ctx
    return Trace(tape, values, contexts)


def evaluate(tape: Tape, inputs, params, outputs=None, training=False, rng_key=(0,)) -> dict:
    """Evaluate and return ``{node name: value}`` for the requested outputs (default: sinks)."""
    trace = run(tape, inputs, params, outputs, training, rng_key)
    wanted = tape.sinks() if outputs is None else [tape.id_of(o) for o in outputs]
    return {tape.nodes[i].name: trace.values[i] for i in wanted}


def reverse(trace: Trace, seeds: Mapping, wrt: Iterable | None = None,
            parameters: bool = True) -> dict[int, np.ndarray]:
    """Propagate seed gradients backwards; returns gradients keyed by node id.

    ``seeds`` maps node refs to upstream gradients.  Only nodes on a path from
    a node listed in ``wrt`` (or, with ``parameters=True``, from a trainable
    parameter) to a seed are visited.
    """
    tape = trace.tape
    sources = {spec.node for spec in tape.parameters.values() if spec.trainable} if parameters else set()
    if wrt is not None:
        sources |= {tape.id_of(r) for r in wrt}
    depends: set[int] = set()
    for node in tape.nodes:
        if node.id in sources or any(i in depends for i in node.inputs):
            depends.add(node.id)
    grads: dict[int, np.ndarray] = {}
    for ref, g in seeds.items():
        nid = tape.id_of(ref)
        grads[nid] = grads.get(nid, 0) + np.asarray(g, dtype=trace.values[nid].dtype)
    start = max(grads)
    for node in reversed(tape.nodes[: start + 1]):
        g = grads.get(node.id)
        if g is None or node.op in ("input", "parameter") or node.id not in trace.values:
            continue
        wanted = [i in depends for i in node.inputs]
        if not any(wanted):
            continue
        ctx = trace.contexts[node.id]
        ctx["need_input_grad"] = wanted[0]
        xs = [trace.values[i] for i in node.inputs]
        in_grads = PRIMITIVES[node.op].backward(g, xs, trace.values[node.id], node.attrs, ctx)
        for i, gi, want in zip(node.inputs, in_grads, wanted):
            if not want or gi is None:
                continue
            grads[i] = grads[i] + gi if i in grads else gi
    return grads


def backward(tape: Tape, loss, inputs=None, params=None, trace: Trace | None = None,
             training: bool = False, rng_key: tuple = (0,)) -> dict[str, np.ndarray]:
    """Gradient of a scalar ``loss`` node for every trainable parameter.

    Pass either ``inputs`` + ``params`` (a forward pass is run) or an existing
    ``trace``.  Parameters the loss does not depend on get zero gradients.
    """
    loss_id = tape.id_of(loss)
    if tape.nodes[loss_id].shape != ():
        raise GraphError(f"loss node {tape.nodes[loss_id].name!r} is not scalar")
    if trace is None:
        trace = run(tape, inputs, params, [loss_id], training, rng_key)
    seed = np.ones((), dtype=trace.values[loss_id].dtype)
    grads = reverse(trace, {loss_id: seed})
    out = {}
    for name, spec in tape.parameters.items():
        if not spec.trainable:
            continue
        g = grads.get(spec.node)
        out[name] = np.zeros(spec.shape, dtype=trace.values.get(spec.node, seed).dtype) if g is None else g
    return out


def grad_check(tape: Tape, loss, inputs, params, step: float = 1e-5,
               max_entries: int | None = None, seed: int = 0) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    Runs in 64-bit precision.  ``max_entries`` caps the number of probed
    entries per parameter (sampled without replacement); ``None`` probes all.
    """
    if not 0 < step <= 1e-3:
        raise ValueError(f"step must lie in (0, 1e-3], got {step}")
    with precision(64):
        params64 = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
        analytic = backward(tape, loss, inputs, params64)
        loss_id = tape.id_of(loss)

        def f(ps):
            return float(run(tape, inputs, ps, [loss_id]).values[loss_id])

        worst = 0.0
        pick = rng_mod.stream(seed, "grad_check")
        for name in sorted(analytic):
            flat = params64[name].reshape(-1)
            idx = np.arange(flat.size)
            if max_entries is not None and flat.size > max_entries:
                idx = np.sort(pick.choice(flat.size, size=max_entries, replace=False))
            for j in idx:
                original = flat[j]
                flat[j] = original + step
                up = f(params64)
                flat[j] = original - step
                down = f(params64)
                flat[j] = original
                numeric = (up - down) / (2 * step)
                a = float(analytic[name].reshape(-1)[j])
                err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, err)
    return worst
