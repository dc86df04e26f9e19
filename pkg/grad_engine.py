"""
Gradient Engine Module
Reverse-mode differentiation tape over float64 numpy arrays, the flat
parameter store shared by every trainable model, and a finite-difference
gradient checker.

Complex quantities never enter the tape: callers carry them as (real, imag)
pairs of real nodes.
"""

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit

from errors import GradientCheckFailure, ShapeMismatchError

logger = logging.getLogger(__name__)

LEAF_KINDS = ("parameter", "constant")


@dataclass(frozen=True)
class _OpRule:
    forward: Callable
    backward: Callable
    check: Optional[Callable] = None


_OPS: Dict[str, _OpRule] = {}


def _register(kind: str, forward: Callable, backward: Callable, check: Optional[Callable] = None):
    _OPS[kind] = _OpRule(forward, backward, check)


def _same_shape(kind, shapes, payload):
    first = shapes[0]
    for other in shapes[1:]:
        if other != first:
            raise ShapeMismatchError(kind, first, other)


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    """Sum a gradient back down to the shape it was broadcast from"""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# Elementwise ops

_register("add", lambda v, p: v[0] + v[1],
          lambda g, v, out, p: (g, g), _same_shape)
_register("subtract", lambda v, p: v[0] - v[1],
          lambda g, v, out, p: (g, -g), _same_shape)
_register("multiply", lambda v, p: v[0] * v[1],
          lambda g, v, out, p: (g * v[1], g * v[0]), _same_shape)
_register("divide", lambda v, p: v[0] / v[1],
          lambda g, v, out, p: (g / v[1], -g * out / v[1]), _same_shape)
_register("negate", lambda v, p: -v[0],
          lambda g, v, out, p: (-g,))
_register("exponential", lambda v, p: np.exp(v[0]),
          lambda g, v, out, p: (g * out,))
_register("natural_log", lambda v, p: np.log(v[0]),
          lambda g, v, out, p: (g / v[0],))
_register("square", lambda v, p: v[0] * v[0],
          lambda g, v, out, p: (2.0 * g * v[0],))
_register("square_root", lambda v, p: np.sqrt(v[0]),
          lambda g, v, out, p: (0.5 * g / out,))
_register("tanh", lambda v, p: np.tanh(v[0]),
          lambda g, v, out, p: (g * (1.0 - out * out),))
_register("softplus", lambda v, p: np.logaddexp(0.0, v[0]),
          lambda g, v, out, p: (g * expit(v[0]),))
_register("scale", lambda v, p: v[0] * p["factor"],
          lambda g, v, out, p: (g * p["factor"],))
_register("clamp_min", lambda v, p: np.maximum(v[0], p["floor"]),
          lambda g, v, out, p: (g * (v[0] > p["floor"]),))


# Linear algebra

def _check_matvec(kind, shapes, payload):
    x_shape, w_shape = shapes
    if len(w_shape) != 2 or not x_shape or x_shape[-1] != w_shape[0]:
        raise ShapeMismatchError(kind, x_shape, w_shape)


def _matvec_backward(g, v, out, p):
    x, w = v
    grad_x = g @ w.T
    grad_w = x.reshape(-1, x.shape[-1]).T @ g.reshape(-1, g.shape[-1])
    return grad_x, grad_w


_register("matvec", lambda v, p: v[0] @ v[1], _matvec_backward, _check_matvec)


def _check_bias(kind, shapes, payload):
    x_shape, b_shape = shapes
    if len(b_shape) != 1 or not x_shape or x_shape[-1] != b_shape[0]:
        raise ShapeMismatchError(kind, x_shape, b_shape)


_register("bias_add", lambda v, p: v[0] + v[1],
          lambda g, v, out, p: (g, g.reshape(-1, g.shape[-1]).sum(axis=0)), _check_bias)


# Normalizations and reductions (last axis)

def _softmax_forward(v, p):
    shifted = v[0] - np.max(v[0], axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=-1, keepdims=True)


def _softmax_backward(g, v, out, p):
    inner = np.sum(g * out, axis=-1, keepdims=True)
    return (out * (g - inner),)


_register("softmax", _softmax_forward, _softmax_backward)


def _check_logsumexp(kind, shapes, payload):
    mask = payload.get("mask")
    if mask is None:
        return
    try:
        target = np.broadcast_shapes(mask.shape, shapes[0])
    except ValueError:
        raise ShapeMismatchError(kind, shapes[0], mask.shape) from None
    if target != shapes[0]:
        raise ShapeMismatchError(kind, shapes[0], mask.shape)
    if not np.all(np.any(mask, axis=-1)):
        raise ValueError("logsumexp: every row of the mask must select at least one entry")


def _masked(values, payload):
    mask = payload.get("mask")
    if mask is None:
        return values
    return np.where(mask, values, -np.inf)


def _logsumexp_forward(v, p):
    x = _masked(v[0], p)
    peak = np.max(x, axis=-1, keepdims=True)
    total = np.log(np.sum(np.exp(x - peak), axis=-1, keepdims=True)) + peak
    return total[..., 0]


def _logsumexp_backward(g, v, out, p):
    weights = np.exp(_masked(v[0], p) - out[..., None])
    return (g[..., None] * weights,)


_register("logsumexp", _logsumexp_forward, _logsumexp_backward, _check_logsumexp)


def _check_sum(kind, shapes, payload):
    weights = payload.get("weights")
    if weights is not None and weights.shape != shapes[0]:
        raise ShapeMismatchError(kind, shapes[0], weights.shape)


def _sum_forward(v, p):
    x = v[0] if p.get("weights") is None else v[0] * p["weights"]
    return np.asarray(np.sum(x, axis=p.get("axis")))


def _sum_backward(g, v, out, p):
    axis = p.get("axis")
    if axis is not None:
        g = np.expand_dims(g, axis)
    grad = np.broadcast_to(g, v[0].shape)
    if p.get("weights") is not None:
        return (grad * p["weights"],)
    return (np.array(grad),)


_register("weighted_sum", _sum_forward, _sum_backward, _check_sum)


# Shape manipulation

def _check_broadcast(kind, shapes, payload):
    shape = tuple(payload["shape"])
    try:
        ok = np.broadcast_shapes(shapes[0], shape) == shape
    except ValueError:
        ok = False
    if not ok or len(shapes[0]) > len(shape):
        raise ShapeMismatchError(kind, shapes[0], shape)


def _check_scalar_broadcast(kind, shapes, payload):
    if shapes[0] != ():
        raise ShapeMismatchError(kind, shapes[0], ())


_register("broadcast", lambda v, p: np.broadcast_to(v[0], p["shape"]).copy(),
          lambda g, v, out, p: (_unbroadcast(g, v[0].shape),), _check_broadcast)
_register("scalar_broadcast", lambda v, p: np.full(p["shape"], float(v[0])),
          lambda g, v, out, p: (np.asarray(np.sum(g)),), _check_scalar_broadcast)


def _check_reshape(kind, shapes, payload):
    if int(np.prod(shapes[0])) != int(np.prod(payload["shape"])):
        raise ShapeMismatchError(kind, shapes[0], payload["shape"])


_register("reshape", lambda v, p: v[0].reshape(p["shape"]),
          lambda g, v, out, p: (g.reshape(v[0].shape),), _check_reshape)


def _take_backward(g, v, out, p):
    axis, indices = p["axis"], p["indices"]
    grad = np.zeros_like(v[0])
    moved = np.moveaxis(grad, axis, 0)
    if np.ndim(indices) == 0:
        moved[int(indices)] += g
    else:
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
    return (grad,)


_register("take", lambda v, p: np.take(v[0], p["indices"], axis=p["axis"]), _take_backward)


def _stack_backward(g, v, out, p):
    return tuple(np.take(g, i, axis=p["axis"]) for i in range(len(v)))


_register("stack", lambda v, p: np.stack(v, axis=p["axis"]), _stack_backward, _same_shape)


OP_KINDS = tuple(sorted(_OPS))


class CompGraph:
    """Append-only tape. Nodes are integer ids; inputs always precede outputs."""

    def __init__(self):
        self.kinds: List[str] = []
        self.inputs: List[Tuple[int, ...]] = []
        self.values: List[np.ndarray] = []
        self.payloads: List[dict] = []
        self.requires_grad: List[bool] = []
        self.names: Dict[int, str] = {}
        self.adjoints: List[Optional[np.ndarray]] = []

    def __len__(self) -> int:
        return len(self.kinds)

    def _append(self, kind, inputs, value, payload, requires_grad) -> int:
        self.kinds.append(kind)
        self.inputs.append(tuple(inputs))
        self.values.append(value)
        self.payloads.append(payload)
        self.requires_grad.append(requires_grad)
        return len(self.kinds) - 1

    def parameter(self, value, name: Optional[str] = None) -> int:
        node = self._append("parameter", (), np.array(value, dtype=np.float64), {}, True)
        if name is not None:
            self.names[node] = name
        return node

    def constant(self, value) -> int:
        return self._append("constant", (), np.asarray(value, dtype=np.float64), {}, False)

    def value(self, node: int) -> np.ndarray:
        return self.values[node]

    def shape(self, node: int) -> Tuple[int, ...]:
        return self.values[node].shape

    def op(self, kind: str, *inputs: int, **payload) -> int:
        rule = _OPS.get(kind)
        if rule is None:
            raise ValueError(f"unknown op kind '{kind}'")
        for node in inputs:
            if not 0 <= node < len(self.kinds):
                raise ValueError(f"{kind}: input node {node} does not exist")
        if rule.check is not None:
            rule.check(kind, [self.values[i].shape for i in inputs], payload)
        value = np.asarray(rule.forward([self.values[i] for i in inputs], payload), dtype=np.float64)
        needs_grad = any(self.requires_grad[i] for i in inputs)
        return self._append(kind, inputs, value, payload, needs_grad)

    # Thin wrappers so model code reads like arithmetic

    def add(self, a, b): return self.op("add", a, b)
    def sub(self, a, b): return self.op("subtract", a, b)
    def mul(self, a, b): return self.op("multiply", a, b)
    def div(self, a, b): return self.op("divide", a, b)
    def neg(self, a): return self.op("negate", a)
    def exp(self, a): return self.op("exponential", a)
    def log(self, a): return self.op("natural_log", a)
    def square(self, a): return self.op("square", a)
    def sqrt(self, a): return self.op("square_root", a)
    def tanh(self, a): return self.op("tanh", a)
    def softplus(self, a): return self.op("softplus", a)
    def softmax(self, a): return self.op("softmax", a)
    def scale(self, a, factor: float): return self.op("scale", a, factor=float(factor))
    def clamp_min(self, a, floor: float): return self.op("clamp_min", a, floor=float(floor))
    def matvec(self, x, w): return self.op("matvec", x, w)
    def bias_add(self, x, b): return self.op("bias_add", x, b)
    def reshape(self, a, shape): return self.op("reshape", a, shape=tuple(shape))
    def broadcast(self, a, shape): return self.op("broadcast", a, shape=tuple(shape))
    def scalar_broadcast(self, a, shape): return self.op("scalar_broadcast", a, shape=tuple(shape))
    def stack(self, nodes: Sequence[int], axis: int = -1): return self.op("stack", *nodes, axis=axis)

    def sum(self, a, axis: Optional[int] = None, weights: Optional[np.ndarray] = None):
        if weights is not None:
            weights = np.asarray(weights, dtype=np.float64)
        return self.op("weighted_sum", a, axis=axis, weights=weights)

    def take(self, a, indices, axis: int = -1):
        return self.op("take", a, indices=np.asarray(indices), axis=axis)

    def logsumexp(self, a, mask: Optional[np.ndarray] = None):
        if mask is not None:
            mask = np.asarray(mask, dtype=bool)
        return self.op("logsumexp", a, mask=mask)

    def backward(self, root: int) -> Dict[int, np.ndarray]:
        """Gradient of a scalar root with respect to every parameter leaf"""
        root_value = self.values[root]
        if root_value.shape != ():
            raise ShapeMismatchError("backward", root_value.shape, ())

        adjoints: List[Optional[np.ndarray]] = [None] * len(self.kinds)
        adjoints[root] = np.ones_like(root_value)

        for node in range(root, -1, -1):
            grad = adjoints[node]
            kind = self.kinds[node]
            if grad is None or kind in LEAF_KINDS or not self.requires_grad[node]:
                continue
            inputs = self.inputs[node]
            input_grads = _OPS[kind].backward(
                grad, [self.values[i] for i in inputs], self.values[node], self.payloads[node]
            )
            for source, source_grad in zip(inputs, input_grads):
                if source_grad is None or not self.requires_grad[source]:
                    continue
                if adjoints[source] is None:
                    adjoints[source] = source_grad
                else:
                    adjoints[source] = adjoints[source] + source_grad

        self.adjoints = adjoints
        return {
            node: (adjoints[node] if adjoints[node] is not None else np.zeros_like(self.values[node]))
            for node, kind in enumerate(self.kinds)
            if kind == "parameter" and node <= root
        }


def node_op(graph: CompGraph, kind: str, inputs: Sequence[int], payload: Optional[dict] = None) -> int:
    return graph.op(kind, *inputs, **(payload or {}))


def backward(graph: CompGraph, root: int) -> Dict[int, np.ndarray]:
    return graph.backward(root)


@dataclass(frozen=True)
class Segment:
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64))


class ParamVector:
    """
    Flat float64 parameter array with a table of named, shaped segments.

    On-disk format (text, stable across versions):
        line 1: the tag "#shaping-params 1"
        line 2: one JSON object {"metadata": {...}, "segments": [{"name", "shape"}, ...]}
        then one value per line, row-major per segment, in segment order,
        written with 17 significant digits so reloads are bit-exact.
    """

    FORMAT_TAG = "#shaping-params 1"

    def __init__(self, values: np.ndarray, segments: Sequence[Segment]):
        self.values = np.asarray(values, dtype=np.float64).reshape(-1)
        self.segments: Tuple[Segment, ...] = tuple(segments)
        self._index = {segment.name: segment for segment in self.segments}
        self._validate()

    def _validate(self):
        if len(self._index) != len(self.segments):
            raise ValueError("segment names must be unique")
        cursor = 0
        for segment in self.segments:
            if segment.offset != cursor:
                raise ValueError(f"segment '{segment.name}' starts at {segment.offset}, expected {cursor}")
            cursor += segment.size
        if cursor != self.values.size:
            raise ValueError(f"segments cover {cursor} values but the vector holds {self.values.size}")

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "ParamVector":
        segments, chunks, offset = [], [], 0
        for name, array in arrays.items():
            array = np.asarray(array, dtype=np.float64)
            segments.append(Segment(name, tuple(array.shape), offset))
            chunks.append(array.reshape(-1))
            offset += array.size
        values = np.concatenate(chunks) if chunks else np.zeros(0)
        return cls(values, segments)

    @classmethod
    def empty(cls) -> "ParamVector":
        return cls(np.zeros(0), [])

    @classmethod
    def merge(cls, parts: Dict[str, "ParamVector"]) -> "ParamVector":
        arrays = {}
        for prefix, part in parts.items():
            for name, array in part.arrays().items():
                arrays[f"{prefix}/{name}"] = array
        return cls.from_arrays(arrays)

    def __len__(self) -> int:
        return self.values.size

    @property
    def names(self) -> List[str]:
        return [segment.name for segment in self.segments]

    def segment(self, name: str) -> np.ndarray:
        segment = self._index[name]
        return self.values[segment.offset:segment.offset + segment.size].reshape(segment.shape)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: self.segment(name).copy() for name in self.names}

    def subset(self, prefix: str) -> "ParamVector":
        head = prefix + "/"
        return ParamVector.from_arrays(
            {name[len(head):]: self.segment(name) for name in self.names if name.startswith(head)}
        )

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.segments)

    def with_values(self, values: np.ndarray) -> "ParamVector":
        values = np.asarray(values, dtype=np.float64)
        if values.shape != self.values.shape:
            raise ShapeMismatchError("with_values", self.values.shape, values.shape)
        return ParamVector(values.copy(), self.segments)

    def bind(self, graph: CompGraph, trainable: bool = True) -> Dict[str, int]:
        """Register one leaf per segment; constants when no gradient is needed"""
        if not trainable:
            return {name: graph.constant(self.segment(name)) for name in self.names}
        return {name: graph.parameter(self.segment(name), name=name) for name in self.names}

    def gradient(self, grads: Dict[int, np.ndarray], bindings: Dict[str, int]) -> np.ndarray:
        flat = np.zeros_like(self.values)
        for segment in self.segments:
            node = bindings[segment.name]
            if node in grads:
                flat[segment.offset:segment.offset + segment.size] = grads[node].reshape(-1)
        return flat

    def save(self, path, metadata: Optional[dict] = None):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        header = {
            "metadata": metadata or {},
            "segments": [{"name": s.name, "shape": list(s.shape)} for s in self.segments],
        }
        with open(path, "w", encoding="utf-8") as f:
            f.write(self.FORMAT_TAG + "\n")
            f.write(json.dumps(header, sort_keys=True) + "\n")
            for value in self.values:
                f.write(f"{value:.17g}\n")
        logger.debug(f"Saved {len(self)} parameters to {path}")

    @classmethod
    def load(cls, path) -> Tuple["ParamVector", dict]:
        with open(path, "r", encoding="utf-8") as f:
            tag = f.readline().strip()
            if tag != cls.FORMAT_TAG:
                raise ValueError(f"{path}: not a parameter file (header '{tag}')")
            header = json.loads(f.readline())
            values = np.array([float(line) for line in f if line.strip()], dtype=np.float64)
        segments, offset = [], 0
        for entry in header["segments"]:
            segment = Segment(entry["name"], tuple(entry["shape"]), offset)
            segments.append(segment)
            offset += segment.size
        return cls(values, segments), header.get("metadata", {})


# Dense layers

ACTIVATIONS = {
    "tanh": CompGraph.tanh,
    "softplus": CompGraph.softplus,
    "linear": None,
}


def dense(graph: CompGraph, x: int, weight: int, bias: int, activation: str = "linear") -> int:
    if activation not in ACTIVATIONS:
        raise ValueError(f"unknown activation '{activation}'")
    out = graph.bias_add(graph.matvec(x, weight), bias)
    apply = ACTIVATIONS[activation]
    return out if apply is None else apply(graph, out)


def init_dense(rng: np.random.Generator, fan_in: int, fan_out: int,
               scale: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Weights ~ U(-s/sqrt(fan_in), s/sqrt(fan_in)), zero biases"""
    bound = scale / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)), np.zeros(fan_out)


def check_gradients(f: Callable[[CompGraph, Dict[str, int]], int], at: ParamVector,
                    step: float = 1e-6, indices: Optional[Sequence[int]] = None,
                    floor: float = 1e-12) -> float:
    """
    Max relative error between the tape gradient of f and central differences.

    f receives a fresh graph plus the segment bindings and returns the scalar
    root node. `floor` bounds the denominator of the relative error.
    """
    def evaluate(values):
        graph = CompGraph()
        bindings = at.with_values(values).bind(graph)
        return graph, bindings, f(graph, bindings)

    graph, bindings, root = evaluate(at.values)
    analytic = at.gradient(graph.backward(root), bindings)

    if indices is None:
        indices = range(len(at))

    worst = 0.0
    for index in indices:
        shifted = []
        for sign in (1.0, -1.0):
            values = at.values.copy()
            values[index] += sign * step
            shifted_graph, _, shifted_root = evaluate(values)
            value = float(shifted_graph.value(shifted_root))
            if not np.isfinite(value):
                raise GradientCheckFailure(index, f"non-finite function value at offset {sign * step:g}")
            shifted.append(value)
        numeric = (shifted[0] - shifted[1]) / (2.0 * step)
        error = abs(analytic[index] - numeric) / max(abs(analytic[index]), abs(numeric), floor)
        worst = max(worst, error)

    logger.debug(f"Gradient check over {len(indices)} parameters: max relative error {worst:.3e}")
    return worst
