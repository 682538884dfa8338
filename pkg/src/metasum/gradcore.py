"""Dense tensors plus reverse-mode automatic differentiation.

The engine records operations on an explicit per-step ``Graph`` (a flat,
append-only tape).  ``backward`` walks the tape in reverse; with
``create_graph=True`` the chain-rule arithmetic is itself recorded with the
same ops, so the returned gradients are graph nodes and can be differentiated
again.  That double-backward capability is what the second-order meta update
in :mod:`metasum.meta` relies on.

Scope is deliberately narrow: only the ops needed by the sequence learner and
its losses, with exact-shape matching plus scalar broadcast.  No general n-d
broadcasting, no fusion, no GPU.
"""

from __future__ import annotations

import math
from collections.abc import Mapping, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Graph",
    "no_grad",
    "ShapeError",
    "NumericalError",
    "set_default_dtype",
    "default_dtype",
    "active_graph",
    "add",
    "sub",
    "mul",
    "neg",
    "scale",
    "sigmoid",
    "tanh",
    "absolute",
    "matmul",
    "matvec",
    "outer",
    "transpose",
    "concat",
    "slice1d",
    "pad1d",
    "select_row",
    "embed_row",
    "sum_all",
    "mean_abs_error",
    "backward",
    "replay",
]


class ShapeError(ValueError):
    """Operands have incompatible shapes for the requested op."""


class NumericalError(ArithmeticError):
    """An op produced NaN or Inf; surfaced immediately, never propagated."""


# 64-bit is the reference/test mode; 32-bit is an opt-in speed mode.
_DEFAULT_DTYPE = [np.float64]


def set_default_dtype(dtype) -> None:
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype!r}; use float32 or float64")
    _DEFAULT_DTYPE[0] = dt.type


def default_dtype():
    return _DEFAULT_DTYPE[0]


# ---------------------------------------------------------------------------
# graph / recording machinery

_graph_stack: list = []


def active_graph():
    """Graph newly created ops record into, or None when not recording."""
    return _graph_stack[-1] if _graph_stack else None


class Graph:
    """Append-only tape of recorded ops.

    Node ``i`` is ``(ops[i], inputs[i], aux[i])`` with forward value
    ``values[i]``.  Inputs always precede the node that consumes them, so a
    reverse scan of ids is a valid reverse topological order.  A Graph is
    single-owner: one training step builds and frees one Graph.
    """

    __slots__ = ("ops", "inputs", "aux", "values")

    def __init__(self):
        self.ops: list[str] = []
        self.inputs: list[tuple[int, ...]] = []
        self.aux: list = []
        self.values: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self.ops)

    def __enter__(self) -> "Graph":
        _graph_stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack.pop()
        return False

    def add(self, op: str, value, inputs: tuple = (), aux=None) -> int:
        nid = len(self.ops)
        self.ops.append(op)
        self.inputs.append(inputs)
        self.aux.append(aux)
        self.values.append(value)
        return nid


class no_grad:
    """Context that disables recording (pure evaluation, e.g. validation)."""

    def __enter__(self):
        _graph_stack.append(None)
        return self

    def __exit__(self, exc_type, exc, tb):
        _graph_stack.pop()
        return False


class Tensor:
    """Dense real array, optionally bound to a node of a recording Graph.

    Detached tensors (graph is None) are immutable by convention and freely
    shareable; a tensor joins the active graph as a fresh leaf the first time
    an op consumes it.
    """

    __slots__ = ("data", "graph", "node_id")

    def __init__(self, data, dtype=None):
        self.data = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE[0])
        self.graph = None
        self.node_id = None

    @staticmethod
    def _wrap(value: np.ndarray, graph=None, node_id=None) -> "Tensor":
        t = Tensor.__new__(Tensor)
        t.data = value
        t.graph = graph
        t.node_id = node_id
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data)

    def copy(self) -> "Tensor":
        return Tensor._wrap(self.data.copy())

    def __repr__(self):
        tag = f", node={self.node_id}" if self.node_id is not None else ""
        return f"Tensor({self.data!r}{tag})"

    # Operator sugar; python scalars multiply through the constant-scale op.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __abs__(self):
        return absolute(self)


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _node_of(g: Graph, t: Tensor) -> int:
    """Node id of t in g, registering detached tensors as fresh leaves."""
    if t.graph is g and t.node_id is not None:
        return t.node_id
    nid = g.add("leaf", t.data)
    t.graph = g
    t.node_id = nid
    return nid


def _run(op: str, args: tuple, aux=None) -> Tensor:
    fwd, _, check = _OPS[op]
    with np.errstate(over="ignore", invalid="ignore"):
        value = fwd([a.data for a in args], aux)
    if check and not np.isfinite(value).all():
        raise NumericalError(f"non-finite result in op '{op}'")
    g = active_graph()
    if g is None:
        return Tensor._wrap(value)
    ids = tuple(_node_of(g, a) for a in args)
    nid = g.add(op, value, ids, aux)
    return Tensor._wrap(value, g, nid)


# ---------------------------------------------------------------------------
# forward rules

def _fw_add(v, aux):
    return v[0] + v[1]


def _fw_sub(v, aux):
    return v[0] - v[1]


def _fw_mul(v, aux):
    return v[0] * v[1]


def _fw_neg(v, aux):
    return -v[0]


def _fw_scale(v, aux):
    return v[0] * aux


def _fw_sigmoid(v, aux):
    # Clip keeps exp() finite; saturated values already round to 0/1.
    lim = 87.0 if v[0].dtype == np.float32 else 708.0
    return 1.0 / (1.0 + np.exp(-np.clip(v[0], -lim, lim)))


def _fw_tanh(v, aux):
    return np.tanh(v[0])


def _fw_abs(v, aux):
    return np.abs(v[0])


def _fw_matmul(v, aux):
    return v[0] @ v[1]


def _fw_matvec(v, aux):
    return v[0] @ v[1]


def _fw_outer(v, aux):
    return np.outer(v[0], v[1])


def _fw_transpose(v, aux):
    return v[0].T


def _fw_concat(v, aux):
    return np.concatenate(v)


def _fw_slice(v, aux):
    start, stop = aux
    return v[0][start:stop]


def _fw_pad(v, aux):
    start, total = aux
    out = np.zeros(total, dtype=v[0].dtype)
    out[start:start + len(v[0])] = v[0]
    return out


def _fw_select_row(v, aux):
    return v[0][aux]


def _fw_embed_row(v, aux):
    idx, nrows = aux
    out = np.zeros((nrows, len(v[0])), dtype=v[0].dtype)
    out[idx] = v[0]
    return out


def _fw_sum(v, aux):
    return np.asarray(v[0].sum())


# ---------------------------------------------------------------------------
# backward (vjp) rules, written with the ops themselves so that
# create_graph=True records a differentiable gradient computation

def _unbroadcast(grad: Tensor, shape) -> Tensor:
    if grad.shape == shape:
        return grad
    # The operand was a scalar folded into a larger result.
    return sum_all(grad)


def _vjp_add(g, ins, aux, out):
    return (_unbroadcast(g, ins[0].shape), _unbroadcast(g, ins[1].shape))


def _vjp_sub(g, ins, aux, out):
    return (_unbroadcast(g, ins[0].shape), _unbroadcast(neg(g), ins[1].shape))


def _vjp_mul(g, ins, aux, out):
    a, b = ins
    return (_unbroadcast(mul(g, b), a.shape), _unbroadcast(mul(g, a), b.shape))


def _vjp_neg(g, ins, aux, out):
    return (neg(g),)


def _vjp_scale(g, ins, aux, out):
    return (scale(g, aux),)


def _vjp_sigmoid(g, ins, aux, out):
    return (mul(g, mul(out, sub(_lift(1.0), out))),)


def _vjp_tanh(g, ins, aux, out):
    return (mul(g, sub(_lift(1.0), mul(out, out))),)


def _vjp_abs(g, ins, aux, out):
    # Piecewise-constant factor; subgradient at 0 defined as 0 (np.sign(0)=0).
    return (mul(g, Tensor(np.sign(ins[0].data))),)


def _vjp_matmul(g, ins, aux, out):
    a, b = ins
    return (matmul(g, transpose(b)), matmul(transpose(a), g))


def _vjp_matvec(g, ins, aux, out):
    a, b = ins
    return (outer(g, b), matvec(transpose(a), g))


def _vjp_outer(g, ins, aux, out):
    u, v = ins
    return (matvec(g, v), matvec(transpose(g), u))


def _vjp_transpose(g, ins, aux, out):
    return (transpose(g),)


def _vjp_concat(g, ins, aux, out):
    grads = []
    off = 0
    for length in aux:
        grads.append(slice1d(g, off, off + length))
        off += length
    return tuple(grads)


def _vjp_slice(g, ins, aux, out):
    start, stop = aux
    return (pad1d(g, start, ins[0].size),)


def _vjp_pad(g, ins, aux, out):
    start, total = aux
    return (slice1d(g, start, start + ins[0].size),)


def _vjp_select_row(g, ins, aux, out):
    return (embed_row(g, aux, ins[0].shape[0]),)


def _vjp_embed_row(g, ins, aux, out):
    idx, _ = aux
    return (select_row(g, idx),)


def _vjp_sum(g, ins, aux, out):
    return (mul(Tensor(np.ones(ins[0].shape)), g),)


# op name -> (forward, vjp, check_finite).  Bounded/structural ops skip the
# finite check; arithmetic that can overflow keeps it.
_OPS = {
    "add": (_fw_add, _vjp_add, True),
    "sub": (_fw_sub, _vjp_sub, True),
    "mul": (_fw_mul, _vjp_mul, True),
    "neg": (_fw_neg, _vjp_neg, False),
    "scale": (_fw_scale, _vjp_scale, True),
    "sigmoid": (_fw_sigmoid, _vjp_sigmoid, False),
    "tanh": (_fw_tanh, _vjp_tanh, False),
    "abs": (_fw_abs, _vjp_abs, False),
    "matmul": (_fw_matmul, _vjp_matmul, True),
    "matvec": (_fw_matvec, _vjp_matvec, True),
    "outer": (_fw_outer, _vjp_outer, True),
    "transpose": (_fw_transpose, _vjp_transpose, False),
    "concat": (_fw_concat, _vjp_concat, False),
    "slice": (_fw_slice, _vjp_slice, False),
    "pad": (_fw_pad, _vjp_pad, False),
    "select_row": (_fw_select_row, _vjp_select_row, False),
    "embed_row": (_fw_embed_row, _vjp_embed_row, False),
    "sum": (_fw_sum, _vjp_sum, True),
}


# ---------------------------------------------------------------------------
# public ops

def _binary_check(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(
            f"{op}: shapes {a.shape} and {b.shape} differ "
            "(only exact match or scalar broadcast is supported)"
        )


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_check(a, b, "add")
    return _run("add", (a, b))


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_check(a, b, "sub")
    return _run("sub", (a, b))


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_check(a, b, "mul")
    return _run("mul", (a, b))


def neg(a) -> Tensor:
    return _run("neg", (_lift(a),))


def scale(a, c: float) -> Tensor:
    if not math.isfinite(c):
        raise NumericalError(f"scale: non-finite constant {c}")
    return _run("scale", (_lift(a),), float(c))


def sigmoid(a) -> Tensor:
    return _run("sigmoid", (_lift(a),))


def tanh(a) -> Tensor:
    return _run("tanh", (_lift(a),))


def absolute(a) -> Tensor:
    return _run("abs", (_lift(a),))


def matmul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected matrices, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    return _run("matmul", (a, b))


def matvec(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 2 or b.ndim != 1:
        raise ShapeError(f"matvec: expected matrix @ vector, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matvec: inner dims differ, {a.shape} @ {b.shape}")
    return _run("matvec", (a, b))


def outer(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.ndim != 1 or b.ndim != 1:
        raise ShapeError(f"outer: expected vectors, got {a.shape}, {b.shape}")
    return _run("outer", (a, b))


def transpose(a) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a matrix, got {a.shape}")
    return _run("transpose", (a,))


def concat(parts: Sequence) -> Tensor:
    parts = [_lift(p) for p in parts]
    if not parts:
        raise ShapeError("concat: empty input")
    for p in parts:
        if p.ndim != 1:
            raise ShapeError(f"concat: expected vectors, got shape {p.shape}")
    lengths = tuple(p.size for p in parts)
    return _run("concat", tuple(parts), lengths)


def slice1d(a, start: int, stop: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"slice1d: expected a vector, got {a.shape}")
    if not (0 <= start < stop <= a.size):
        raise ShapeError(f"slice1d: bad range [{start}:{stop}] for length {a.size}")
    return _run("slice", (a,), (start, stop))


def pad1d(a, start: int, total: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"pad1d: expected a vector, got {a.shape}")
    if start < 0 or start + a.size > total:
        raise ShapeError(f"pad1d: segment [{start}:{start + a.size}] exceeds length {total}")
    return _run("pad", (a,), (start, total))


def select_row(a, idx: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 2:
        raise ShapeError(f"select_row: expected a matrix, got {a.shape}")
    if not (0 <= idx < a.shape[0]):
        raise ShapeError(f"select_row: row {idx} out of range for {a.shape}")
    return _run("select_row", (a,), idx)


def embed_row(a, idx: int, nrows: int) -> Tensor:
    a = _lift(a)
    if a.ndim != 1:
        raise ShapeError(f"embed_row: expected a vector, got {a.shape}")
    if not (0 <= idx < nrows):
        raise ShapeError(f"embed_row: row {idx} out of range for {nrows} rows")
    return _run("embed_row", (a,), (idx, nrows))


def sum_all(a) -> Tensor:
    return _run("sum", (_lift(a),))


def mean_abs_error(pred, target) -> Tensor:
    """(1/T) * sum |pred_i - target_i|; differentiable w.r.t. pred."""
    pred, target = _lift(pred), _lift(target)
    if pred.ndim != 1 or pred.shape != target.shape:
        raise ShapeError(
            f"mean_abs_error: need equal-length vectors, got {pred.shape} vs {target.shape}"
        )
    if pred.size == 0:
        raise ShapeError("mean_abs_error: empty input")
    return scale(sum_all(absolute(sub(pred, target))), 1.0 / pred.size)


# ---------------------------------------------------------------------------
# backward

def backward(loss: Tensor, wrt, create_graph: bool = False):
    """Reverse-mode gradients of a scalar loss.

    ``wrt`` may be a mapping name -> Tensor, a sequence of Tensors, or a
    single Tensor; the result mirrors its structure.  Tensors not reachable
    from the loss get zero gradients (not an error).  With ``create_graph``
    the gradient arithmetic is recorded on the loss's graph, so the returned
    tensors can be differentiated again (second/mixed derivatives).
    """
    if loss.ndim != 0:
        raise ShapeError("backward: loss must be a scalar")
    if loss.graph is None or loss.node_id is None:
        raise ValueError("backward: loss is not part of a recorded graph")
    if isinstance(wrt, Tensor):
        return _grad(loss, [wrt], create_graph)[0]
    if isinstance(wrt, Mapping):
        names = list(wrt)
        grads = _grad(loss, [wrt[k] for k in names], create_graph)
        return dict(zip(names, grads))
    tensors = list(wrt)
    return _grad(loss, tensors, create_graph)


def _grad(loss: Tensor, tensors: list, create_graph: bool) -> list:
    g: Graph = loss.graph
    n = len(g)
    wrt_ids = [t.node_id if t.graph is g else None for t in tensors]

    # Forward scan marks every node whose value depends on some wrt tensor;
    # adjoints are only propagated within this set.
    needed = bytearray(n)
    for nid in wrt_ids:
        if nid is not None:
            needed[nid] = 1
    ops, inputs = g.ops, g.inputs
    for nid in range(n):
        if needed[nid]:
            continue
        for i in inputs[nid]:
            if needed[i]:
                needed[nid] = 1
                break

    collected: dict[int, Tensor] = {}
    if needed[loss.node_id]:
        adjoints: dict[int, Tensor] = {loss.node_id: _lift(1.0)}
        want = {nid for nid in wrt_ids if nid is not None}
        _graph_stack.append(g if create_graph else None)
        try:
            for nid in range(loss.node_id, -1, -1):
                a = adjoints.pop(nid, None)
                if a is None:
                    continue
                if nid in want:
                    collected[nid] = a
                op = ops[nid]
                if op == "leaf":
                    continue
                ins = [Tensor._wrap(g.values[i], g, i) for i in inputs[nid]]
                out = Tensor._wrap(g.values[nid], g, nid)
                contribs = _OPS[op][1](a, ins, g.aux[nid], out)
                for i, c in zip(inputs[nid], contribs):
                    if c is None or not needed[i]:
                        continue
                    prev = adjoints.get(i)
                    adjoints[i] = c if prev is None else add(prev, c)
        finally:
            _graph_stack.pop()

    results = []
    for t, nid in zip(tensors, wrt_ids):
        got = collected.get(nid) if nid is not None else None
        if got is None:
            got = Tensor._wrap(np.zeros_like(t.data))
        results.append(got)
    return results


def replay(graph: Graph) -> list:
    """Recompute every node value from the recorded leaves.

    The result must equal ``graph.values`` bit-exactly; used to verify tape
    integrity.
    """
    out: list[np.ndarray] = []
    for nid in range(len(graph)):
        op = graph.ops[nid]
        if op == "leaf":
            out.append(graph.values[nid])
        else:
            vals = [out[i] for i in graph.inputs[nid]]
            out.append(_OPS[op][0](vals, graph.aux[nid]))
    return out
