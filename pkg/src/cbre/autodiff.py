"""Tape-based reverse-mode automatic differentiation on dense float64 arrays.

Every forward operation appends a node to a :class:`Tape`; a :class:`Tensor`
is just a lightweight handle (tape, node id).  Gradients are computed by a
reverse traversal of the tape.  When ``create_graph=True`` the backward pass
is itself expressed through the same recorded primitives, so the resulting
gradient tensors live on the tape and can be differentiated again.  This
closure under differentiation is what makes a gradient-norm penalty trainable
with plain reverse mode (gradient-of-gradient, order 2).

Design constraints honoured throughout:

* float64 everywhere; finite-difference checks at 1e-6 demand it.
* ReLU derivative at exactly 0 is 0, and the ReLU mask is recorded as a
  constant, so every second derivative through ReLU is 0 almost everywhere.
* ``sqrt_eps`` computes sqrt(x + 1e-12) so norms stay differentiable at 0.

A tape and its tensors are a single-threaded unit of work; independent tapes
may run in parallel but a single tape must never be mutated concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

EPS_NORM = 1e-12


def _as_f64(values: Any) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim > 2:
        raise ValueError(f"tensors are at most 2-d, got shape {arr.shape}")
    return arr


class _Node:
    """One recorded operation: kind, input node ids, forward value, payload."""

    __slots__ = ("op", "inputs", "value", "aux")

    def __init__(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux: Any = None):
        self.op = op
        self.inputs = inputs
        self.value = value
        self.aux = aux


class Tensor:
    """Handle to a node on a tape.  Values are dense row-major float64."""

    __slots__ = ("tape", "nid")

    def __init__(self, tape: "Tape", nid: int):
        self.tape = tape
        self.nid = nid

    @property
    def value(self) -> np.ndarray:
        return self.tape.nodes[self.nid].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def __repr__(self) -> str:
        return f"Tensor(nid={self.nid}, shape={self.shape})"

    # Operator sugar; each call records a node like the named functions do.
    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul_elem(self, other)
        return scalar_mul(float(other), self)

    def __rmul__(self, other):
        return scalar_mul(float(other), self)

    def __truediv__(self, other):
        return scalar_mul(1.0 / float(other), self)

    def __neg__(self) -> "Tensor":
        return scalar_mul(-1.0, self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


class Tape:
    """Append-only record of operations.

    Node inputs always reference earlier node ids, so the list is already in
    topological order and backward is a single reverse sweep.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._param_cache: dict[int, int] = {}

    def __len__(self) -> int:
        return len(self.nodes)

    def _record(self, op: str, inputs: tuple[int, ...], value: np.ndarray, aux: Any = None) -> Tensor:
        self.nodes.append(_Node(op, inputs, value, aux))
        return Tensor(self, len(self.nodes) - 1)

    def param(self, values: np.ndarray) -> Tensor:
        """Lift a parameter array onto the tape as a differentiable leaf.

        Cached by array identity: lifting the same array twice within one
        tape returns the same node, so a forward pass and a later gradient
        request naturally agree on which node a parameter is.
        """
        key = id(values)
        nid = self._param_cache.get(key)
        if nid is not None:
            return Tensor(self, nid)
        t = self._record("leaf", (), _as_f64(values))
        self._param_cache[key] = t.nid
        return t

    def input(self, values: Any) -> Tensor:
        """Lift a data array onto the tape as a (non-cached) leaf."""
        return self._record("leaf", (), _as_f64(values))

    def const(self, values: Any) -> Tensor:
        """Lift a constant that never requires gradients (masks, ones)."""
        return self._record("const", (), _as_f64(values))

    def _check(self, t: Tensor) -> _Node:
        if t.tape is not self:
            raise ValueError("tensor does not belong to this tape")
        return self.nodes[t.nid]


@dataclass
class GradRequest:
    """A differentiation request: scalar output, targets, higher-order flag."""

    output: Tensor
    wrt: list[Tensor] = field(default_factory=list)
    create_graph: bool = False


# ---------------------------------------------------------------------------
# Forward primitives.  Each validates shapes, computes the value eagerly and
# records one node (composites record several).


def _tape_of(*tensors: Tensor) -> Tape:
    tape = tensors[0].tape
    for t in tensors[1:]:
        if t.tape is not tape:
            raise ValueError("operands live on different tapes")
    return tape


def matmul(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("matmul", (a.nid, b.nid), av @ bv)


def add(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise sum; also accepts a (1, m) row added to an (n, m) batch."""
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    row_broadcast = av.ndim == 2 and bv.shape == (1, av.shape[1])
    if av.shape != bv.shape and not row_broadcast:
        raise ValueError(f"add: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("add", (a.nid, b.nid), av + bv)


def sub(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape:
        raise ValueError(f"sub: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("sub", (a.nid, b.nid), av - bv)


def mul_elem(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may be a 0-d scalar."""
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.shape != bv.shape and av.ndim != 0 and bv.ndim != 0:
        raise ValueError(f"mul_elem: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("mul_elem", (a.nid, b.nid), av * bv)


def scalar_mul(c: float, a: Tensor) -> Tensor:
    return a.tape._record("scalar_mul", (a.nid,), float(c) * a.value, aux=float(c))


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    tape = _tape_of(a, b)
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[0] != bv.shape[0]:
        raise ValueError(f"concat_cols: incompatible shapes {av.shape} and {bv.shape}")
    return tape._record("concat_cols", (a.nid, b.nid), np.concatenate([av, bv], axis=1))


def slice_cols(a: Tensor, j0: int, j1: int) -> Tensor:
    av = a.value
    if av.ndim != 2 or not (0 <= j0 <= j1 <= av.shape[1]):
        raise ValueError(f"slice_cols: bad range [{j0}, {j1}) for shape {av.shape}")
    return a.tape._record("slice_cols", (a.nid,), av[:, j0:j1].copy(), aux=(j0, j1, av.shape[1]))


def pad_cols(a: Tensor, j0: int, m_total: int) -> Tensor:
    av = a.value
    if av.ndim != 2 or j0 + av.shape[1] > m_total:
        raise ValueError(f"pad_cols: shape {av.shape} does not fit width {m_total} at {j0}")
    out = np.zeros((av.shape[0], m_total))
    out[:, j0 : j0 + av.shape[1]] = av
    return a.tape._record("pad_cols", (a.nid,), out, aux=(j0, m_total))


def transpose(a: Tensor) -> Tensor:
    av = a.value
    if av.ndim != 2:
        raise ValueError(f"transpose: need 2-d, got shape {av.shape}")
    return a.tape._record("transpose", (a.nid,), av.T.copy())


def gather_rows(a: Tensor, idx: np.ndarray) -> Tensor:
    av = a.value
    if av.ndim != 2:
        raise ValueError(f"gather_rows: need 2-d, got shape {av.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    return a.tape._record("gather_rows", (a.nid,), av[idx].copy(), aux=(idx, av.shape[0]))


def scatter_rows(a: Tensor, idx: np.ndarray, n_out: int) -> Tensor:
    av = a.value
    if av.ndim != 2:
        raise ValueError(f"scatter_rows: need 2-d, got shape {av.shape}")
    idx = np.asarray(idx, dtype=np.intp)
    out = np.zeros((n_out, av.shape[1]))
    np.add.at(out, idx, av)
    return a.tape._record("scatter_rows", (a.nid,), out, aux=(idx, n_out))


def relu(a: Tensor) -> Tensor:
    return a.tape._record("relu", (a.nid,), np.maximum(a.value, 0.0))


def sigmoid(a: Tensor) -> Tensor:
    return a.tape._record("sigmoid", (a.nid,), _sigmoid_stable(a.value))


def _sigmoid_stable(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors the public op name
    return a.tape._record("sum", (a.nid,), np.asarray(np.sum(a.value)))


def mean(a: Tensor) -> Tensor:
    return a.tape._record("mean", (a.nid,), np.asarray(np.mean(a.value)))


def square(a: Tensor) -> Tensor:
    return a.tape._record("square", (a.nid,), a.value * a.value)


def recip(a: Tensor) -> Tensor:
    return a.tape._record("recip", (a.nid,), 1.0 / a.value)


def sqrt_eps(a: Tensor) -> Tensor:
    """sqrt(x + 1e-12); the offset keeps the derivative finite at x = 0."""
    av = a.value
    if np.any(av < 0.0):
        raise ValueError("sqrt_eps: input must be non-negative")
    return a.tape._record("sqrt_eps", (a.nid,), np.sqrt(av + EPS_NORM))


def row_l2_norm(a: Tensor) -> Tensor:
    """Per-row Euclidean norm of an (n, m) tensor, returned as (n, 1)."""
    av = a.value
    if av.ndim != 2:
        raise ValueError(f"row_l2_norm: need 2-d, got shape {av.shape}")
    ones = a.tape.const(np.ones((av.shape[1], 1)))
    return sqrt_eps(matmul(square(a), ones))


_OP_TABLE = {
    "matmul": matmul,
    "add": add,
    "sub": sub,
    "mul_elem": mul_elem,
    "scalar_mul": scalar_mul,
    "concat_cols": concat_cols,
    "relu": relu,
    "sigmoid": sigmoid,
    "mean": mean,
    "sum": sum,
    "square": square,
    "sqrt_eps": sqrt_eps,
    "row_l2_norm": row_l2_norm,
}


def forward_op(kind: str, *inputs) -> Tensor:
    """Dispatch a forward operation by kind name."""
    fn = _OP_TABLE.get(kind)
    if fn is None:
        raise ValueError(f"unknown op kind: {kind!r}")
    return fn(*inputs)


# ---------------------------------------------------------------------------
# Backward.  Each rule is written once against a tiny backend interface with
# two implementations: raw numpy (fast path, create_graph=False) and the tape
# itself (create_graph=True), which is what closes differentiation over
# backward passes.


class _EvalBackend:
    """Raw-numpy backend: backward results are plain arrays."""

    @staticmethod
    def const(arr):
        return arr

    @staticmethod
    def matmul(a, b):
        return a @ b

    @staticmethod
    def add(a, b):
        return a + b

    @staticmethod
    def sub(a, b):
        return a - b

    @staticmethod
    def mul_elem(a, b):
        return a * b

    @staticmethod
    def scalar_mul(c, a):
        return c * a

    @staticmethod
    def transpose(a):
        return a.T

    @staticmethod
    def slice_cols(a, j0, j1):
        return a[:, j0:j1]

    @staticmethod
    def pad_cols(a, j0, m_total):
        out = np.zeros((a.shape[0], m_total))
        out[:, j0 : j0 + a.shape[1]] = a
        return out

    @staticmethod
    def gather_rows(a, idx):
        return a[idx]

    @staticmethod
    def scatter_rows(a, idx, n_out):
        out = np.zeros((n_out, a.shape[1]))
        np.add.at(out, idx, a)
        return out

    @staticmethod
    def sum(a):
        return np.asarray(np.sum(a))

    @staticmethod
    def square(a):
        return a * a

    @staticmethod
    def recip(a):
        return 1.0 / a

    @staticmethod
    def value(h):
        return h


class _TapeBackend:
    """Recording backend: backward results are tape nodes, differentiable."""

    def __init__(self, tape: Tape):
        self.tape = tape

    def const(self, arr):
        return self.tape.const(arr)

    def matmul(self, a, b):
        return matmul(a, b)

    def add(self, a, b):
        return add(a, b)

    def sub(self, a, b):
        return sub(a, b)

    def mul_elem(self, a, b):
        return mul_elem(a, b)

    def scalar_mul(self, c, a):
        return scalar_mul(c, a)

    def transpose(self, a):
        return transpose(a)

    def slice_cols(self, a, j0, j1):
        return slice_cols(a, j0, j1)

    def pad_cols(self, a, j0, m_total):
        return pad_cols(a, j0, m_total)

    def gather_rows(self, a, idx):
        return gather_rows(a, idx)

    def scatter_rows(self, a, idx, n_out):
        return scatter_rows(a, idx, n_out)

    def sum(self, a):
        return sum(a)

    def square(self, a):
        return square(a)

    def recip(self, a):
        return recip(a)

    @staticmethod
    def value(h):
        return h.value


def _vjp(node: _Node, in_hs: list, out_h, g, B) -> list:
    """Adjoint contributions of one node to each of its inputs.

    ``in_hs``/``out_h``/``g`` are handles in the backend's domain (arrays or
    tensors).  Returns one handle per input, or None where nothing flows.
    """
    op = node.op
    if op == "matmul":
        a, b = in_hs
        return [B.matmul(g, B.transpose(b)), B.matmul(B.transpose(a), g)]
    if op == "add":
        a_shape = B.value(in_hs[0]).shape
        b_shape = B.value(in_hs[1]).shape
        if a_shape == b_shape:
            return [g, g]
        # Row broadcast: fold the batch dimension back with a ones row.
        ones_row = B.const(np.ones((1, a_shape[0])))
        return [g, B.matmul(ones_row, g)]
    if op == "sub":
        return [g, B.scalar_mul(-1.0, g)]
    if op == "mul_elem":
        a, b = in_hs
        ga: Any = B.mul_elem(g, b)
        gb: Any = B.mul_elem(g, a)
        if B.value(a).ndim == 0 and B.value(b).ndim != 0:
            ga = B.sum(ga)
        if B.value(b).ndim == 0 and B.value(a).ndim != 0:
            gb = B.sum(gb)
        return [ga, gb]
    if op == "scalar_mul":
        return [B.scalar_mul(node.aux, g)]
    if op == "concat_cols":
        ma = B.value(in_hs[0]).shape[1]
        m = node.value.shape[1]
        return [B.slice_cols(g, 0, ma), B.slice_cols(g, ma, m)]
    if op == "slice_cols":
        j0, j1, m_total = node.aux
        return [B.pad_cols(g, j0, m_total)]
    if op == "pad_cols":
        j0, _ = node.aux
        w = B.value(in_hs[0]).shape[1]
        return [B.slice_cols(g, j0, j0 + w)]
    if op == "transpose":
        return [B.transpose(g)]
    if op == "gather_rows":
        idx, n_src = node.aux
        return [B.scatter_rows(g, idx, n_src)]
    if op == "scatter_rows":
        idx, _ = node.aux
        return [B.gather_rows(g, idx)]
    if op == "relu":
        # The mask is a constant of differentiation: derivative at 0 is 0 and
        # the second derivative vanishes almost everywhere.
        mask = (B.value(in_hs[0]) > 0.0).astype(np.float64)
        return [B.mul_elem(g, B.const(mask))]
    if op == "sigmoid":
        one = B.const(np.ones_like(node.value))
        ds = B.mul_elem(out_h, B.sub(one, out_h))
        return [B.mul_elem(g, ds)]
    if op == "sum":
        ones = B.const(np.ones_like(B.value(in_hs[0])))
        return [B.mul_elem(g, ones)]
    if op == "mean":
        size = B.value(in_hs[0]).size
        ones = B.const(np.full_like(B.value(in_hs[0]), 1.0 / size))
        return [B.mul_elem(g, ones)]
    if op == "square":
        return [B.mul_elem(g, B.scalar_mul(2.0, in_hs[0]))]
    if op == "recip":
        return [B.scalar_mul(-1.0, B.mul_elem(g, B.square(out_h)))]
    if op == "sqrt_eps":
        half_inv = B.scalar_mul(0.5, B.recip(out_h))
        return [B.mul_elem(g, half_inv)]
    raise AssertionError(f"no backward rule for op {op!r}")


def grad(output, wrt: Sequence[Tensor] | None = None, create_graph: bool = False) -> list[Tensor]:
    """Differentiate a scalar output with respect to the given tape nodes.

    Accepts either ``grad(GradRequest(...))`` or ``grad(output, wrt, ...)``.

    Args:
        output: scalar Tensor (any shape with exactly one element).
        wrt: tensors to differentiate with respect to; may be leaves or
            intermediate nodes (the gradient penalty differentiates with
            respect to a concatenated intermediate).
        create_graph: record the backward pass onto the tape so the returned
            gradients can themselves be differentiated.

    Returns:
        One Tensor per wrt entry, shaped like it.  Targets the output does
        not depend on receive zeros.
    """
    if isinstance(output, GradRequest):
        req = output
        output, wrt, create_graph = req.output, req.wrt, req.create_graph
    if wrt is None:
        raise ValueError("grad: wrt targets are required")
    tape = output.tape
    tape._check(output)
    if output.value.size != 1:
        raise ValueError(f"grad: output must be a scalar, got shape {output.shape}")
    wrt = list(wrt)
    for t in wrt:
        tape._check(t)
    wrt_ids = {t.nid for t in wrt}

    # Relevance sweep: a node matters iff it is a target or feeds one
    # transitively.  Nothing else needs an adjoint.
    n = output.nid + 1
    matters = np.zeros(n, dtype=bool)
    for i in range(n):
        if i in wrt_ids:
            matters[i] = True
            continue
        for j in tape.nodes[i].inputs:
            if matters[j]:
                matters[i] = True
                break

    B = _TapeBackend(tape) if create_graph else _EvalBackend()

    def handle(nid: int):
        return Tensor(tape, nid) if create_graph else tape.nodes[nid].value

    adjoint: dict[int, Any] = {output.nid: B.const(np.ones_like(output.value))}
    if matters[output.nid]:
        for nid in range(output.nid, -1, -1):
            g = adjoint.get(nid)
            if g is None or not matters[nid]:
                continue
            node = tape.nodes[nid]
            if node.op in ("leaf", "const"):
                continue
            in_hs = [handle(j) for j in node.inputs]
            contribs = _vjp(node, in_hs, handle(nid), g, B)
            for j, contrib in zip(node.inputs, contribs):
                if contrib is None or not matters[j]:
                    continue
                prev = adjoint.get(j)
                adjoint[j] = contrib if prev is None else B.add(prev, contrib)

    results: list[Tensor] = []
    for t in wrt:
        acc = adjoint.get(t.nid)
        if acc is None:
            results.append(tape.const(np.zeros_like(t.value)))
        elif create_graph:
            results.append(acc)
        else:
            results.append(tape.const(acc))
    return results


def value_of(t: Tensor) -> np.ndarray:
    """Read a tensor's forward value as a numpy array."""
    return t.value


__all__ = [
    "EPS_NORM",
    "GradRequest",
    "Tape",
    "Tensor",
    "add",
    "concat_cols",
    "forward_op",
    "gather_rows",
    "grad",
    "matmul",
    "mean",
    "mul_elem",
    "pad_cols",
    "recip",
    "relu",
    "row_l2_norm",
    "scalar_mul",
    "scatter_rows",
    "sigmoid",
    "slice_cols",
    "square",
    "sqrt_eps",
    "sub",
    "sum",
    "transpose",
    "value_of",
]
