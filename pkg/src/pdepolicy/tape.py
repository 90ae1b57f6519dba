"""Tape-based reverse-mode differentiation over dense/sparse float64 arrays.

Everything that has to be differentiated end to end (feedback rollouts,
implicit-Euler solves, the value network and its analytic input gradient)
is recorded on a :class:`Tape` as a flat list of nodes in construction
order, which is automatically topological.  One backward pass then yields
gradients for every trainable leaf.  All values are float64 numpy arrays
of rank <= 2; non-finite values are rejected at node creation so NaN/Inf
cannot propagate silently.

Tapes are single-writer: build one per episode and run episodes on
disjoint tapes when parallelising.  Sparse matrices and factorizations
are immutable constants and may be shared freely across tapes.
"""

from __future__ import annotations

from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

__all__ = [
    "Tape",
    "Node",
    "SparseMatrix",
    "FactorizedOperator",
    "as_tensor",
    "add",
    "sub",
    "neg",
    "mul",
    "dot",
    "vsum",
    "matvec",
    "matvec_t",
    "solve",
    "softplus_sym",
    "tanh",
    "relu",
    "absval",
    "clamp",
    "getitem",
    "concat",
    "from_scalar",
]


def as_tensor(x) -> np.ndarray:
    """Coerce to a finite float64 array of rank <= 2."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim > 2:
        raise ValueError(f"rank {arr.ndim} > 2 not supported")
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError("non-finite value entering the tape")
    return arr


class Node:
    """One recorded value on a tape.

    ``value`` is the primal; ``grad`` is filled by ``Tape.backward``.
    """

    __slots__ = ("tape", "value", "grad", "trainable", "name", "_backward")

    def __init__(self, tape, value, backward=None, trainable=False, name=None):
        self.tape = tape
        self.value = value
        self.grad = None
        self.trainable = trainable
        self.name = name
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # Small amount of operator sugar; everything maps onto the module ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, trainable={self.trainable}, name={self.name})"


class Tape:
    """Ordered record of operations; parents always precede children."""

    def __init__(self):
        self.nodes: list[Node] = []
        self._consumed = False

    def leaf(self, value, trainable=False, name=None) -> Node:
        node = Node(self, as_tensor(value), trainable=trainable, name=name)
        self.nodes.append(node)
        return node

    def record(self, value, backward) -> Node:
        """Append an interior node with its accumulated-VJP callback."""
        node = Node(self, as_tensor(value), backward=backward)
        self.nodes.append(node)
        return node

    def backward(self, root: Node) -> dict[Node, np.ndarray]:
        """Reverse sweep from a scalar root; returns trainable-leaf grads.

        Each node is visited exactly once, so the pass is linear in tape
        length.  A tape can be swept only once; rebuild for a new pass.
        """
        if self._consumed:
            raise RuntimeError("tape already swept; build a fresh tape")
        if root.tape is not self:
            raise ValueError("root does not belong to this tape")
        if root.value.size != 1:
            raise ValueError(f"backward root must be scalar, got shape {root.shape}")
        self._consumed = True

        root.grad = np.ones_like(root.value)
        for node in reversed(self.nodes):
            if node.grad is None or node._backward is None:
                continue
            node._backward(node.grad)
        return {
            n: (n.grad if n.grad is not None else np.zeros_like(n.value))
            for n in self.nodes
            if n.trainable
        }

    def __len__(self):
        return len(self.nodes)


def _accum(node: Node, contribution: np.ndarray) -> None:
    if node.grad is None:
        # Copy: the contribution may alias an upstream gradient buffer.
        node.grad = np.array(contribution, dtype=np.float64)
    else:
        node.grad += contribution


def _tape_of(*args) -> Tape:
    for a in args:
        if isinstance(a, Node):
            return a.tape
    raise TypeError("at least one operand must be a tape Node")


def _value(x) -> np.ndarray:
    return x.value if isinstance(x, Node) else as_tensor(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to ``shape`` (scalar-vs-vector broadcasting only)."""
    if grad.shape == shape:
        return grad
    if int(np.prod(shape)) == 1:
        return np.sum(grad).reshape(shape)
    raise ValueError(f"cannot reduce gradient of shape {grad.shape} to {shape}")


# ---------------------------------------------------------------------------
# elementwise / reduction ops


def add(a, b) -> Node:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    out_value = av + bv

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g, av.shape))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g, bv.shape))

    return tape.record(out_value, backward)


def sub(a, b) -> Node:
    return add(a, neg(b) if isinstance(b, Node) else -_value(b))


def neg(a) -> Node:
    tape = _tape_of(a)

    def backward(g):
        _accum(a, -g)

    return tape.record(-a.value, backward)


def mul(a, b) -> Node:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)

    def backward(g):
        if isinstance(a, Node):
            _accum(a, _unbroadcast(g * bv, av.shape))
        if isinstance(b, Node):
            _accum(b, _unbroadcast(g * av, bv.shape))

    return tape.record(av * bv, backward)


def dot(a, b) -> Node:
    tape = _tape_of(a, b)
    av, bv = _value(a), _value(b)
    if av.shape != bv.shape or av.ndim != 1:
        raise ValueError(f"dot expects equal-length vectors, got {av.shape} and {bv.shape}")

    def backward(g):
        if isinstance(a, Node):
            _accum(a, g * bv)
        if isinstance(b, Node):
            _accum(b, g * av)

    return tape.record(np.dot(av, bv), backward)


def vsum(a) -> Node:
    tape = _tape_of(a)
    av = a.value

    def backward(g):
        _accum(a, np.broadcast_to(g, av.shape))

    return tape.record(np.sum(av), backward)


def softplus_sym(a) -> Node:
    """sigma(x) = log(exp(x) + exp(-x)), overflow-safe; sigma'(x) = tanh(x)."""
    tape = _tape_of(a)
    av = a.value
    out = np.logaddexp(av, -av)
    t = np.tanh(av)

    def backward(g):
        _accum(a, g * t)

    return tape.record(out, backward)


def tanh(a) -> Node:
    tape = _tape_of(a)
    out = np.tanh(a.value)

    def backward(g):
        _accum(a, g * (1.0 - out * out))

    return tape.record(out, backward)


def relu(a) -> Node:
    tape = _tape_of(a)
    av = a.value
    mask = av > 0.0

    def backward(g):
        _accum(a, g * mask)

    return tape.record(np.where(mask, av, 0.0), backward)


def absval(a) -> Node:
    tape = _tape_of(a)
    s = np.sign(a.value)

    def backward(g):
        _accum(a, g * s)

    return tape.record(np.abs(a.value), backward)


def clamp(a, lo: float, hi: float) -> Node:
    """Clip to [lo, hi]; gradient passes through strictly inside the box."""
    tape = _tape_of(a)
    av = a.value
    mask = (av > lo) & (av < hi)

    def backward(g):
        _accum(a, g * mask)

    return tape.record(np.clip(av, lo, hi), backward)


def getitem(a, key) -> Node:
    tape = _tape_of(a)
    av = a.value

    def backward(g):
        scatter = np.zeros_like(av)
        scatter[key] = g
        _accum(a, scatter)

    return tape.record(av[key], backward)


def concat(parts: Iterable) -> Node:
    parts = list(parts)
    tape = _tape_of(*parts)
    values = [np.atleast_1d(_value(p)) for p in parts]
    sizes = [v.size for v in values]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if isinstance(part, Node):
                _accum(part, g[lo:hi].reshape(part.value.shape))

    return tape.record(np.concatenate(values), backward)


def from_scalar(a, value: np.ndarray, jacobian: np.ndarray) -> Node:
    """Record an externally computed map scalar -> vector with its derivative.

    ``value`` and ``jacobian`` must both be evaluated at ``a.value``; the
    backward rule is a_bar += jacobian . g.
    """
    tape = _tape_of(a)
    if a.value.size != 1:
        raise ValueError("from_scalar expects a scalar input node")
    value = as_tensor(value)
    jacobian = as_tensor(jacobian)

    def backward(g):
        _accum(a, np.dot(jacobian.ravel(), g.ravel()).reshape(a.value.shape))

    return tape.record(value, backward)


# ---------------------------------------------------------------------------
# linear algebra ops


class SparseMatrix:
    """CSR matrix constant for tape ops; symmetry flag only set when verified."""

    def __init__(self, mat, symmetric: bool | None = None):
        mat = sp.csr_matrix(mat).astype(np.float64)
        mat.sort_indices()
        if not np.all(np.isfinite(mat.data)):
            raise FloatingPointError("non-finite entries in sparse matrix")
        self.mat = mat
        if symmetric is None:
            diff = (mat - mat.T).tocoo()
            scale = max(1.0, np.abs(mat.data).max() if mat.nnz else 1.0)
            symmetric = diff.nnz == 0 or np.abs(diff.data).max() < 1e-12 * scale
        self.symmetric = bool(symmetric)
        self._transpose = None

    @property
    def shape(self):
        return self.mat.shape

    @property
    def T(self) -> sp.csr_matrix:
        if self.symmetric:
            return self.mat
        if self._transpose is None:
            self._transpose = self.mat.T.tocsr()
        return self._transpose

    def __matmul__(self, x):
        return self.mat @ x


class FactorizedOperator:
    """Sparse LU factorization of a square nonsingular matrix, built once.

    Ill-conditioning is reported here, at factorization time, by checking
    the residual of a probe solve; callers can then rely on solves being
    accurate to ~1e-12 relative residual.
    """

    def __init__(self, mat, probe_tol: float = 1e-8):
        if isinstance(mat, SparseMatrix):
            mat = mat.mat
        mat = sp.csc_matrix(mat).astype(np.float64)
        if mat.shape[0] != mat.shape[1]:
            raise ValueError(f"square matrix required, got {mat.shape}")
        self.mat = mat
        try:
            self._lu = spla.splu(mat)
        except RuntimeError as exc:  # singular to machine precision
            raise np.linalg.LinAlgError(f"factorization failed: {exc}") from exc
        rng = np.random.default_rng(0)
        probe = rng.standard_normal(mat.shape[0])
        x = self._lu.solve(probe)
        residual = np.linalg.norm(mat @ x - probe) / np.linalg.norm(probe)
        if not np.isfinite(residual) or residual > probe_tol:
            raise np.linalg.LinAlgError(
                f"ill-conditioned operator: probe residual {residual:.3e}"
            )

    @property
    def shape(self):
        return self.mat.shape

    def solve(self, b: np.ndarray, transpose: bool = False) -> np.ndarray:
        return self._lu.solve(np.asarray(b, dtype=np.float64), trans="T" if transpose else "N")


def matvec(A, x) -> Node:
    """A @ x where A may be a constant (sparse/dense) or a trainable dense Node."""
    tape = _tape_of(A, x)
    xv = _value(x)
    if isinstance(A, Node):
        Av = A.value
        if Av.ndim != 2 or Av.shape[1] != xv.shape[0]:
            raise ValueError(f"matvec shape mismatch: {Av.shape} @ {xv.shape}")

        def backward(g):
            _accum(A, np.outer(g, xv))
            if isinstance(x, Node):
                _accum(x, Av.T @ g)

        return tape.record(Av @ xv, backward)

    if isinstance(A, SparseMatrix):
        if A.shape[1] != xv.shape[0]:
            raise ValueError(f"matvec shape mismatch: {A.shape} @ {xv.shape}")
        AT = A.T

        def backward(g):
            _accum(x, AT @ g)

        return tape.record(A.mat @ xv, backward)

    Av = as_tensor(A) if not sp.issparse(A) else A
    if Av.shape[1] != xv.shape[0]:
        raise ValueError(f"matvec shape mismatch: {Av.shape} @ {xv.shape}")

    def backward(g):
        _accum(x, Av.T @ g)

    return tape.record(Av @ xv, backward)


def matvec_t(A, x) -> Node:
    """A.T @ x with A a dense Node (used by analytic input-gradient chains)."""
    tape = _tape_of(A, x)
    xv = _value(x)
    if isinstance(A, Node):
        Av = A.value
        if Av.shape[0] != xv.shape[0]:
            raise ValueError(f"matvec_t shape mismatch: {Av.shape}.T @ {xv.shape}")

        def backward(g):
            _accum(A, np.outer(xv, g))
            if isinstance(x, Node):
                _accum(x, Av @ g)

        return tape.record(Av.T @ xv, backward)

    Av = A.T if isinstance(A, SparseMatrix) else as_tensor(A).T

    def backward(g):
        _accum(x, (Av.T @ g))

    return tape.record(Av @ xv, backward)


def solve(F: FactorizedOperator, b) -> Node:
    """x = A^-1 b through a prefactorized operator; backward solves with A^T."""
    tape = _tape_of(b)
    bv = _value(b)
    if F.shape[0] != bv.shape[0]:
        raise ValueError(f"solve shape mismatch: {F.shape} vs {bv.shape}")
    x = F.solve(bv)

    def backward(g):
        _accum(b, F.solve(g, transpose=True))

    return tape.record(x, backward)
