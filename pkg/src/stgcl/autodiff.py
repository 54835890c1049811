"""Dense float64 tensors with tape-based reverse-mode differentiation.

The engine is deliberately small: a `Tensor` wraps a numpy float64 array,
and while a `Tape` is active every primitive appends one node (output,
parents, backward closure) in execution order.  `Tape.backward` walks the
nodes once in reverse, accumulating gradients, and returns a map from each
leaf tensor with ``requires_grad`` to its gradient.  Tapes are rebuilt per
forward pass; with no active tape the same primitives run as plain
inference with zero bookkeeping.

Ops that can produce non-finite values from finite inputs (exp, log, sqrt,
div, pow) always validate their outputs and raise `NumericError` naming the
op.  `strict_finite(True)` extends the check to every primitive, which is
useful in tests but costs a pass over each intermediate.
"""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation, NumericError

_TAPE_STACK: list["Tape"] = []
_STRICT_FINITE = False


def strict_finite(enabled: bool) -> None:
    """Toggle finite-value validation of every primitive's output."""
    global _STRICT_FINITE
    _STRICT_FINITE = bool(enabled)


def _check_finite(arr: np.ndarray, op: str, always: bool = False) -> None:
    if (always or _STRICT_FINITE) and not np.all(np.isfinite(arr)):
        raise NumericError(op)


class Tensor:
    """Immutable-by-convention dense float64 array, optionally differentiable.

    Data is only ever mutated by the optimizer step; every op allocates a
    fresh output.  Identity (not value) semantics: tensors are hashable and
    usable as dict keys, e.g. in gradient maps.
    """

    __slots__ = ("data", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # arithmetic sugar; all route through module-level primitives
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, _as_tensor(other))

    def __pow__(self, exponent):
        return power(self, exponent)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def sum(self, axis=None, keepdims: bool = False):
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return tensor_mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, shape):
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sqrt(self):
        return sqrt(self)

    def relu(self):
        return relu(self)


def _as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


class _Node:
    __slots__ = ("out", "parents", "backward_fn", "op")

    def __init__(self, out, parents, backward_fn, op):
        self.out = out
        self.parents = parents
        self.backward_fn = backward_fn
        self.op = op


class Tape:
    """Ordered record of primitive ops for one forward pass.

    Node order is execution order, so it is automatically topological;
    `backward` visits each node exactly once, in reverse, then consumes
    the tape.
    """

    def __init__(self):
        self._nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _TAPE_STACK.pop()

    def _record(self, node: _Node) -> None:
        if self._consumed:
            raise ContractViolation("tape already consumed by backward()")
        self._nodes.append(node)

    def backward(self, loss: Tensor) -> dict[Tensor, Tensor]:
        """Gradients of a scalar loss w.r.t. every requires_grad leaf."""
        if self._consumed:
            raise ContractViolation("tape already consumed by backward()")
        if loss.size != 1:
            raise ContractViolation(f"backward requires a scalar loss, got shape {loss.shape}")
        self._consumed = True

        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        registry: dict[int, Tensor] = {id(loss): loss}
        out_ids = {id(node.out) for node in self._nodes}

        for node in reversed(self._nodes):
            g = grads.pop(id(node.out), None)
            registry.pop(id(node.out), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                _check_finite(pg, f"backward:{node.op}")
                pid = id(parent)
                if pid in grads:
                    grads[pid] = grads[pid] + pg
                else:
                    grads[pid] = pg
                    registry[pid] = parent

        self._nodes.clear()
        result: dict[Tensor, Tensor] = {}
        for tid, g in grads.items():
            leaf = registry[tid]
            if leaf.requires_grad and tid not in out_ids:
                if np.isnan(g).any():
                    raise NumericError("backward", "NaN gradient at leaf")
                result[leaf] = Tensor(g)
        return result


def active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def record_op(out_data: np.ndarray, parents: tuple[Tensor, ...], backward_fn, op: str,
              always_check: bool = False) -> Tensor:
    """Wrap a primitive's result, registering it on the active tape.

    `backward_fn(grad_out) -> tuple of parent gradients (or None)`.  Custom
    ops outside this module (e.g. the temporal convolution) use this hook.
    """
    _check_finite(out_data, op, always=always_check)
    tape = active_tape()
    needs_grad = tape is not None and any(p.requires_grad for p in parents)
    out = Tensor(out_data, requires_grad=needs_grad)
    if needs_grad:
        tape._record(_Node(out, parents, backward_fn, op))
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting expanded."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    out = a.data + b.data
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)), "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    out = a.data - b.data
    return record_op(out, (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)), "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data
    return record_op(
        out, (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        "mul",
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    out = a.data / b.data
    def backward(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))
    return record_op(out, (a, b), backward, "div", always_check=True)


def neg(a: Tensor) -> Tensor:
    return record_op(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return record_op(out, (a,), lambda g: (g * out,), "exp", always_check=True)


def log(a: Tensor) -> Tensor:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return record_op(out, (a,), lambda g: (g / a.data,), "log", always_check=True)


def sqrt(a: Tensor) -> Tensor:
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return record_op(out, (a,), lambda g: (g * (0.5 / out),), "sqrt", always_check=True)


def power(a: Tensor, exponent: float) -> Tensor:
    exponent = float(exponent)
    out = a.data ** exponent
    return record_op(
        out, (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1.0),),
        "pow", always_check=True,
    )


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return record_op(out, (a,), lambda g: (g * (a.data > 0.0),), "relu")


# ---------------------------------------------------------------------------
# linear algebra / shape primitives
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2:
        raise ContractViolation("matmul requires operands with ndim >= 2")
    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape)
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape)
        return ga, gb

    return record_op(out, (a, b), backward, "matmul")


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record_op(np.asarray(out), (a,), backward, "sum")


def tensor_mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    if axis is None:
        count = a.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = 1
        for ax in axes:
            count *= a.shape[ax]
    return tensor_sum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    out = a.data.reshape(shape)
    return record_op(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    out = np.transpose(a.data, axes)
    if axes is None:
        inv = None
    else:
        inv = tuple(np.argsort(axes))
    return record_op(out, (a,), lambda g: (np.transpose(g, inv),), "transpose")


def getitem(a: Tensor, idx) -> Tensor:
    out = np.array(a.data[idx])

    def backward(g):
        z = np.zeros(a.shape)
        z[idx] = g
        return (z,)

    return record_op(out, (a,), backward, "getitem")


def index_select(a: Tensor, axis: int, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        z = np.zeros(a.shape)
        np.add.at(z, (slice(None),) * axis + (indices,), g)
        return (z,)

    return record_op(out, (a,), backward, "index_select")


def take_flat(a: Tensor, flat_indices) -> Tensor:
    """Gather by flattened index; output has the index array's shape."""
    flat_indices = np.asarray(flat_indices, dtype=np.intp)
    out = a.data.ravel()[flat_indices]

    def backward(g):
        z = np.zeros(a.size)
        np.add.at(z, flat_indices.ravel(), g.ravel())
        return (z.reshape(a.shape),)

    return record_op(out, (a,), backward, "take")


def concatenate(tensors, axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=axis))

    return record_op(out, tuple(tensors), backward, "concatenate")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor, tape: Tape) -> dict[Tensor, Tensor]:
    """Functional alias for `tape.backward(loss)`."""
    return tape.backward(loss)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    `f` must map a Tensor to a scalar Tensor.  The relative error for each
    coordinate is |analytic - numeric| / max(1, |numeric|); the max over
    coordinates is returned.
    """
    if eps <= 0:
        raise ContractViolation("eps must be positive")
    xg = Tensor(x.data.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(xg)
        if y.size != 1:
            raise ContractViolation("grad_check requires a scalar-valued function")
        grads = tape.backward(y)
    analytic = grads[xg].data if xg in grads else np.zeros(xg.shape)

    base = x.data.copy()
    flat = base.ravel()
    numeric = np.zeros(base.size)
    probe = Tensor(base)
    for i in range(base.size):
        orig = flat[i]
        flat[i] = orig + eps
        f_plus = f(probe).item()
        flat[i] = orig - eps
        f_minus = f(probe).item()
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise NumericError("grad_check", "non-finite value at perturbed point")
        numeric[i] = (f_plus - f_minus) / (2.0 * eps)

    num = numeric.reshape(base.shape)
    err = np.abs(analytic - num) / np.maximum(1.0, np.abs(num))
    return float(err.max()) if err.size else 0.0
