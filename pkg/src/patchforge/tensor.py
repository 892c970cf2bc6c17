"""Dense tensors with reverse-mode automatic differentiation.

Every differentiable operation produces a ``Tensor`` holding a ``Node``
that links back to its inputs together with the rule for pushing an
upstream gradient to them. ``backward`` linearises the graph reachable from
a scalar root into a ``GradTape`` (inputs before consumers), walks it once
in reverse and then releases it.
"""
from __future__ import annotations

import contextlib
import threading
from typing import Callable, Optional, Sequence, Union

import numpy as np

from patchforge.errors import ContractError, InvalidShapeError, StateError

Scalar = Union[int, float]

DEFAULT_DTYPE = np.float32

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference, optimizer updates)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Node:
    """One recorded operation: its inputs and a backward rule.

    ``backward_fn`` maps the upstream gradient (an ndarray shaped like the
    output) to a tuple with one entry per input; ``None`` entries mean "no
    gradient flows to this input".
    """

    __slots__ = ("inputs", "backward_fn", "name")

    def __init__(self, inputs: Sequence["Tensor"], backward_fn: Callable, name: str):
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn
        self.name = name


class Tensor:
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.array(data, dtype=dtype if dtype is not None else None, copy=True)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.dtype not in (np.float32, np.float64):
            raise ContractError(f"unsupported dtype {arr.dtype}; use float32 or float64")
        arr.flags.writeable = False
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[Node] = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, inputs: Sequence["Tensor"], backward_fn, name: str) -> "Tensor":
        arr = np.asarray(arr)
        if not np.all(np.isfinite(arr)):
            raise FloatingPointError(f"{name} produced non-finite values")
        out = cls.__new__(cls)
        arr.flags.writeable = False
        out.data = arr
        out.grad = None
        out.node = None
        needs = grad_enabled() and any(t.requires_grad for t in inputs)
        out.requires_grad = needs
        if needs:
            out.node = Node(inputs, backward_fn, name)
        return out

    # -- introspection ------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self) -> "Tensor":
        out = Tensor.__new__(Tensor)
        out.data = self.data
        out.requires_grad = False
        out.grad = None
        out.node = None
        return out

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- operator sugar -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self) -> "Tensor":
        return tensor_sum(self)

    def mean(self) -> "Tensor":
        return tensor_mean(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def _raise_not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


# -- creation -----------------------------------------------------------------


def tensor_create(shape, fill="constant", value: float = 0.0, seed: Optional[int] = None,
                  low: float = 0.0, high: float = 1.0, std: float = 1.0,
                  dtype=DEFAULT_DTYPE, requires_grad: bool = False) -> Tensor:
    """Create a tensor filled with a constant or seeded random values.

    ``fill`` is one of ``"constant"``, ``"uniform"`` or ``"normal"``; random
    fills need an explicit ``seed`` so that identical arguments always give
    bit-identical buffers.
    """
    shape = tuple(int(d) for d in shape)
    if len(shape) == 0 or any(d < 1 for d in shape):
        raise InvalidShapeError(f"all dimensions must be >= 1, got {shape}")
    if fill == "constant":
        arr = np.full(shape, value, dtype=dtype)
    elif fill in ("uniform", "normal"):
        if seed is None:
            raise ContractError(f"{fill} fill requires an explicit seed")
        rng = np.random.default_rng(seed)
        if fill == "uniform":
            arr = rng.uniform(low, high, size=shape)
        else:
            arr = rng.normal(0.0, std, size=shape)
        arr = arr.astype(dtype)
    else:
        raise ContractError(f"unknown fill {fill!r}")
    return Tensor(arr, requires_grad=requires_grad, dtype=dtype)


# -- elementwise --------------------------------------------------------------


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise InvalidShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._wrap(a.data + a.data.dtype.type(c), (a,), lambda g: (g,), "add_scalar")
    _check_same(a, b, "add")
    return Tensor._wrap(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        c = float(b)
        return Tensor._wrap(a.data - a.data.dtype.type(c), (a,), lambda g: (g,), "sub_scalar")
    _check_same(a, b, "sub")
    return Tensor._wrap(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a: Tensor, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return Tensor._wrap(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, alpha: Scalar) -> Tensor:
    c = a.data.dtype.type(alpha)
    return Tensor._wrap(a.data * c, (a,), lambda g: (g * c,), "scale")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """Dispatch by name: ``add``, ``sub``, ``mul`` or ``scale``."""
    ops = {"add": add, "sub": sub, "mul": mul, "scale": scale}
    if op not in ops:
        raise ContractError(f"unknown elementwise op {op!r}")
    return ops[op](a, b)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor._wrap(np.where(mask, a.data, 0).astype(a.dtype), (a,),
                        lambda g: (g * mask,), "relu")


# -- reductions and shape -----------------------------------------------------


def tensor_sum(a: Tensor) -> Tensor:
    shape, dtype = a.shape, a.dtype
    return Tensor._wrap(np.asarray(a.data.sum(), dtype=dtype), (a,),
                        lambda g: (np.full(shape, g, dtype=dtype),), "sum")


def tensor_mean(a: Tensor) -> Tensor:
    shape, dtype, n = a.shape, a.dtype, a.size
    return Tensor._wrap(np.asarray(a.data.mean(), dtype=dtype), (a,),
                        lambda g: (np.full(shape, g / n, dtype=dtype),), "mean")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    orig = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise InvalidShapeError(str(exc)) from None
    return Tensor._wrap(out.copy(), (a,), lambda g: (g.reshape(orig),), "reshape")


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise InvalidShapeError(f"matmul expects 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise InvalidShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ bd.T, ad.T @ g

    return Tensor._wrap(ad @ bd, (a, b), bw, "matmul")


# -- backward -----------------------------------------------------------------


class GradTape:
    """Topologically ordered list of the nodes reachable from a root."""

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack = [(root, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t.node is not None:
                for inp in t.node.inputs:
                    if inp.requires_grad and id(inp) not in seen:
                        stack.append((inp, False))
        self.records = order

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.dtype)
    if g.shape != t.shape:
        g = g.reshape(t.shape)
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad = t.grad + g


def backward(root: Tensor) -> None:
    """Accumulate d(root)/d(leaf) into ``leaf.grad`` for every leaf requiring grad."""
    if root.size != 1:
        raise ContractError(f"backward needs a scalar root, got shape {root.shape}")
    if root.node is None:
        raise StateError("root has no recorded graph (leaf, no_grad, or tape already consumed)")
    tape = GradTape(root)
    grads: dict[int, np.ndarray] = {id(root): np.ones(root.shape, dtype=root.dtype)}
    for t in reversed(tape.records):
        g = grads.pop(id(t), None)
        if g is None:
            continue
        node = t.node
        if node is None:
            _accumulate(t, g)
            continue
        in_grads = node.backward_fn(g)
        for inp, ig in zip(node.inputs, in_grads):
            if ig is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + ig
            else:
                grads[key] = ig
    for t in tape.records:
        t.node = None

