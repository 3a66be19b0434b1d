"""Dense float64 tensors with a reverse-mode gradient tape.

The operation vocabulary is exactly what the imputation model's fixed graph
needs: matrix products, a small elementwise set, reductions, 1-D slicing,
column concatenation, transposition, and the overlap-mean that inverts the
delay embedding. Broadcasting is restricted to the row-vector-against-matrix
pattern the model uses; everything else raises.

A :class:`Tape` is per forward pass: enter it as a context manager, build the
graph, call :func:`backward`, then discard it. Heavy array math is delegated
to the selected kernel backend (compiled or numpy, see ``_kernels``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import _kernels as K
from .errors import ContractError, DimensionError, NumericError

__all__ = [
    "Tensor",
    "Tape",
    "backward",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sin",
    "cos",
    "relu",
    "square",
    "transpose",
    "concat",
    "slice1d",
    "index_mean",
    "finite_diff_check",
    "GradCheckEntry",
    "GradCheckReport",
]

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A dense row-major float64 array, optionally tracked for gradients."""

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def sum(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=False)

    def mean(self, axis: int | None = None) -> "Tensor":
        return _reduce(self, axis, mean=True)

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return slice1d(self, key)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Op:
    """One recorded operation: inputs, output, and its backward rule."""

    __slots__ = ("inputs", "output", "backward_rule")

    def __init__(self, inputs, output, backward_rule):
        self.inputs = inputs
        self.output = output
        self.backward_rule = backward_rule


class Tape:
    """Ordered record of operations for one forward pass.

    Recording order is execution order, hence topological; the backward pass
    visits each recorded op exactly once in reverse. A tape can be replayed
    backward only once and is meant to be discarded afterwards.
    """

    __slots__ = ("ops", "_consumed")

    def __init__(self):
        self.ops: list[_Op] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self
        return False

    def record(self, inputs, output, backward_rule) -> None:
        self.ops.append(_Op(inputs, output, backward_rule))

    def backward(self, loss: Tensor, seed: float = 1.0) -> None:
        """Populate ``.grad`` on every requires_grad tensor reachable from loss."""
        if loss.ndim != 0:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if self._consumed:
            raise ContractError("tape was already replayed backward")
        self._consumed = True
        loss.grad = np.asarray(seed, dtype=np.float64)
        for op in reversed(self.ops):
            g = op.output.grad
            if g is None:
                continue
            grads = op.backward_rule(g)
            for t, gi in zip(op.inputs, grads):
                if gi is None or not t.requires_grad:
                    continue
                t.grad = gi if t.grad is None else t.grad + gi


def backward(loss: Tensor, tape: Tape, seed: float = 1.0) -> None:
    tape.backward(loss, seed=seed)


def _record(inputs: tuple[Tensor, ...], out_data: np.ndarray, backward_rule) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(out_data, requires_grad=needs)
    if needs and _TAPE_STACK:
        _TAPE_STACK[-1].record(inputs, out, backward_rule)
    return out


def _as_row(t: Tensor) -> np.ndarray:
    """Normalize a (d,) or (1, d) operand to its flat (d,) buffer."""
    return t.data if t.data.ndim == 1 else t.data[0]


def _broadcast_kind(a: Tensor, b: Tensor) -> str:
    """'same' for equal shapes, 'row_b'/'row_a' for the allowed row pattern."""
    if a.shape == b.shape:
        return "same"
    if a.ndim == 2:
        if (b.ndim == 1 and b.shape[0] == a.shape[1]) or (
            b.ndim == 2 and b.shape == (1, a.shape[1])
        ):
            return "row_b"
    if b.ndim == 2:
        if (a.ndim == 1 and a.shape[0] == b.shape[1]) or (
            a.ndim == 2 and a.shape == (1, b.shape[1])
        ):
            return "row_a"
    raise DimensionError(f"shapes {a.shape} and {b.shape} are not broadcastable")


def _fold_row(g: np.ndarray, t: Tensor) -> np.ndarray:
    """Reduce a full-shape gradient back onto a row-vector operand."""
    folded = K.sum_axis0(g)
    return folded if t.data.ndim == 1 else folded.reshape(1, -1)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul needs rank-2 operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        ga = K.matmul(g, bd, trans_b=True) if a.requires_grad else None
        gb = K.matmul(ad, g, trans_a=True) if b.requires_grad else None
        return ga, gb

    return _record((a, b), K.matmul(ad, bd), bw)


def add(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "same":
        out = K.add(a.data, b.data)
        bw = lambda g: (g, g)
    elif kind == "row_b":
        out = K.add_row(a.data, _as_row(b))
        bw = lambda g: (g, _fold_row(g, b))
    else:
        out = K.add_row(b.data, _as_row(a))
        bw = lambda g: (_fold_row(g, a), g)
    return _record((a, b), out, bw)


def sub(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    if kind == "same":
        out = K.sub(a.data, b.data)
        bw = lambda g: (g, K.scale(g, -1.0))
    elif kind == "row_b":
        out = K.add_row(a.data, K.scale(_as_row(b), -1.0))
        bw = lambda g: (g, K.scale(_fold_row(g, b), -1.0))
    else:
        out = K.add_row(K.scale(b.data, -1.0), _as_row(a))
        bw = lambda g: (_fold_row(g, a), K.scale(g, -1.0))
    return _record((a, b), out, bw)


def mul(a: Tensor, b: Tensor) -> Tensor:
    kind = _broadcast_kind(a, b)
    ad, bd = a.data, b.data
    if kind == "same":
        out = K.mul(ad, bd)

        def bw(g):
            ga = K.mul(g, bd) if a.requires_grad else None
            gb = K.mul(g, ad) if b.requires_grad else None
            return ga, gb

    elif kind == "row_b":
        brow = _as_row(b)
        out = K.mul_row(ad, brow)

        def bw(g):
            ga = K.mul_row(g, brow) if a.requires_grad else None
            gb = _fold_row(K.mul(g, ad), b) if b.requires_grad else None
            return ga, gb

    else:
        arow = _as_row(a)
        out = K.mul_row(bd, arow)

        def bw(g):
            ga = _fold_row(K.mul(g, bd), a) if a.requires_grad else None
            gb = K.mul_row(g, arow) if b.requires_grad else None
            return ga, gb

    return _record((a, b), out, bw)


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _record((a,), K.scale(a.data, s), lambda g: (K.scale(g, s),))


def sin(a: Tensor) -> Tensor:
    ad = a.data
    return _record((a,), K.sin(ad), lambda g: (K.sin_bw(g, ad),))


def cos(a: Tensor) -> Tensor:
    ad = a.data
    return _record((a,), K.cos(ad), lambda g: (K.cos_bw(g, ad),))


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _record((a,), K.relu(ad), lambda g: (K.relu_bw(g, ad),))


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _record((a,), K.square(ad), lambda g: (K.square_bw(g, ad),))


def transpose(a: Tensor) -> Tensor:
    if a.ndim != 2:
        raise DimensionError(f"transpose needs a rank-2 tensor, got {a.shape}")
    out = np.ascontiguousarray(a.data.T)
    return _record((a,), out, lambda g: (np.ascontiguousarray(g.T),))


def concat(parts: Sequence[Tensor], axis: int = 1) -> Tensor:
    if not parts:
        raise ContractError("concat of zero tensors")
    if axis not in (0, 1):
        raise DimensionError(f"concat axis must be 0 or 1, got {axis}")
    if any(p.ndim != 2 for p in parts):
        raise DimensionError("concat needs rank-2 tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def bw(g):
        grads = []
        for p, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if not p.requires_grad:
                grads.append(None)
            elif axis == 0:
                grads.append(np.ascontiguousarray(g[lo:hi, :]))
            else:
                grads.append(np.ascontiguousarray(g[:, lo:hi]))
        return tuple(grads)

    return _record(tuple(parts), out, bw)


def slice1d(a: Tensor, key: slice) -> Tensor:
    if a.ndim != 1:
        raise DimensionError(f"slicing is supported for rank-1 tensors, got {a.shape}")
    if not isinstance(key, slice) or key.step not in (None, 1):
        raise ContractError("only contiguous slices are supported")
    start, stop, _ = key.indices(a.shape[0])
    out = np.ascontiguousarray(a.data[start:stop])
    n = a.shape[0]

    def bw(g):
        full = np.zeros(n, dtype=np.float64)
        full[start:stop] = g
        return (full,)

    return _record((a,), out, bw)


def index_mean(a: Tensor, idx: np.ndarray, inv_counts: np.ndarray) -> Tensor:
    """out[k] = mean of the entries of ``a`` whose flat index maps to k.

    ``idx`` assigns every flat entry of ``a`` to an output slot and
    ``inv_counts[k]`` must equal 1 / (number of entries mapping to k).
    This is the overlap-averaging pseudo-inverse used by the delay embedding.
    """
    if idx.shape != (a.data.size,):
        raise DimensionError(f"index map of shape {idx.shape} for tensor {a.shape}")
    shape = a.shape
    out = K.index_mean(np.ascontiguousarray(a.data.reshape(-1)), idx, inv_counts)

    def bw(g):
        return (K.index_mean_bw(g, idx, inv_counts).reshape(shape),)

    return _record((a,), out, bw)


def _reduce(a: Tensor, axis: int | None, mean: bool) -> Tensor:
    if axis is None:
        total = K.sum_all(a.data)
        count = a.data.size
        out = np.asarray(total / count if mean else total)
        shape = a.shape

        def bw(g):
            fill = float(g) / count if mean else float(g)
            return (np.full(shape, fill, dtype=np.float64),)

        return _record((a,), out, bw)
    if a.ndim != 2 or axis not in (0, 1):
        raise DimensionError(f"axis {axis} is invalid for tensor of shape {a.shape}")
    count = a.shape[axis]
    out = K.sum_axis0(a.data) if axis == 0 else K.sum_axis1(a.data)
    if mean:
        out = K.scale(out, 1.0 / count)
    shape = a.shape

    def bw(g):
        if mean:
            g = K.scale(g, 1.0 / count)
        if axis == 0:
            full = np.broadcast_to(g, shape)
        else:
            full = np.broadcast_to(g[:, None], shape)
        return (np.ascontiguousarray(full),)

    return _record((a,), out, bw)


@dataclass(frozen=True)
class GradCheckEntry:
    name: str
    max_abs_err: float
    max_rel_err: float


@dataclass(frozen=True)
class GradCheckReport:
    entries: list[GradCheckEntry]
    step: float
    tolerance: float

    @property
    def max_rel_err(self) -> float:
        return max((e.max_rel_err for e in self.entries), default=0.0)

    @property
    def max_abs_err(self) -> float:
        return max((e.max_abs_err for e in self.entries), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def finite_diff_check(
    build_loss: Callable[[dict[str, Tensor]], Tensor],
    params: dict[str, np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-4,
    abs_floor: float = 1e-8,
) -> GradCheckReport:
    """Compare tape gradients against central finite differences.

    ``build_loss`` must deterministically build a scalar loss from the given
    parameter tensors (it is re-invoked for every perturbed evaluation).
    Relative error is ``|g_tape - g_fd| / max(|g_tape|, |g_fd|, abs_floor)``.
    """
    if step <= 0.0:
        raise ContractError("finite-difference step must be positive")
    tensors = {k: Tensor(v, requires_grad=True) for k, v in params.items()}
    with Tape() as tape:
        loss = build_loss(tensors)
    if loss.ndim != 0:
        raise ContractError("build_loss must return a scalar tensor")
    if not np.isfinite(loss.item()):
        raise NumericError("loss is non-finite at the reference point")
    tape.backward(loss)

    def eval_loss() -> float:
        frozen = {k: Tensor(v) for k, v in params.items()}
        value = build_loss(frozen).item()
        if not np.isfinite(value):
            raise NumericError("loss became non-finite during perturbation")
        return value

    entries = []
    for name, arr in params.items():
        tape_grad = tensors[name].grad
        if tape_grad is None:
            tape_grad = np.zeros_like(arr)
        tape_grad = np.asarray(tape_grad, dtype=np.float64).reshape(-1)
        flat = arr.reshape(-1)
        max_abs = 0.0
        max_rel = 0.0
        for i in range(flat.size):
            saved = flat[i]
            flat[i] = saved + step
            f_plus = eval_loss()
            flat[i] = saved - step
            f_minus = eval_loss()
            flat[i] = saved
            fd = (f_plus - f_minus) / (2.0 * step)
            err = abs(tape_grad[i] - fd)
            denom = max(abs(tape_grad[i]), abs(fd), abs_floor)
            max_abs = max(max_abs, err)
            max_rel = max(max_rel, err / denom)
        entries.append(GradCheckEntry(name, max_abs, max_rel))
    return GradCheckReport(entries, step, tolerance)
