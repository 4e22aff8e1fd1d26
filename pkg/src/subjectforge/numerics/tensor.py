"""Dense tensors with reverse-mode automatic differentiation on an explicit tape.

Values are immutable numpy buffers (f32 or f64). Operations executed while a
Tape is active append nodes in execution order, which is already a topological
order, so the backward pass is a single reverse sweep. Evaluation without an
active tape records nothing and is safe for concurrent readers of shared
parameters.

Broadcasting is restricted to leading-dimension expansion: two shapes are
compatible only when one is a suffix of the other. Anything else is a shape
error, which keeps the gradient bookkeeping small and auditable.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

F32 = np.dtype(np.float32)
F64 = np.dtype(np.float64)
_ALLOWED_DTYPES = (F32, F64)


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class NonFiniteError(ArithmeticError):
    """A NaN or Inf appeared in an operation output (hard error)."""


class TapeMismatchError(ValueError):
    """The loss tensor was not produced under the given tape."""


_state = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_state, "tape", None)


def _check_finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"non-finite values in output of '{op}'")


class Tensor:
    """A dense n-dimensional array with optional gradient buffer.

    The data buffer is treated as immutable once wrapped. `assign_` rebinds
    the buffer (used by optimizers); it never writes through the old one.
    """

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 dtype=None, _check: bool = True):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _ALLOWED_DTYPES:
            arr = arr.astype(F32 if arr.dtype.kind in "iub" else F64)
            if arr.dtype not in _ALLOWED_DTYPES:
                raise TypeError(f"unsupported dtype {arr.dtype}")
        if _check:
            _check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name

    # -- introspection ------------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        nm = f" name={self.name!r}" if self.name else ""
        rg = " requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}{rg}{nm})"

    def __len__(self) -> int:
        return self.shape[0]

    def __deepcopy__(self, memo):
        out = Tensor(self.data.copy(), requires_grad=self.requires_grad,
                     name=self.name, _check=False)
        if self.grad is not None:
            out.grad = self.grad.copy()
        return out

    # -- mutation points (parameters only) ----------------------------------

    def assign_(self, new_data: np.ndarray) -> None:
        """Rebind the value buffer; shape and dtype must match."""
        new_data = np.asarray(new_data)
        if new_data.shape != self.data.shape or new_data.dtype != self.data.dtype:
            raise ShapeError(
                f"assign_ mismatch: {new_data.shape}/{new_data.dtype} vs "
                f"{self.data.shape}/{self.data.dtype}")
        _check_finite(new_data, "assign_")
        self.data = new_data

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad,
                      name=self.name, _check=False)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, name=self.name, _check=False)

    # -- operator sugar (implemented in ops.py, bound at import) ------------
    # __add__ etc. are attached by ops._install_operators().


class Node:
    """One executed primitive: inputs, output, and its forward/backward rules."""

    __slots__ = ("op", "scope", "inputs", "output", "fwd", "bwd")

    def __init__(self, op: str, scope: tuple[str, ...], inputs: tuple[Tensor, ...],
                 output: Tensor, fwd: Callable[[], np.ndarray],
                 bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]]):
        self.op = op
        self.scope = scope
        self.inputs = inputs
        self.output = output
        self.fwd = fwd
        self.bwd = bwd


class Tape:
    """Ordered record of executed primitives for one differentiable computation.

    Single-owner while recording. Node order is execution order, hence
    topological. `seed_rng` documents the seed driving any stochastic ops
    recorded under this tape; replay with the captured state is bit-identical.
    """

    def __init__(self, seed_rng: int | None = None):
        self.nodes: list[Node] = []
        self.seed_rng = seed_rng
        self._tracked: set[int] = set()
        self._leaves: dict[int, Tensor] = {}
        self._scopes: list[str] = []
        self._entered = False

    # -- recording ----------------------------------------------------------

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("a tape is already recording on this thread")
        self._entered = True
        _state.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _state.tape = None
        self._entered = False

    def scope(self, label: str):
        """Context manager tagging nodes recorded inside with `label`."""
        return _ScopeCtx(self, label)

    def tracks(self, t: Tensor) -> bool:
        return id(t) in self._tracked or t.requires_grad

    def _append(self, node: Node) -> None:
        self.nodes.append(node)
        self._tracked.add(id(node.output))
        for x in node.inputs:
            if x.requires_grad and id(x) not in self._tracked:
                self._leaves[id(x)] = x

    # -- introspection ------------------------------------------------------

    def leaves(self) -> list[Tensor]:
        return list(self._leaves.values())

    def scopes_used(self) -> set[str]:
        out: set[str] = set()
        for n in self.nodes:
            out.update(n.scope)
        return out

    def nodes_in_scope(self, label: str) -> list[Node]:
        return [n for n in self.nodes if label in n.scope]

    def replay_check(self) -> bool:
        """Re-execute every node's forward rule; True iff all outputs are
        bit-identical to what was recorded. Valid while leaf buffers are
        unchanged."""
        for n in self.nodes:
            fresh = n.fwd()
            if fresh.tobytes() != n.output.data.tobytes():
                return False
        return True


class _ScopeCtx:
    def __init__(self, tape: Tape, label: str):
        self.tape = tape
        self.label = label

    def __enter__(self):
        self.tape._scopes.append(self.label)
        return self.tape

    def __exit__(self, *exc):
        self.tape._scopes.pop()


class no_tape:
    """Context manager suspending the active tape (inference inside training)."""

    def __enter__(self):
        self.saved = _active_tape()
        _state.tape = None
        return self

    def __exit__(self, *exc):
        _state.tape = self.saved


def record(op: str, out_data: np.ndarray, inputs: Sequence[Tensor],
           fwd: Callable[[], np.ndarray],
           bwd: Callable[[np.ndarray], Sequence[np.ndarray | None]]) -> Tensor:
    """Wrap an op result, appending a tape node when recording and tracked."""
    _check_finite(out_data, op)
    tape = _active_tape()
    out = Tensor.__new__(Tensor)
    out.data = out_data
    out.grad = None
    out.name = None
    out.requires_grad = False
    if tape is not None and any(tape.tracks(x) for x in inputs):
        out.requires_grad = True
        tape._append(Node(op, tuple(tape._scopes), tuple(inputs), out, fwd, bwd))
    return out


def backward(loss: Tensor, tape: Tape,
             params: Iterable[Tensor] | None = None) -> dict[Tensor, Tensor]:
    """Reverse sweep from a scalar loss over the tape's nodes.

    With `params` given, gradients are returned and accumulated only for
    those tensors (zero-filled when a param did not participate); every other
    leaf stays free of gradient state, which is what lets frozen modules sit
    inside the graph untouched. Without `params`, all requires_grad leaves
    are covered.
    """
    if loss.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    if id(loss) not in tape._tracked:
        raise TapeMismatchError("loss was not produced under this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.bwd(g_out)
        for x, g in zip(node.inputs, in_grads):
            if g is None:
                continue
            key = id(x)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g

    targets = tape.leaves() if params is None else \
        [p for p in params if p.requires_grad]
    result: dict[Tensor, Tensor] = {}
    for leaf in targets:
        if leaf in result:
            continue
        g = grads.get(id(leaf))
        if g is None:
            g = np.zeros_like(leaf.data)
        leaf.accumulate_grad(g)
        result[leaf] = Tensor(g, _check=False)
    return result


# -- shape helpers shared with ops.py ---------------------------------------

def suffix_broadcastable(sa: tuple[int, ...], sb: tuple[int, ...]) -> bool:
    """True when one shape is a suffix of the other (leading-dim expansion)."""
    if len(sa) >= len(sb):
        longer, shorter = sa, sb
    else:
        longer, shorter = sb, sa
    n = len(shorter)
    return n == 0 or longer[len(longer) - n:] == shorter


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a gradient over the leading dims it was expanded along."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    return g.sum(axis=tuple(range(extra)))
