"""Dense tensors and a tape for reverse-mode differentiation.

A :class:`Tape` stores every node value in creation order together with the
primitive applications that produced them. Backward walks the records in
reverse, so each record is visited exactly once. Because every record keeps
its forward function, a tape can also be *replayed* with some node values
overridden, which is how second derivatives are estimated.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .errors import NumericError, ShapeError, TapeError

DTYPES = {"float32": np.float32, "float64": np.float64}

# (output, vjp) where vjp(grad_out, needs) -> per-input gradients (or None)
ForwardFn = Callable[..., tuple]


def resolve_dtype(precision) -> np.dtype:
    if isinstance(precision, str):
        try:
            return np.dtype(DTYPES[precision])
        except KeyError:
            raise ValueError(f"unknown precision {precision!r}") from None
    dt = np.dtype(precision)
    if dt not in (np.float32, np.float64):
        raise ValueError(f"unsupported precision {dt}")
    return dt


class Tensor:
    """A numpy array, optionally bound to a node of a :class:`Tape`."""

    __slots__ = ("data", "tape", "id")

    def __init__(self, data, tape: Optional["Tape"] = None, id: Optional[int] = None):
        self.data = np.asarray(data)
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def tracked(self) -> bool:
        return self.tape is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __add__(self, other):
        from .functional import add

        return add(self, other)

    def __mul__(self, other):
        from .functional import mul

        return mul(self, other)

    __radd__ = __add__
    __rmul__ = __mul__

    def sum(self):
        from .functional import sum_all

        return sum_all(self)

    def __repr__(self):
        where = f", node={self.id}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{where})"


class Record(NamedTuple):
    name: str
    fwd: ForwardFn
    inputs: tuple
    output: int
    vjp: Callable


class Tape:
    """Ordered record of primitive applications.

    Node ids index ``values``. Nodes created by :meth:`watch` are tracked
    leaves; nodes created by :meth:`constant` never receive gradients.
    """

    def __init__(self):
        self.values: list[np.ndarray] = []
        self.records: list[Record] = []
        self.constants: set[int] = set()

    def __len__(self):
        return len(self.values)

    def _node(self, array: np.ndarray) -> int:
        self.values.append(array)
        return len(self.values) - 1

    def watch(self, data) -> Tensor:
        """Register ``data`` as a differentiable leaf."""
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        return Tensor(arr, self, self._node(arr))

    def constant(self, data) -> int:
        nid = self._node(np.asarray(data))
        self.constants.add(nid)
        return nid

    def value(self, node) -> np.ndarray:
        return self.values[self._id(node)]

    def _id(self, node) -> int:
        if isinstance(node, Tensor):
            if node.tape is not self:
                raise TapeError("node does not belong to this tape")
            return node.id
        nid = int(node)
        if not 0 <= nid < len(self.values):
            raise TapeError(f"node {nid} is not on this tape")
        return nid

    def record(self, name: str, fwd: ForwardFn, input_ids: tuple, out, vjp) -> Tensor:
        out_id = self._node(out)
        self.records.append(Record(name, fwd, input_ids, out_id, vjp))
        return Tensor(out, self, out_id)

    def backward(self, seed, nodes: Optional[Iterable] = None) -> dict[int, np.ndarray]:
        """Gradient of the scalar ``seed`` with respect to every tracked node.

        Nodes without a path to the seed get exact zeros. If ``nodes`` is
        given, only those entries are returned.
        """
        sid = self._id(seed)
        if sid in self.constants:
            raise TapeError("seed is a constant node")
        sval = self.values[sid]
        if sval.size != 1:
            raise TapeError(f"seed must be a scalar, got shape {sval.shape}")
        grads: dict[int, np.ndarray] = {sid: np.ones_like(sval)}
        for rec in reversed(self.records):
            if rec.output > sid:
                continue
            g = grads.get(rec.output)
            if g is None:
                continue
            needs = tuple(i not in self.constants for i in rec.inputs)
            if not any(needs):
                continue
            gins = rec.vjp(g, needs)
            for i, gi, need in zip(rec.inputs, gins, needs):
                if not need or gi is None:
                    continue
                prev = grads.get(i)
                grads[i] = gi if prev is None else prev + gi
        wanted = range(len(self.values)) if nodes is None else [self._id(n) for n in nodes]
        out = {}
        for i in wanted:
            if i in self.constants:
                continue
            g = grads.get(i)
            out[i] = np.zeros_like(self.values[i]) if g is None else g
        return out

    def replay(self, overrides: dict) -> "Tape":
        """Copy of this tape with some node values replaced and every
        dependent record recomputed."""
        new = Tape()
        new.values = list(self.values)
        new.constants = set(self.constants)
        changed = set()
        for node, val in overrides.items():
            nid = self._id(node)
            val = np.asarray(val, dtype=self.values[nid].dtype)
            if val.shape != self.values[nid].shape:
                raise ShapeError("override shape differs from node shape")
            new.values[nid] = val
            changed.add(nid)
        for rec in self.records:
            if rec.output in changed:
                # overridden node: keep the value we were given
                new.records.append(rec)
                continue
            if changed.intersection(rec.inputs):
                out, vjp = rec.fwd(*(new.values[i] for i in rec.inputs))
                _check_finite(rec.name, out)
                new.values[rec.output] = out
                new.records.append(rec._replace(vjp=vjp))
                changed.add(rec.output)
            else:
                new.records.append(rec)
        return new


def _check_finite(name: str, out: np.ndarray) -> None:
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite values produced by {name}")


def apply(name: str, fwd: ForwardFn, *inputs) -> Tensor:
    """Run primitive ``fwd`` on ``inputs`` and record it if any input is tracked.

    Inputs may be Tensors or arrays; untracked inputs are stored on the tape
    as constants so the record can be replayed.
    """
    tape = None
    for t in inputs:
        if isinstance(t, Tensor) and t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise TapeError(f"{name}: inputs live on different tapes")
            tape = t.tape
    arrays = [t.data if isinstance(t, Tensor) else np.asarray(t) for t in inputs]
    out, vjp = fwd(*arrays)
    _check_finite(name, out)
    if tape is None:
        return Tensor(out)
    ids = []
    for t, a in zip(inputs, arrays):
        if isinstance(t, Tensor) and t.tape is tape:
            ids.append(t.id)
        else:
            ids.append(tape.constant(a))
    return tape.record(name, fwd, tuple(ids), out, vjp)


def backward(seed: Tensor, captures: Sequence["CaptureHandle"] = ()) -> dict[int, np.ndarray]:
    """Backpropagate from ``seed`` on its own tape and fill capture gradients."""
    if not isinstance(seed, Tensor) or seed.tape is None:
        raise TapeError("seed is not on a tape")
    grads = seed.tape.backward(seed)
    for cap in captures:
        if cap.activation.tape is not seed.tape:
            raise TapeError(f"capture of layer {cap.layer} is on another tape")
        cap.gradient = grads[cap.activation.id]
    return grads


def second_grad_sum(tape: Tape, seed, node, step: float = 1e-3) -> np.ndarray:
    """Elementwise second derivative of ``seed`` with respect to ``node``.

    Approximation: forward difference of first gradients, one replay per
    element, ``(g(x + h e_i) - g(x))_i / h``. Use 64-bit tapes; piecewise
    linear paths give exact zeros away from kinks.
    """
    nid = tape._id(node)
    if nid in tape.constants:
        raise TapeError("node is a constant, not a tracked node")
    sid = tape._id(seed)
    base = tape.backward(sid, nodes=[nid])[nid]
    x0 = tape.values[nid]
    out = np.empty_like(x0)
    for idx in np.ndindex(*x0.shape):
        xp = x0.copy()
        xp[idx] += step
        g = tape.replay({nid: xp}).backward(sid, nodes=[nid])[nid]
        out[idx] = (g[idx] - base[idx]) / step
    return out


@dataclass
class CaptureHandle:
    """Activation of one layer plus its gradient once backward has run."""

    layer: int
    activation: Tensor
    gradient: Optional[np.ndarray] = field(default=None, repr=False)

    def grad_from(self, grads: dict) -> np.ndarray:
        self.gradient = grads[self.activation.id]
        return self.gradient
