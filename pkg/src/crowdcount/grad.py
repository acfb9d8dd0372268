"""Tape-based reverse-mode differentiation over the :mod:`crowdcount.tensor` primitives.

Each primitive below accepts plain arrays or :class:`Var` handles. When no
operand is a ``Var`` the call is just the forward computation; otherwise the
application is appended to the operands' :class:`Tape` together with a
vector-Jacobian closure, and :func:`backward` replays the tape in reverse.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from . import tensor as T


class GradientError(RuntimeError):
    """Contract violation when requesting gradients."""


class Var:
    __slots__ = ("value", "tape", "id")

    def __init__(self, value: np.ndarray, tape: "Tape", id: int):
        self.value = value
        self.tape = tape
        self.id = id

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return self.value.dtype

    def __repr__(self):
        return f"Var(id={self.id}, shape={self.value.shape})"


@dataclass(frozen=True)
class Record:
    op: str
    inputs: tuple[int | None, ...]
    output: int
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered log of primitive applications.

    Ids are handed out monotonically, so every input id is smaller than the
    id of the record that consumes it.
    """

    def __init__(self):
        self.records: list[Record] = []
        self.params: dict[str, Var] = {}
        self._next_id = 0

    def _new_id(self) -> int:
        self._next_id += 1
        return self._next_id - 1

    def leaf(self, value) -> Var:
        return Var(np.asarray(value), self, self._new_id())

    def param(self, name: str, value) -> Var:
        if name in self.params:
            raise GradientError(f"parameter {name!r} registered twice")
        v = self.leaf(value)
        self.params[name] = v
        return v

    def watch(self, params: Mapping[str, np.ndarray]) -> dict[str, Var]:
        """Register every entry of ``params`` and return the matching ``Var`` map."""
        return {name: self.param(name, value) for name, value in params.items()}

    def _record(self, op, operands, value, vjp) -> Var:
        ids = []
        for a in operands:
            if isinstance(a, Var):
                if a.tape is not self:
                    raise GradientError("operands recorded on different tapes")
                ids.append(a.id)
            else:
                ids.append(None)
        out = Var(value, self, self._new_id())
        self.records.append(Record(op, tuple(ids), out.id, vjp))
        return out

    def __len__(self):
        return len(self.records)


def value(a):
    return a.value if isinstance(a, Var) else a


def _emit(op: str, operands: Sequence, out: np.ndarray, vjp) -> np.ndarray | Var:
    for a in operands:
        if isinstance(a, Var):
            return a.tape._record(op, operands, out, vjp)
    return out


# ---------------------------------------------------------------- primitives


def conv2d(x, kernels, bias=None):
    xv, kv = value(x), value(kernels)
    bv = None if bias is None else value(bias)
    T._check_conv(xv, kv, bv)
    cols = T._windows(xv, kv.shape[2], kv.shape[3])
    out = T.conv2d(xv, kv, bv, cols=cols)

    def vjp(g):
        return T.conv2d_grads(xv, kv, g, cols=cols, need_input=isinstance(x, Var))

    return _emit("conv2d", (x, kernels, bias), out, vjp)


def hadamard(a, b):
    av, bv = value(a), value(b)
    out = T.hadamard(av, bv)
    return _emit("hadamard", (a, b), out, lambda g: (g * bv, g * av))


def add(a, b):
    out = T.add(value(a), value(b))
    return _emit("add", (a, b), out, lambda g: (g, g))


def sub(a, b):
    out = T.sub(value(a), value(b))
    return _emit("sub", (a, b), out, lambda g: (g, -g))


def scale(a, alpha: float):
    av = value(a)
    out = T.scale(av, alpha)
    return _emit("scale", (a,), out, lambda g: (g * av.dtype.type(alpha),))


def total(a):
    av = value(a)
    out = T.total(av)
    return _emit("sum", (a,), out, lambda g: (np.full(av.shape, g, dtype=av.dtype),))


def sigmoid(a):
    out = T.sigmoid(value(a))
    return _emit("sigmoid", (a,), out, lambda g: (g * out * (1 - out),))


def tanh(a):
    out = T.tanh(value(a))
    return _emit("tanh", (a,), out, lambda g: (g * (1 - out * out),))


def concat_channels(parts):
    vals = [value(p) for p in parts]
    out = T.concat_channels(vals)
    bounds = np.cumsum([0] + [v.shape[0] for v in vals])

    def vjp(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(vals)))

    return _emit("concat", tuple(parts), out, vjp)


def slice_channels(a, start: int, stop: int):
    av = value(a)
    if not 0 <= start < stop <= av.shape[0]:
        raise T.ShapeError(f"slice [{start}:{stop}] out of range for {av.shape[0]} channels")
    out = av[start:stop]

    def vjp(g):
        full = np.zeros_like(av)
        full[start:stop] = g
        return (full,)

    return _emit("slice", (a,), out, vjp)


# ---------------------------------------------------------------- backward


def backward(tape: Tape, loss: Var, wrt: Sequence[Var] = ()) -> dict[str, np.ndarray] | tuple:
    """Gradients of scalar ``loss`` for every registered parameter.

    Parameters that do not influence the loss receive zero tensors. When
    ``wrt`` is given, returns ``(gradient_set, [grad for each var in wrt])``.
    """
    if not isinstance(loss, Var) or loss.tape is not tape:
        raise GradientError("loss must be a Var recorded on this tape")
    if loss.value.size != 1 or loss.value.ndim > 1:
        raise GradientError(f"loss must be scalar, got shape {loss.value.shape}")
    grads: dict[int, np.ndarray] = {loss.id: np.ones_like(loss.value)}
    for rec in reversed(tape.records):
        g = grads.pop(rec.output, None)
        if g is None:
            continue
        for vid, gi in zip(rec.inputs, rec.vjp(g)):
            if vid is None or gi is None:
                continue
            prev = grads.get(vid)
            grads[vid] = gi if prev is None else prev + gi
    # after the sweep only leaves keep entries
    out = {
        name: np.asarray(grads.get(v.id, np.zeros_like(v.value)), dtype=v.value.dtype).reshape(v.value.shape)
        for name, v in tape.params.items()
    }
    if wrt:
        extra = [np.asarray(grads.get(v.id, np.zeros_like(v.value))).reshape(v.value.shape) for v in wrt]
        return out, extra
    return out


def value_and_grad(f: Callable, params: Mapping[str, np.ndarray]):
    tape = Tape()
    loss = f(tape.watch(params))
    return float(value(loss)), backward(tape, loss)


def finite_diff_check(
    f: Callable[[Mapping], object],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
    samples: int = 64,
    seed: int = 0,
    refine_dtype=np.longdouble,
    refine_above: float = 1e-7,
) -> float:
    """Max relative error between taped and central-difference gradients.

    ``f`` maps a parameter dict to a scalar and must be built from the
    primitives in this module. Up to ``samples`` coordinates per parameter
    are probed (all of them when the parameter is smaller). The relative
    error of a coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.

    Taped gradients and difference quotients are computed in float64. For a
    loss of magnitude ~10 the quotient carries ~1e-10 of rounding noise,
    which swamps gradients near the 1e-8 floor, so any coordinate whose
    error exceeds ``refine_above`` is re-evaluated with parameters cast to
    ``refine_dtype`` (x87 extended precision where available). Pass
    ``refine_dtype=None`` to disable the refinement.
    """
    params = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    _, analytic = value_and_grad(f, params)
    rng = np.random.default_rng(seed)
    wide = None
    worst = 0.0
    for name, p in params.items():
        n = p.size
        coords = np.arange(n) if n <= samples else rng.choice(n, size=samples, replace=False)
        for idx in coords:
            a = float(analytic[name].reshape(-1)[idx])
            err = _fd_error(f, params, name, idx, eps, a)
            if err > refine_above and refine_dtype is not None:
                if wide is None:
                    wide = {k: v.astype(refine_dtype) for k, v in params.items()}
                err = min(err, _fd_error(f, wide, name, idx, eps, a))
            worst = max(worst, err)
    return worst


def _fd_error(f, params, name, idx, eps, analytic: float) -> float:
    p = params[name]
    step = np.asarray(eps, dtype=p.dtype)
    probe = dict(params)
    bumped = p.copy().reshape(-1)
    orig = bumped[idx]
    bumped[idx] = orig + step
    probe[name] = bumped.reshape(p.shape)
    f_plus = np.asarray(value(f(probe)), dtype=p.dtype)
    bumped = bumped.copy()
    bumped[idx] = orig - step
    probe[name] = bumped.reshape(p.shape)
    f_minus = np.asarray(value(f(probe)), dtype=p.dtype)
    numeric = float((f_plus - f_minus) / (2 * step))
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
