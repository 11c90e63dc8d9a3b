"""Reverse-mode differentiation on an explicit operation tape.

Covers exactly the primitive set the denoising pipeline needs: elementwise
arithmetic with numpy broadcasting, matrix products, reshapes, reductions,
stride-1 zero-padded convolution, tanh, temperature softmax, and a few
indexing helpers. Forward values are plain float64 numpy arrays; calling a
primitive records one op on the tape, and ``GradTape.backward`` replays the
recorded ops once each, in reverse order, accumulating cotangents.

The tape is single-threaded. Building a graph out of immutable numpy inputs
is cheap enough at desk scale that no graph pruning or requires-grad
machinery is attempted.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import GradientCheckError, TapeError

Array = np.ndarray


class Var:
    """Handle to one value slot on a tape."""

    __slots__ = ("tape", "slot")

    def __init__(self, tape: "GradTape", slot: int):
        self.tape = tape
        self.slot = slot

    @property
    def value(self) -> Array:
        return self.tape._values[self.slot]

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Var(slot={self.slot}, shape={self.shape})"


class Grads:
    """Read-only view of the cotangents produced by one backward sweep."""

    def __init__(self, tape: "GradTape", adjoints: list[Array | None]):
        self._tape = tape
        self._adjoints = adjoints

    def __getitem__(self, var: Var) -> Array:
        if var.tape is not self._tape:
            raise TapeError("gradient requested for a Var from a different tape")
        g = self._adjoints[var.slot]
        if g is None:
            return np.zeros_like(self._tape._values[var.slot])
        return g


class GradTape:
    """Ordered record of executed primitives with saved intermediates."""

    def __init__(self):
        self._values: list[Array] = []
        # (output slot, input slots, vjp) where vjp maps the upstream
        # cotangent to one cotangent per input slot
        self._ops: list[tuple[int, tuple[int, ...], Callable]] = []

    def leaf(self, value) -> Var:
        arr = np.asarray(value, dtype=np.float64)
        self._values.append(arr)
        return Var(self, len(self._values) - 1)

    def record(self, value: Array, inputs: Sequence[Var], vjp: Callable) -> Var:
        """Append one executed primitive.

        ``vjp(upstream)`` must return a tuple of cotangents aligned with
        ``inputs``; entries may be None for inputs with no gradient path.
        """
        for v in inputs:
            if v.tape is not self:
                raise TapeError("op mixes Vars from different tapes")
        out = self.leaf(value)
        self._ops.append((out.slot, tuple(v.slot for v in inputs), vjp))
        return out

    def backward(self, output: Var) -> Grads:
        """Reverse sweep from a scalar output; each recorded op runs once."""
        if output.tape is not self:
            raise TapeError("backward called with a Var from a different tape")
        if output.value.size != 1:
            raise TapeError("backward expects a scalar output")
        adjoints: list[Array | None] = [None] * len(self._values)
        adjoints[output.slot] = np.ones_like(output.value)
        for out_slot, in_slots, vjp in reversed(self._ops):
            g = adjoints[out_slot]
            if g is None:
                continue
            try:
                cots = vjp(g)
            except (IndexError, KeyError) as exc:  # saved intermediate gone
                raise TapeError(f"tape corrupted: {exc}") from exc
            if len(cots) != len(in_slots):
                raise TapeError("vjp returned wrong number of cotangents")
            for slot, cot in zip(in_slots, cots):
                if cot is None:
                    continue
                if adjoints[slot] is None:
                    adjoints[slot] = np.array(cot, dtype=np.float64, copy=True)
                else:
                    adjoints[slot] = adjoints[slot] + cot
        return Grads(self, adjoints)


def _lift(tape: GradTape, x) -> Var:
    return x if isinstance(x, Var) else tape.leaf(x)


def _unbroadcast(g: Array, shape: tuple[int, ...]) -> Array:
    """Sum a broadcast cotangent back down to the operand's shape."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise ---------------------------------------------------------

def add(a, b) -> Var:
    a = a if isinstance(a, Var) else _lift(b.tape, a)
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    return a.tape.record(
        av + bv, (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(g, bv.shape)))


def sub(a, b) -> Var:
    a = a if isinstance(a, Var) else _lift(b.tape, a)
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    return a.tape.record(
        av - bv, (a, b),
        lambda g: (_unbroadcast(g, av.shape), _unbroadcast(-g, bv.shape)))


def mul(a, b) -> Var:
    a = a if isinstance(a, Var) else _lift(b.tape, a)
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    return a.tape.record(
        av * bv, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)))


def div(a, b) -> Var:
    a = a if isinstance(a, Var) else _lift(b.tape, a)
    b = _lift(a.tape, b)
    av, bv = a.value, b.value
    return a.tape.record(
        av / bv, (a, b),
        lambda g: (_unbroadcast(g / bv, av.shape),
                   _unbroadcast(-g * av / (bv * bv), bv.shape)))


def neg(a: Var) -> Var:
    return a.tape.record(-a.value, (a,), lambda g: (-g,))


def square(a: Var) -> Var:
    av = a.value
    return a.tape.record(av * av, (a,), lambda g: (2.0 * av * g,))


def sqrt(a: Var) -> Var:
    out = np.sqrt(a.value)
    return a.tape.record(out, (a,), lambda g: (g / (2.0 * out),))


def log(a: Var) -> Var:
    av = a.value
    return a.tape.record(np.log(av), (a,), lambda g: (g / av,))


def tanh(a: Var) -> Var:
    out = np.tanh(a.value)
    return a.tape.record(out, (a,), lambda g: (g * (1.0 - out * out),))


# -- shape and reductions -------------------------------------------------

def reshape(a: Var, shape) -> Var:
    old = a.value.shape
    return a.tape.record(a.value.reshape(shape), (a,),
                         lambda g: (g.reshape(old),))


def transpose(a: Var) -> Var:
    return a.tape.record(a.value.T.copy(), (a,), lambda g: (g.T,))


def vsum(a: Var, axis=None, keepdims: bool = False) -> Var:
    av = a.value

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, av.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx, av.shape).copy(),)

    return a.tape.record(av.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def vmean(a: Var, axis=None, keepdims: bool = False) -> Var:
    av = a.value
    n = av.size if axis is None else av.shape[axis]

    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g / n, av.shape).copy(),)
        gx = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gx / n, av.shape).copy(),)

    return a.tape.record(av.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def trace(a: Var) -> Var:
    n = a.value.shape[0]
    return a.tape.record(np.trace(a.value), (a,),
                         lambda g: (g * np.eye(n),))


# -- products and indexing -------------------------------------------------

def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value

    def vjp(g):
        if bv.ndim == 1:  # (m,k) @ (k,) -> (m,)
            return (np.outer(g, bv), av.T @ g)
        if av.ndim == 1:  # (k,) @ (k,n) -> (n,)
            return (bv @ g, np.outer(av, g))
        return (g @ bv.T, av.T @ g)

    return a.tape.record(av @ bv, (a, b), vjp)


def take(a: Var, index: int) -> Var:
    """Scalar element of a 1-D vector."""
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[index] = g
        return (out,)

    return a.tape.record(np.asarray(av[index]), (a,), vjp)


def take_row(a: Var, index: int) -> Var:
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[index] = g
        return (out,)

    return a.tape.record(av[index].copy(), (a,), vjp)


def channel_slice(a: Var, lo: int, hi: int) -> Var:
    """Contiguous slice along the last axis."""
    av = a.value

    def vjp(g):
        out = np.zeros_like(av)
        out[..., lo:hi] = g
        return (out,)

    return a.tape.record(av[..., lo:hi].copy(), (a,), vjp)


def row_stack(rows: Sequence[Var]) -> Var:
    tape = rows[0].tape
    value = np.stack([r.value for r in rows])

    def vjp(g):
        return tuple(g[i] for i in range(len(rows)))

    return tape.record(value, tuple(rows), vjp)


# -- softmax ---------------------------------------------------------------

def softmax_t(scores: Var, temperature: float) -> Var:
    """Temperature softmax with max-score subtraction for overflow safety."""
    s = scores.value / temperature
    s = s - s.max()
    e = np.exp(s)
    y = e / e.sum()

    def vjp(g):
        return ((y * (g - np.dot(g, y))) / temperature,)

    return scores.tape.record(y, (scores,), vjp)


# -- convolution -----------------------------------------------------------

def conv2d_forward(x: Array, w: Array, b: Array | None) -> Array:
    """Stride-1 zero-padded correlation; x (H,W,Cin), w (kh,kw,Cin,Cout)."""
    kh, kw = w.shape[0], w.shape[1]
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((ph, ph), (pw, pw), (0, 0)))
    H, W = x.shape[0], x.shape[1]
    out = np.zeros((H, W, w.shape[3]))
    for di in range(kh):
        for dj in range(kw):
            out += xp[di:di + H, dj:dj + W] @ w[di, dj]
    if b is not None:
        out += b
    return out


def conv2d(x: Var, w: Var, b: Var | None = None) -> Var:
    xv, wv = x.value, w.value
    bv = b.value if b is not None else None
    kh, kw = wv.shape[0], wv.shape[1]
    ph, pw = kh // 2, kw // 2
    H, W = xv.shape[0], xv.shape[1]
    xp = np.pad(xv, ((ph, ph), (pw, pw), (0, 0)))

    def vjp(g):
        dw = np.zeros_like(wv)
        dxp = np.zeros_like(xp)
        for di in range(kh):
            for dj in range(kw):
                patch = xp[di:di + H, dj:dj + W]
                dw[di, dj] = np.einsum("ijc,ijo->co", patch, g)
                dxp[di:di + H, dj:dj + W] += g @ wv[di, dj].T
        dx = dxp[ph:ph + H, pw:pw + W] if (ph or pw) else dxp
        cots = [dx, dw]
        if b is not None:
            cots.append(g.sum(axis=(0, 1)))
        return tuple(cots)

    inputs = (x, w) if b is None else (x, w, b)
    return x.tape.record(conv2d_forward(xv, wv, bv), inputs, vjp)


# -- gradient checking -----------------------------------------------------

def gradient_check(f: Callable, args: Sequence[Array], step: float = 1e-5,
                   guard: float = 1e-8) -> float:
    """Worst-coordinate relative error of analytic vs central-difference grads.

    ``f(tape, *vars) -> scalar Var`` builds the recorded function on a fresh
    tape. The finite-difference side re-evaluates ``f`` only through its
    forward values and stays independent of the backward rules it checks.
    """
    args = [np.asarray(a, dtype=np.float64) for a in args]

    def evaluate(pt):
        tape = GradTape()
        vs = [tape.leaf(p) for p in pt]
        out = f(tape, *vs)
        return tape, vs, out

    tape, vs, out = evaluate(args)
    if not np.isfinite(out.value).all():
        raise GradientCheckError("function value is not finite at the check point")
    grads = tape.backward(out)
    analytic = [grads[v] for v in vs]

    worst = 0.0
    for k, base in enumerate(args):
        flat = base.ravel()
        for i in range(flat.size):
            shifted = [a.copy() for a in args]
            shifted[k].ravel()[i] = flat[i] + step
            _, _, hi = evaluate(shifted)
            shifted[k].ravel()[i] = flat[i] - step
            _, _, lo = evaluate(shifted)
            if not (np.isfinite(hi.value) and np.isfinite(lo.value)):
                raise GradientCheckError("non-finite evaluation during finite differences")
            fd = float((hi.value - lo.value) / (2.0 * step))
            an = float(analytic[k].ravel()[i])
            err = abs(an - fd) / max(abs(an), abs(fd), guard)
            worst = max(worst, err)
    return worst
