"""Dense arrays on a reverse-mode gradient tape.

Every operation takes :class:`Var` operands that live on the same
:class:`Tape`, computes its value eagerly with numpy and records a local
vector-Jacobian rule.  ``Tape.backward`` walks the record in reverse.

Shapes are never broadcast implicitly.  The only mixed-shape product is
``scale`` (array times python scalar); row broadcasting must be requested
with :func:`broadcast_rows`.
"""

from __future__ import annotations

from typing import Callable, Mapping, Sequence

import numpy as np

__all__ = [
    "DimensionError",
    "ContractError",
    "EvaluationError",
    "Var",
    "Tape",
    "RowSliceGrad",
    "matmul",
    "add",
    "sub",
    "mul",
    "scale",
    "sigmoid",
    "logistic",
    "tanh",
    "elementwise",
    "sum_all",
    "rows",
    "cols",
    "concat_cols",
    "broadcast_rows",
    "blend",
    "cross_entropy",
    "finite_difference_grad",
    "sabotage",
]


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class EvaluationError(ArithmeticError):
    """A function evaluation produced a non-finite value."""


# names of primitives whose gradient rule is deliberately corrupted (test hook)
_SABOTAGED: set[str] = set()


class sabotage:
    """Context manager that scales the gradient rule of named ops by 1.5.

    Negative control for gradient checking; never active by default.
    """

    def __init__(self, *ops: str):
        self.ops = set(ops)

    def __enter__(self):
        self._added = self.ops - _SABOTAGED
        _SABOTAGED.update(self._added)
        return self

    def __exit__(self, *exc):
        _SABOTAGED.difference_update(self._added)
        return False


class RowSliceGrad:
    """Gradient contribution that only touches ``[start:stop]`` of a parent.

    Lets per-timestep slices of a long precomputed array accumulate their
    gradients in place instead of materialising a full-size zero array per
    step.
    """

    __slots__ = ("start", "stop", "grad", "axis")

    def __init__(self, start: int, stop: int, grad: np.ndarray, axis: int = 0):
        self.start = start
        self.stop = stop
        self.grad = grad
        self.axis = axis


class Var:
    """A value recorded on a tape."""

    __slots__ = ("tape", "idx", "value", "requires_grad")

    def __init__(self, tape: "Tape", idx: int, value: np.ndarray, requires_grad: bool):
        self.tape = tape
        self.idx = idx
        self.value = value
        self.requires_grad = requires_grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape}, idx={self.idx})"


class Tape:
    """Append-only record of operations.

    ``recording=False`` gives a forward-only tape: values are computed but no
    gradient rules are kept, which is what evaluation uses.
    """

    def __init__(self, dtype=np.float64, recording: bool = True):
        self.dtype = np.dtype(dtype)
        self.recording = recording
        self._parents: list[tuple[Var, ...]] = []
        self._vjps: list[Callable | None] = []
        self._nodes: list[Var] = []
        self.params: dict[str, Var] = {}

    def __len__(self):
        return len(self._nodes)

    def _leaf(self, value, requires_grad: bool) -> Var:
        v = Var(self, len(self._nodes), value, requires_grad)
        if self.recording:
            self._nodes.append(v)
            self._parents.append(())
            self._vjps.append(None)
        return v

    def param(self, name: str, value) -> Var:
        """Register a trainable leaf under ``name``."""
        if name in self.params:
            raise ContractError(f"parameter {name!r} registered twice")
        arr = np.array(value, dtype=self.dtype)
        v = self._leaf(arr, True)
        self.params[name] = v
        return v

    def const(self, value) -> Var:
        return self._leaf(np.asarray(value, dtype=self.dtype), False)

    def record(self, value: np.ndarray, parents: Sequence[Var], vjp: Callable, name: str = "") -> Var:
        """Append a custom op.

        ``vjp(g)`` returns one gradient per parent (``None`` allowed, or a
        :class:`RowSliceGrad`).  Ops registered from other modules use this.
        """
        rg = False
        for p in parents:
            if p.tape is not self:
                raise ContractError("operands belong to different tapes")
            rg = rg or p.requires_grad
        nodes = self._nodes
        v = Var(self, len(nodes), value, rg)
        if self.recording:
            if rg and _SABOTAGED and name in _SABOTAGED:
                inner = vjp

                def vjp(g, inner=inner):
                    return tuple(None if x is None else _scaled(x, 1.5) for x in inner(g))

            nodes.append(v)
            self._parents.append(parents)
            self._vjps.append(vjp if rg else None)
        return v

    def backward(self, loss: Var) -> dict[str, np.ndarray]:
        """Gradients of a scalar ``loss`` for every registered parameter.

        Parameters that the loss does not depend on get exact zeros.
        """
        if not self.recording:
            raise ContractError("backward on a non-recording tape")
        if loss.tape is not self:
            raise ContractError("loss belongs to a different tape")
        if loss.value.size != 1:
            raise ContractError(f"loss must be scalar, got shape {loss.value.shape}")
        n = loss.idx + 1
        grads: list[np.ndarray | None] = [None] * n
        owned = [False] * n
        grads[loss.idx] = np.ones_like(loss.value)
        parents, vjps = self._parents, self._vjps
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            vjp = vjps[i]
            if vjp is None:
                continue
            grads[i] = None  # interior gradients are not kept
            for p, pg in zip(parents[i], vjp(g)):
                if pg is None or not p.requires_grad:
                    continue
                j = p.idx
                if isinstance(pg, RowSliceGrad):
                    if grads[j] is None:
                        grads[j] = np.zeros_like(p.value)
                        owned[j] = True
                    elif not owned[j]:
                        grads[j] = grads[j].copy()
                        owned[j] = True
                    sl = [slice(None)] * grads[j].ndim
                    sl[pg.axis] = slice(pg.start, pg.stop)
                    grads[j][tuple(sl)] += pg.grad
                elif grads[j] is None:
                    grads[j] = pg
                    owned[j] = False
                elif owned[j]:
                    grads[j] += pg
                else:
                    grads[j] = grads[j] + pg
                    owned[j] = True
        out = {}
        for name, v in self.params.items():
            g = grads[v.idx] if v.idx < n else None
            out[name] = np.zeros_like(v.value) if g is None else np.array(g, dtype=self.dtype).reshape(v.value.shape)
        return out


def _scaled(x, factor):
    if isinstance(x, RowSliceGrad):
        return RowSliceGrad(x.start, x.stop, x.grad * factor, x.axis)
    return x * factor


def _same_shape(op: str, a: Var, b: Var):
    if a.value.shape != b.value.shape:
        raise DimensionError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def matmul(a: Var, b: Var) -> Var:
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2 or av.shape[1] != bv.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {av.shape} by {bv.shape}")

    def vjp(g):
        return (g @ bv.T if a.requires_grad else None, av.T @ g if b.requires_grad else None)

    return a.tape.record(av @ bv, (a, b), vjp, "matmul")


def add(a: Var, b: Var) -> Var:
    _same_shape("add", a, b)
    return a.tape.record(a.value + b.value, (a, b), lambda g: (g, g), "add")


def sub(a: Var, b: Var) -> Var:
    _same_shape("sub", a, b)
    return a.tape.record(a.value - b.value, (a, b), lambda g: (g, -g), "sub")


def mul(a: Var, b: Var) -> Var:
    """Hadamard product."""
    _same_shape("mul", a, b)
    av, bv = a.value, b.value
    return a.tape.record(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a: Var, k: float) -> Var:
    k = float(k)
    return a.tape.record(a.value * k, (a,), lambda g: (g * k,), "scale")


def logistic(x: np.ndarray) -> np.ndarray:
    """Elementwise ``1 / (1 + exp(-x))``; saturates to 0 without warnings."""
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-x))


def sigmoid(a: Var) -> Var:
    y = logistic(a.value)
    return a.tape.record(y, (a,), lambda g: (g * y * (1.0 - y),), "sigmoid")


def tanh(a: Var) -> Var:
    y = np.tanh(a.value)
    return a.tape.record(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh, "scale": scale}


def elementwise(op: str, *args):
    """Dispatch by name: ``elementwise("sigmoid", x)``, ``elementwise("scale", x, 2.0)``."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ContractError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


def sum_all(a: Var) -> Var:
    shape = a.value.shape
    return a.tape.record(np.array(a.value.sum()), (a,), lambda g: (np.full(shape, g),), "sum_all")


def rows(a: Var, start: int, stop: int) -> Var:
    """Rows ``start:stop`` of a 2-d array."""
    if not 0 <= start <= stop <= a.value.shape[0]:
        raise DimensionError(f"rows: [{start}:{stop}] out of range for {a.value.shape}")
    return a.tape.record(a.value[start:stop], (a,), lambda g: (RowSliceGrad(start, stop, g, 0),), "rows")


def cols(a: Var, start: int, stop: int) -> Var:
    """Columns ``start:stop`` of a 2-d array."""
    if a.value.ndim != 2 or not 0 <= start <= stop <= a.value.shape[1]:
        raise DimensionError(f"cols: [{start}:{stop}] out of range for {a.value.shape}")
    return a.tape.record(a.value[:, start:stop], (a,), lambda g: (RowSliceGrad(start, stop, g, 1),), "cols")


def concat_cols(parts: Sequence[Var]) -> Var:
    """Concatenate along the last axis; 1-d parts become one long vector."""
    vals = [p.value for p in parts]
    lead = {v.shape[:-1] for v in vals}
    if len(lead) != 1:
        raise DimensionError(f"concat_cols: leading shapes differ {[v.shape for v in vals]}")
    edges = np.cumsum([0] + [v.shape[-1] for v in vals])

    def vjp(g):
        return tuple(g[..., edges[i]:edges[i + 1]] for i in range(len(vals)))

    return parts[0].tape.record(np.concatenate(vals, axis=-1), tuple(parts), vjp, "concat_cols")


def broadcast_rows(a: Var, n: int) -> Var:
    """Stack a vector ``n`` times into an ``n x len`` matrix."""
    if a.value.ndim != 1:
        raise DimensionError(f"broadcast_rows: expected a vector, got {a.value.shape}")
    return a.tape.record(np.tile(a.value, (n, 1)), (a,), lambda g: (g.sum(axis=0),), "broadcast_rows")


def blend(k: Var, new: Var, old: Var) -> Var:
    """Convex mix ``k*new + (1-k)*old``.

    Written in that order so that k == 0 returns ``old`` and k == 1 returns
    ``new`` without rounding.
    """
    _same_shape("blend", k, new)
    _same_shape("blend", k, old)
    kv, nv, ov = k.value, new.value, old.value
    out = kv * nv + (1.0 - kv) * ov

    def vjp(g):
        return (g * (nv - ov) if k.requires_grad else None, g * kv, g * (1.0 - kv))

    return k.tape.record(out, (k, new, old), vjp, "blend")


def cross_entropy(logits: Var, labels) -> Var:
    """Mean softmax cross-entropy over the rows of ``logits``."""
    z = logits.value
    labels = np.asarray(labels)
    if z.ndim != 2 or labels.shape != (z.shape[0],):
        raise DimensionError(f"cross_entropy: logits {z.shape} vs labels {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= z.shape[1]):
        raise ContractError(f"cross_entropy: label out of range [0, {z.shape[1]})")
    labels = labels.astype(np.intp)
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - lse
    n = z.shape[0]
    value = np.array(-logp[np.arange(n), labels].mean())

    def vjp(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (p * (g / n),)

    return logits.tape.record(value, (logits,), vjp, "cross_entropy")


def finite_difference_grad(
    f: Callable[[Mapping[str, np.ndarray]], float],
    params: Mapping[str, np.ndarray],
    epsilon: float = 1e-5,
    names: Sequence[str] | None = None,
) -> dict[str, np.ndarray]:
    """Central differences of ``f`` for every coordinate of ``params``.

    ``f`` receives a dict of plain float64 arrays and must not depend on any
    hidden random state.  No tape is involved.
    """
    if not epsilon > 0:
        raise ContractError("epsilon must be positive")
    work = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    out = {}
    for name in names if names is not None else list(work):
        arr = work[name]
        g = np.zeros_like(arr)
        flat, gflat = arr.reshape(-1), g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            fp = float(f(work))
            flat[i] = orig - epsilon
            fm = float(f(work))
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise EvaluationError(f"non-finite f at {name}[{np.unravel_index(i, arr.shape)}]")
            gflat[i] = (fp - fm) / (2.0 * epsilon)
        out[name] = g
    return out
