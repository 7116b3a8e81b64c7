"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed while a :class:`GradTape` is active are recorded whenever
one of their inputs is tracked by that tape (a watched leaf or the result of
an earlier recorded operation).  :func:`backward` replays the tape in reverse
and returns one gradient array per watched leaf.

The tape is rebuilt for every forward pass; nothing persists between passes.
"""

from __future__ import annotations

import threading
from collections.abc import Callable, Hashable, Mapping, Sequence
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, ShapeError

__all__ = [
    "Tensor",
    "GradTape",
    "backward",
    "finite_diff_gradient",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "transpose",
    "reshape",
    "exp",
    "log",
    "softplus",
    "sigmoid",
    "square",
    "power",
    "relu",
    "tsum",
    "tmean",
    "tmax",
    "getitem",
    "stack",
    "concat",
    "take",
    "linear_recurrence",
    "selective_ssm",
    "cross_entropy",
    "mse",
]

CE_PROB_FLOOR = 1e-9

_state = threading.local()


def _active_tape() -> GradTape | None:
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """Immutable dense array of 64-bit floats."""

    __slots__ = ("data", "_tape")
    __array_priority__ = 100

    def __init__(self, data):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self._tape = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> Tensor:
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, data={np.array2string(self.data, threshold=8)})"

    def __len__(self):
        return len(self.data)

    __add__ = lambda self, o: add(self, o)  # noqa: E731
    __radd__ = lambda self, o: add(o, self)  # noqa: E731
    __sub__ = lambda self, o: sub(self, o)  # noqa: E731
    __rsub__ = lambda self, o: sub(o, self)  # noqa: E731
    __mul__ = lambda self, o: mul(self, o)  # noqa: E731
    __rmul__ = lambda self, o: mul(o, self)  # noqa: E731
    __truediv__ = lambda self, o: div(self, o)  # noqa: E731
    __rtruediv__ = lambda self, o: div(o, self)  # noqa: E731
    __matmul__ = lambda self, o: matmul(self, o)  # noqa: E731
    __neg__ = lambda self: neg(self)  # noqa: E731
    __getitem__ = lambda self, idx: getitem(self, idx)  # noqa: E731
    __pow__ = lambda self, p: power(self, p)  # noqa: E731

    def sum(self, axis=None, keepdims=False) -> Tensor:
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False) -> Tensor:
        return tmean(self, axis=axis, keepdims=keepdims)

    def max(self, axis=None, keepdims=False) -> Tensor:
        return tmax(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape) -> Tensor:
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def exp(self) -> Tensor:
        return exp(self)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() requires a single-element tensor, got shape {t.shape}")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    out: Tensor
    inputs: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    alias: tuple[Hashable, Hashable] | None = None


@dataclass
class GradTape:
    """Ordered record of primitive applications plus the watched leaf set.

    Use as a context manager; operations run inside the ``with`` block are
    recorded when they touch a tracked tensor.
    """

    nodes: list[_Node] = field(default_factory=list)
    leaves: dict[Hashable, Tensor] = field(default_factory=dict)

    def __enter__(self) -> GradTape:
        stack = getattr(_state, "stack", None)
        if stack is None:
            stack = _state.stack = []
        stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def watch(self, data, key: Hashable) -> Tensor:
        """Register ``data`` as the leaf identified by ``key``."""
        if key in self.leaves:
            raise ContractError(f"leaf {key!r} already watched on this tape")
        t = Tensor(np.array(data, dtype=np.float64, copy=True))
        t._tape = self
        self.leaves[key] = t
        return t

    def alias(self, source: Tensor, key: Hashable, tag: Hashable) -> Tensor:
        """Identity view of ``source`` whose incoming gradient is kept under
        ``(key, tag)`` in addition to flowing back into ``source``.

        Used to split a leaf's gradient into per-timestep contributions.
        """
        out = Tensor(source.data)
        if source._tape is self:
            out._tape = self
            self.nodes.append(_Node(out, (source,), lambda g: (g,), alias=(key, tag)))
        return out


def _record(out_data, inputs: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None:
        for t in inputs:
            if t._tape is tape:
                out._tape = tape
                tape.nodes.append(_Node(out, inputs, vjp))
                break
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    ndiff = g.ndim - len(shape)
    if ndiff > 0:
        g = g.sum(axis=tuple(range(ndiff)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _broadcast_shape(name: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}") from None


# -- elementwise -----------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)
    sa, sb = a.shape, b.shape
    return _record(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)
    ad, bd = a.data, b.data
    return _record(
        ad * bd,
        (a, b),
        lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return _record(
        out,
        (a, b),
        lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)),
    )


def neg(a) -> Tensor:
    a = as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return _record(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid_np(x: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid_np(ad),))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = _sigmoid_np(a.data)
    return _record(out, (a,), lambda g: (g * out * (1.0 - out),))


def square(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return _record(ad * ad, (a,), lambda g: (2.0 * g * ad,))


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    p = float(p)
    return _record(ad**p, (a,), lambda g: (g * p * ad ** (p - 1.0),))


def relu(a) -> Tensor:
    """max(0, a); the subgradient at 0 is taken as 0."""
    a = as_tensor(a)
    ad = a.data
    return _record(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0.0),))


# -- linear algebra / shape ------------------------------------------------


def matmul(a, b) -> Tensor:
    """``a @ b`` with ``b`` two-dimensional and ``a`` of any rank >= 1."""
    a, b = as_tensor(a), as_tensor(b)
    if b.ndim != 2 or a.ndim < 1 or a.shape[-1] != b.shape[0]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ bd.T
        if ad.ndim == 1:
            gb = np.outer(ad, g)
        else:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _record(ad @ bd, (a, b), vjp)


def transpose(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ShapeError(f"transpose: expected a 2-D tensor, got shape {a.shape}")
    return _record(a.data.T, (a,), lambda g: (g.T,))


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {src} to {tuple(shape)}") from None
    return _record(out, (a,), lambda g: (g.reshape(src),))


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, src).copy(),)

    return _record(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    src = a.shape
    n = a.size if axis is None else np.prod([src[i] for i in np.atleast_1d(axis)])

    def vjp(g):
        if not keepdims and axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / n, src).copy(),)

    return _record(a.data.mean(axis=axis, keepdims=keepdims), (a,), vjp)


def tmax(a, axis=None, keepdims=False) -> Tensor:
    """Max reduction; the gradient goes to the first maximizing entry."""
    a = as_tensor(a)
    ad = a.data
    if axis is None:
        flat = int(np.argmax(ad))

        def vjp(g):
            out = np.zeros_like(ad)
            out.flat[flat] = np.asarray(g).reshape(-1)[0]
            return (out,)

        out = ad.reshape(-1)[flat]
        if keepdims:
            out = np.reshape(out, (1,) * ad.ndim)
        return _record(out, (a,), vjp)

    if not isinstance(axis, int):
        raise ContractError("tmax supports a single integer axis or axis=None")
    idx = np.expand_dims(np.argmax(ad, axis=axis), axis)

    def vjp(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        out = np.zeros_like(ad)
        np.put_along_axis(out, idx, g, axis=axis)
        return (out,)

    return _record(ad.max(axis=axis, keepdims=keepdims), (a,), vjp)


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    src = a.shape

    def vjp(g):
        out = np.zeros(src)
        np.add.at(out, index, g)
        return (out,)

    return _record(a.data[index], (a,), vjp)


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise ShapeError(f"stack: inputs have differing shapes {sorted(shapes)}")
    n = len(ts)
    return _record(
        np.stack([t.data for t in ts], axis=axis),
        ts,
        lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)),
    )


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = tuple(as_tensor(t) for t in tensors)
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in ts]}") from None
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]
    return _record(out, ts, lambda g: tuple(np.split(g, bounds, axis=axis)))


def take(table, indices) -> Tensor:
    """Row lookup ``table[indices]`` for an integer index array."""
    table = as_tensor(table)
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ContractError("take: indices must be integers")
    if table.ndim != 2:
        raise ShapeError(f"take: table must be 2-D, got {table.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError(f"take: index out of range for table with {table.shape[0]} rows")
    src = table.shape

    def vjp(g):
        out = np.zeros(src)
        np.add.at(out, idx.reshape(-1), g.reshape(-1, src[1]))
        return (out,)

    return _record(table.data[idx], (table,), vjp)


def linear_recurrence(decay, drive) -> Tensor:
    """Diagonal linear recurrence along axis 1.

    ``h[:, t] = decay[:, t] * h[:, t-1] + drive[:, t]`` with ``h[:, -1] = 0``.
    ``decay`` must broadcast against ``drive``; the result has drive's shape.
    """
    decay, drive = as_tensor(decay), as_tensor(drive)
    if drive.ndim < 2:
        raise ShapeError(f"linear_recurrence: drive needs a time axis, got {drive.shape}")
    full = _broadcast_shape("linear_recurrence", decay, drive)
    if full != drive.shape or decay.ndim != drive.ndim:
        raise ShapeError(
            f"linear_recurrence: decay {decay.shape} must broadcast to drive {drive.shape}"
        )
    a, b = decay.data, drive.data
    steps = b.shape[1]
    hs = np.empty_like(b)
    h = np.zeros_like(b[:, 0])
    for t in range(steps):
        h = a[:, t] * h + b[:, t]
        hs[:, t] = h

    def vjp(g):
        gb = np.empty_like(b)
        ga = np.empty(b.shape)
        gh = np.zeros_like(b[:, 0])
        for t in range(steps - 1, -1, -1):
            gh = gh + g[:, t]
            gb[:, t] = gh
            if t > 0:
                ga[:, t] = gh * hs[:, t - 1]
            else:
                ga[:, t] = 0.0
            gh = gh * a[:, t]
        return _unbroadcast(ga, a.shape), gb

    return _record(hs, (decay, drive), vjp)


def selective_ssm(decay, write, u, read) -> Tensor:
    """Fused selective state-space core.

    With per-channel state ``h[b, c, :]`` (one row per channel ``c``)::

        h_t = decay_t * h_{t-1} + u_t[:, :, None] * write_t[:, None, :]
        y_t = h_t @ read_t

    Shapes: decay, write, read are [batch, seq, state]; u is
    [batch, seq, channels]; the result is [batch, seq, channels].
    """
    decay, write, u, read = (as_tensor(t) for t in (decay, write, u, read))
    if decay.ndim != 3 or u.ndim != 3:
        raise ShapeError(f"selective_ssm: expected rank-3 inputs, got {decay.shape} and {u.shape}")
    nb, seq, n = decay.shape
    if write.shape != (nb, seq, n) or read.shape != (nb, seq, n) or u.shape[:2] != (nb, seq):
        raise ShapeError(
            f"selective_ssm: decay {decay.shape}, write {write.shape}, u {u.shape}, read {read.shape}"
        )
    a, bw, ud, cr = decay.data, write.data, u.data, read.data
    states = np.empty((nb, seq, u.shape[2], n))
    y = np.empty(u.shape)
    h = np.zeros((nb, u.shape[2], n))
    for t in range(seq):
        h = a[:, t, None, :] * h + ud[:, t, :, None] * bw[:, t, None, :]
        states[:, t] = h
        y[:, t] = (h @ cr[:, t, :, None])[..., 0]

    def vjp(g):
        ga = np.empty_like(a)
        gw = np.empty_like(bw)
        gu = np.empty_like(ud)
        gc = np.empty_like(cr)
        gh = np.zeros_like(h)
        for t in range(seq - 1, -1, -1):
            g_t = g[:, t]
            h_t = states[:, t]
            gc[:, t] = (g_t[:, None, :] @ h_t)[:, 0]
            gh = gh + g_t[:, :, None] * cr[:, t, None, :]
            gw[:, t] = (ud[:, t, None, :] @ gh)[:, 0]
            gu[:, t] = (gh @ bw[:, t, :, None])[..., 0]
            if t > 0:
                ga[:, t] = np.einsum("bcn,bcn->bn", gh, states[:, t - 1])
            else:
                ga[:, t] = 0.0
            gh = gh * a[:, t, None, :]
        return ga, gw, gu, gc

    return _record(y, (decay, write, u, read), vjp)


# -- losses ----------------------------------------------------------------


def cross_entropy(logits, targets, ignore_index: int = -1) -> Tensor:
    """Mean negative log-likelihood over entries whose target != ignore_index.

    Probabilities are clamped to [1e-9, 1] before the log; entries in the
    clamped region contribute a zero gradient.
    """
    logits = as_tensor(logits)
    y = np.asarray(targets)
    if logits.shape[:-1] != y.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {y.shape}")
    z = logits.data.reshape(-1, logits.shape[-1])
    yf = y.reshape(-1)
    valid = yf != ignore_index
    n_valid = int(valid.sum())
    if n_valid == 0:
        raise ContractError("cross_entropy: no valid targets")
    if yf[valid].min() < 0 or yf[valid].max() >= z.shape[1]:
        raise ShapeError("cross_entropy: target class out of range")
    z = z - z.max(axis=1, keepdims=True)
    p = np.exp(z)
    p /= p.sum(axis=1, keepdims=True)
    rows = np.nonzero(valid)[0]
    py = p[rows, yf[rows]]
    loss = -np.log(np.clip(py, CE_PROB_FLOOR, 1.0)).sum() / n_valid
    src = logits.shape

    def vjp(g):
        grad = np.zeros_like(p)
        live = rows[py >= CE_PROB_FLOOR]
        grad[live] = p[live]
        grad[live, yf[live]] -= 1.0
        return ((np.asarray(g) / n_valid) * grad.reshape(src),)

    return _record(np.float64(loss), (logits,), vjp)


def mse(pred, target) -> Tensor:
    pred = as_tensor(pred)
    t = np.asarray(target, dtype=np.float64)
    if pred.shape != t.shape:
        raise ShapeError(f"mse: prediction {pred.shape} vs target {t.shape}")
    diff = pred.data - t
    n = diff.size
    return _record(np.float64((diff * diff).sum() / n), (pred,), lambda g: (2.0 * g * diff / n,))


# -- differentiation -------------------------------------------------------


def backward(tape: GradTape, loss: Tensor, per_step: bool = False):
    """Reverse pass over ``tape`` starting from the scalar ``loss``.

    Returns ``{key: gradient}`` with one entry per watched leaf (zeros for
    leaves the loss does not depend on).  With ``per_step=True`` also returns
    ``{key: {tag: gradient}}`` collected at :meth:`GradTape.alias` points.
    """
    if not isinstance(loss, Tensor) or loss.size != 1:
        shape = getattr(loss, "shape", None)
        raise ContractError(f"backward requires a scalar loss, got shape {shape}")
    if loss._tape is not None and loss._tape is not tape:
        raise ContractError("loss was recorded on a different tape")

    grads: dict[int, np.ndarray] = {}
    steps: dict[Hashable, dict[Hashable, np.ndarray]] = {}
    if loss._tape is tape:
        grads[id(loss)] = np.ones(loss.shape)
        for node in reversed(tape.nodes):
            g = grads.pop(id(node.out), None)
            if g is None:
                continue
            if node.alias is not None and per_step:
                key, tag = node.alias
                bucket = steps.setdefault(key, {})
                bucket[tag] = bucket[tag] + g if tag in bucket else g.copy()
            for inp, gi in zip(node.inputs, node.vjp(g)):
                if gi is None or inp._tape is not tape:
                    continue
                k = id(inp)
                if k in grads:
                    grads[k] = grads[k] + gi
                else:
                    grads[k] = gi
    out = {
        key: np.array(grads.get(id(leaf), np.zeros(leaf.shape)), dtype=np.float64).reshape(leaf.shape)
        for key, leaf in tape.leaves.items()
    }
    if per_step:
        return out, steps
    return out


def finite_diff_gradient(
    f: Callable[[Mapping[Hashable, np.ndarray]], float],
    params: Mapping[Hashable, np.ndarray],
    step: float = 1e-6,
) -> dict[Hashable, np.ndarray]:
    """Central-difference gradient of scalar ``f`` at ``params``."""
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in params.items()}
    out = {}
    for key, arr in work.items():
        grad = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = float(f(work))
            flat[i] = orig - step
            fm = float(f(work))
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        out[key] = grad
    return out
