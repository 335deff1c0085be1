"""Define-by-run reverse-mode differentiation over numpy arrays.

Each operation returns a :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to parent gradients. :func:`backward`
walks the tape once in reverse topological order and then frees it; a second
call on the same loss raises :class:`~snri_lab.errors.SpentGraph`.

Shapes never broadcast silently. Binary elementwise ops accept either equal
shapes or a 0-d scalar on one side; anything else goes through :func:`expand`.
All values are float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import NonFiniteValue, NonScalarLoss, ShapeMismatch, SpentGraph

DTYPE = np.float64


class Tensor:
    __slots__ = ("value", "requires_grad", "name", "_parents", "_backward", "_op", "_spent")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None):
        self.value = np.asarray(value, dtype=DTYPE, order="C")
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"
        self._spent = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_leaf(self) -> bool:
        return self._op == "leaf"

    def item(self) -> float:
        return float(self.value)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, op={self._op}{tag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return slice_(self, index)


def parameter(value, name: str | None = None) -> Tensor:
    return Tensor(value, requires_grad=True, name=name)


def constant(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _node(value: np.ndarray, parents: Sequence[Tensor], op: str, backward_fn) -> Tensor:
    if not np.all(np.isfinite(value)):
        raise NonFiniteValue(f"{op} produced a non-finite value")
    out = Tensor(value)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
        out._op = op
    return out


def _unbroadcast_scalar(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    return np.asarray(grad.sum()).reshape(shape)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> tuple[int, ...]:
    if a.shape == b.shape:
        return a.shape
    if a.ndim == 0:
        return b.shape
    if b.ndim == 0:
        return a.shape
    raise ShapeMismatch(f"{op}: shapes {a.shape} and {b.shape} differ; use expand()")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "add")

    def backward(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(g, b.shape)

    return _node(a.value + b.value, (a, b), "add", backward)


def sub(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "sub")

    def backward(g):
        return _unbroadcast_scalar(g, a.shape), _unbroadcast_scalar(-g, b.shape)

    return _node(a.value - b.value, (a, b), "sub", backward)


def mul(a, b) -> Tensor:
    a, b = constant(a), constant(b)
    _check_elementwise(a, b, "mul")

    def backward(g):
        return (_unbroadcast_scalar(g * b.value, a.shape),
                _unbroadcast_scalar(g * a.value, b.shape))

    return _node(a.value * b.value, (a, b), "mul", backward)


def relu(x: Tensor) -> Tensor:
    mask = x.value > 0
    return _node(np.where(mask, x.value, 0.0), (x,), "relu", lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _node(y, (x,), "sigmoid", lambda g: (g * y * (1.0 - y),))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.value)
    return _node(y, (x,), "tanh", lambda g: (g * (1.0 - y * y),))


def log(x: Tensor) -> Tensor:
    v = x.value
    if np.any(v <= 0):
        raise NonFiniteValue("log of a non-positive value")
    return _node(np.log(v), (x,), "log", lambda g: (g / v,))


def square(x: Tensor) -> Tensor:
    v = x.value
    return _node(v * v, (x,), "square", lambda g: (2.0 * g * v,))


def stop_gradient(x: Tensor) -> Tensor:
    """Identity forward; the returned tensor has no parents, so nothing flows back."""
    return Tensor(x.value.copy())


# ------------------------------------------------------------------ reductions

def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = x.shape

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.sum(x.value, axis=axis, keepdims=keepdims), (x,), "sum", backward)


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = x.value.size if axis is None else np.prod([x.shape[a] for a in np.atleast_1d(axis)])
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def mean_pool_time(x: Tensor) -> Tensor:
    """Average over the frame axis: (B, N, C) -> (B, C)."""
    if x.ndim < 2:
        raise ShapeMismatch("mean_pool_time needs at least (N, C)")
    return mean(x, axis=-2)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    v = x.value
    shifted = v - v.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _node(out, (x,), "log_softmax", backward)


# -------------------------------------------------------------- shape helpers

def reshape(x: Tensor, shape) -> Tensor:
    old = x.shape
    return _node(x.value.reshape(shape), (x,), "reshape", lambda g: (g.reshape(old),))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit numpy-style broadcast; the backward pass sums over copied axes."""
    shape = tuple(shape)
    try:
        out = np.broadcast_to(x.value, shape)
    except ValueError as exc:
        raise ShapeMismatch(f"cannot expand {x.shape} to {shape}") from exc
    src = x.shape

    def backward(g):
        lead = g.ndim - len(src)
        g = g.sum(axis=tuple(range(lead))) if lead else g
        axes = tuple(i for i, n in enumerate(src) if n == 1 and g.shape[i] != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g,)

    return _node(out.copy(), (x,), "expand", backward)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [constant(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    for t in tensors[1:]:
        if t.ndim != ndim or any(t.shape[i] != tensors[0].shape[i] for i in range(ndim) if i != ax):
            raise ShapeMismatch(f"concat: incompatible shapes {[t.shape for t in tensors]}")
    sizes = np.cumsum([t.shape[ax] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=ax))

    return _node(np.concatenate([t.value for t in tensors], axis=ax), tensors, "concat", backward)


def slice_(x: Tensor, index) -> Tensor:
    shape = x.shape

    def backward(g):
        full = np.zeros(shape, dtype=DTYPE)
        full[index] += g
        return (full,)

    return _node(np.array(x.value[index]), (x,), "slice", backward)


# ------------------------------------------------------------ linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` with ``a`` of shape (..., N, D) and ``b`` either a shared (D, M)
    matrix or a batch with the same leading dims as ``a``."""
    a, b = constant(a), constant(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeMismatch(f"matmul: {a.shape} @ {b.shape}")
    shared = b.ndim == 2
    if not shared and a.shape[:-2] != b.shape[:-2]:
        raise ShapeMismatch(f"matmul: batch dims {a.shape[:-2]} vs {b.shape[:-2]}")

    def backward(g):
        ga = None
        if a.requires_grad:
            ga = (g.reshape(-1, g.shape[-1]) @ b.value.T).reshape(a.shape) if shared \
                else g @ np.swapaxes(b.value, -1, -2)
        if not b.requires_grad:
            gb = None
        elif shared:
            gb = a.value.reshape(-1, a.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(a.value, -1, -2) @ g
        return ga, gb

    if shared:
        out = (a.value.reshape(-1, a.shape[-1]) @ b.value).reshape(a.shape[:-1] + (b.shape[1],))
    else:
        out = a.value @ b.value
    return _node(out, (a, b), "matmul", backward)


def dense(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    y = matmul(x, w)
    if b is None:
        return y
    return add(y, expand(b, y.shape))


def _frames(xp: np.ndarray, k: int, stride: int, dilation: int, n_out: int) -> np.ndarray:
    bsz, _, cin = xp.shape
    s0, s1, s2 = xp.strides
    return as_strided(xp, shape=(bsz, n_out, k, cin),
                      strides=(s0, s1 * stride, s1 * dilation, s2), writeable=False)


def conv1d(x: Tensor, w: Tensor, stride: int = 1, dilation: int = 1,
           padding: tuple[int, int] = (0, 0)) -> Tensor:
    """Channels-last 1-D convolution (cross-correlation).

    x: (B, T, Cin), w: (K, Cin, Cout) -> (B, N, Cout) with
    N = (T + pad - dilation*(K-1) - 1) // stride + 1.
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"conv1d: x {x.shape}, w {w.shape}")
    k, cin, cout = w.shape
    pl, pr = padding
    bsz, t, _ = x.shape
    span = dilation * (k - 1) + 1
    n_out = (t + pl + pr - span) // stride + 1
    if n_out < 1:
        raise ShapeMismatch(f"conv1d: input length {t} shorter than kernel span {span}")
    xp = np.pad(x.value, ((0, 0), (pl, pr), (0, 0))) if pl or pr else np.ascontiguousarray(x.value)
    cols = _frames(xp, k, stride, dilation, n_out).reshape(bsz * n_out, k * cin)
    wm = w.value.reshape(k * cin, cout)
    out = (cols @ wm).reshape(bsz, n_out, cout)

    def backward(g):
        gw = None
        if w.requires_grad:
            gw = (cols.T @ g.reshape(-1, cout)).reshape(w.shape)
        if not x.requires_grad:
            return None, gw
        gcols = (g.reshape(-1, cout) @ wm.T).reshape(bsz, n_out, k, cin)
        gxp = np.zeros_like(xp)
        last = stride * (n_out - 1) + 1
        for j in range(k):
            off = j * dilation
            gxp[:, off:off + last:stride, :] += gcols[:, :, j, :]
        gx = gxp[:, pl:pl + t, :]
        return gx, gw

    return _node(out, (x, w), "conv1d", backward)


def transposed_conv1d(x: Tensor, w: Tensor, stride: int = 1) -> Tensor:
    """Overlap-add synthesis, the adjoint of :func:`conv1d` without padding.

    x: (B, N, Cin), w: (K, Cin, Cout) -> (B, (N-1)*stride + K, Cout).
    """
    if x.ndim != 3 or w.ndim != 3 or x.shape[2] != w.shape[1]:
        raise ShapeMismatch(f"transposed_conv1d: x {x.shape}, w {w.shape}")
    k, cin, cout = w.shape
    bsz, n, _ = x.shape
    t_out = (n - 1) * stride + k
    wm = w.value.transpose(1, 0, 2).reshape(cin, k * cout)
    contrib = (x.value @ wm).reshape(bsz, n, k, cout)
    out = np.zeros((bsz, t_out, cout), dtype=DTYPE)
    last = stride * (n - 1) + 1
    for j in range(k):
        out[:, j:j + last:stride, :] += contrib[:, :, j, :]

    def backward(g):
        gp = np.ascontiguousarray(g)
        gcontrib = _frames(gp, k, stride, 1, n).reshape(bsz, n, k * cout)
        gx = gcontrib @ wm.T
        gw = (x.value.reshape(-1, cin).T @ gcontrib.reshape(-1, k * cout))
        gw = gw.reshape(cin, k, cout).transpose(1, 0, 2)
        return gx, gw

    return _node(out, (x, w), "transposed_conv1d", backward)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeMismatch(f"layer_norm: gain {gain.shape}, bias {bias.shape}, features {c}")
    mu = x.value.mean(axis=-1, keepdims=True)
    xc = x.value - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gain.value + bias.value

    def backward(g):
        gh = g * gain.value
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        lead = tuple(range(g.ndim - 1))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _node(out, (x, gain, bias), "layer_norm", backward)


def mel_apply(power: Tensor, weights: np.ndarray, floor: float = 1e-10) -> Tensor:
    """log(power @ weights.T + floor) with a fixed (n_mels, n_bins) filterbank."""
    weights = np.asarray(weights, dtype=DTYPE)
    if power.shape[-1] != weights.shape[1]:
        raise ShapeMismatch(f"mel_apply: power {power.shape}, filterbank {weights.shape}")
    mel = power.value @ weights.T + floor

    def backward(g):
        return ((g / mel) @ weights,)

    return _node(np.log(mel), (power,), "mel_apply", backward)


# ------------------------------------------------------------------- backward

def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> dict[Tensor, np.ndarray]:
    """Reverse-mode gradients of a scalar ``loss``.

    Returns a map from every leaf reached (plus every tensor in ``params``,
    zero-filled when unreachable) to its gradient. The tape is released
    afterwards.
    """
    if loss.value.size != 1:
        raise NonScalarLoss(f"loss must be scalar, got shape {loss.shape}")
    if loss._spent:
        raise SpentGraph("backward() already ran on this graph")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    order = _topo_order(loss) if loss.requires_grad else []
    result: dict[Tensor, np.ndarray] = {}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if node.is_leaf:
            if g is not None:
                result[node] = g
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    for node in order:
        if not node.is_leaf:
            node._parents = ()
            node._backward = None
            node._spent = True
    loss._spent = True
    if params is not None:
        for p in params:
            if p not in result:
                result[p] = np.zeros_like(p.value)
    return result


# ------------------------------------------------------------------ optimizer

@dataclass
class AdamState:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: AdamState) -> AdamState:
    """In-place Adam update with bias correction; returns the advanced state."""
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and g.shape != p.shape:
            raise ShapeMismatch(f"gradient for {name}: {g.shape} vs {p.shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.value)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.value)
            state.v[name] = np.zeros_like(p.value)
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.value -= state.learning_rate * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return state


# ---------------------------------------------------------------- grad check

@dataclass
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    tol: float
    per_param: dict[str, float]

    @property
    def passed(self) -> bool:
        return self.max_rel_error <= self.tol


def grad_check(build_loss: Callable[[], Tensor], params: dict[str, Tensor], h: float = 1e-5,
               tol: float = 1e-4, max_coords: int | None = 24, seed: int = 0,
               exclude: Iterable[str] = (), abs_floor: float = 1e-6) -> GradCheckReport:
    """Compare analytic gradients with central differences.

    ``build_loss`` must rebuild the graph from the current parameter values
    on every call. Up to ``max_coords`` coordinates per parameter are sampled.
    Relative error is ``|a - n| / max(|a|, |n|, abs_floor)``. Parameters named
    in ``exclude`` (e.g. those behind a stop-gradient) are skipped.
    """
    rng = np.random.default_rng(seed)
    skip = set(exclude)
    loss = build_loss()
    by_tensor = backward(loss, params.values())
    per_param: dict[str, float] = {}
    n_checked = 0
    for name, p in params.items():
        if name in skip:
            continue
        analytic = by_tensor[p]
        flat = p.value.reshape(-1)
        idx = np.arange(flat.size)
        if max_coords is not None and flat.size > max_coords:
            idx = rng.choice(flat.size, size=max_coords, replace=False)
        worst = 0.0
        for i in idx:
            orig = flat[i]
            flat[i] = orig + h
            up = build_loss().item()
            flat[i] = orig - h
            down = build_loss().item()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), abs_floor)
            worst = max(worst, err)
            n_checked += 1
        per_param[name] = worst
    return GradCheckReport(max(per_param.values(), default=0.0), n_checked, tol, per_param)
