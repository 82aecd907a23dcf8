"""Dense tensors with tape-based reverse-mode differentiation.

Only the handful of operations the convolutional seq2seq models need are
provided.  Every op works on arrays with optional leading batch axes, keeps
the dtype of its inputs (float32 for training, float64 for gradient checks)
and refuses to emit non-finite values.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


class GraphConsumedError(RuntimeError):
    """Raised on a second backward pass over the same recorded graph."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_op", "_consumed")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float32)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = ""
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op or 'leaf'})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite value produced by {op}")
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out._op = op
    out._consumed = False
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# elementwise and linear algebra


def add(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a = _as_tensor(a)
    b = _as_tensor(b, like=a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product with numpy broadcasting over leading axes."""
    ad, bd = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        gb = np.swapaxes(ad, -1, -2) @ g
        return _unbroadcast(ga, ad.shape), _unbroadcast(gb, bd.shape)

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """x[..., in] @ weight[out, in].T + bias[out]."""
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = x2 @ wd.T
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, wd.shape[0])

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = (g2 @ wd).reshape(xd.shape)
        gw = g2.T @ x2
        gb = g2.sum(axis=0) if bias is not None else None
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    return _make(out, parents, backward, "linear")


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return _make(y, (x,), lambda g: (g * y * (1 - y),), "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # branch-free stable form
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e)).astype(z.dtype, copy=False)


def glu(x: Tensor) -> Tensor:
    """Gated linear unit over the last axis: a * sigmoid(b), halving channels."""
    c = x.shape[-1]
    if c % 2:
        raise ValueError(f"glu needs an even channel count, got {c}")
    a, b = x.data[..., : c // 2], x.data[..., c // 2:]
    s = _sigmoid(b)
    out = a * s

    def backward(g):
        return (np.concatenate([g * s, g * a * s * (1 - s)], axis=-1),)

    return _make(out, (x,), backward, "glu")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    splits = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make(out, tuple(tensors), backward, "concat")


def reduce_sum(x: Tensor) -> Tensor:
    shape = x.shape
    return _make(np.asarray(x.data.sum(), dtype=x.dtype), (x,),
                 lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def swap_last(x: Tensor) -> Tensor:
    return _make(np.swapaxes(x.data, -1, -2), (x,), lambda g: (np.swapaxes(g, -1, -2),), "swap")


def embedding(table: Tensor, idx: np.ndarray) -> Tensor:
    """Row lookup; gradient rows are scatter-added."""
    idx = np.asarray(idx)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise IndexError(f"embedding index out of range [0, {table.shape[0]})")
    rows = table.shape[0]

    def backward(g):
        gt = np.zeros((rows, g.shape[-1]), dtype=g.dtype)
        np.add.at(gt, idx.reshape(-1), g.reshape(-1, g.shape[-1]))
        return (gt,)

    return _make(table.data[idx], (table,), backward, "embedding")


def dropout(x: Tensor, p: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity when p == 0 or rng is None."""
    if p <= 0 or rng is None:
        return x
    if p >= 1:
        return mul(x, np.zeros_like(x.data))
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1 - p)
    return mul(x, keep)


# ---------------------------------------------------------------------------
# convolution


def conv1d(x: Tensor, kernels: Tensor, bias: Tensor | None = None, mode: str = "same") -> Tensor:
    """1-D convolution over time.

    x is [..., T, Cin], kernels [Cout, Cin, W]; returns [..., T, Cout].
    ``same`` pads (W-1)/2 zeros on both sides (W must be odd); ``causal``
    pads W-1 zeros on the left so position t only sees inputs <= t.
    """
    cout, cin, width = kernels.shape
    xd = x.data
    if xd.ndim < 2 or xd.shape[-1] != cin:
        raise ValueError(f"conv1d: input channels {xd.shape[-1:]} do not match kernel Cin={cin}")
    T = xd.shape[-2]
    if T < 1:
        raise ValueError("conv1d: empty sequence")
    if mode == "same":
        if width % 2 == 0:
            raise ValueError("conv1d: same mode needs an odd kernel width")
        left = right = (width - 1) // 2
    elif mode == "causal":
        left, right = width - 1, 0
    else:
        raise ValueError(f"conv1d: unknown mode {mode!r}")
    lead = xd.shape[:-2]
    x3 = xd.reshape(-1, T, cin)
    xp = np.pad(x3, ((0, 0), (left, right), (0, 0)))
    # [B, T, Cin, W] -> [B*T, W*Cin]; the copy keeps the matmul on the BLAS path
    cols = np.ascontiguousarray(sliding_window_view(xp, width, axis=1).transpose(0, 1, 3, 2))
    cols = cols.reshape(-1, width * cin)
    kmat = np.ascontiguousarray(kernels.data.transpose(2, 1, 0).reshape(width * cin, cout))
    out = cols @ kmat
    if bias is not None:
        out += bias.data
    out = out.reshape(*lead, T, cout)

    def backward(g):
        g2 = np.ascontiguousarray(g.reshape(-1, cout))
        gk = (cols.T @ g2).reshape(width, cin, cout).transpose(2, 1, 0)
        gcols = (g2 @ kmat.T).reshape(x3.shape[0], T, width, cin)
        gxp = np.zeros_like(xp)
        for w in range(width):
            gxp[:, w:w + T, :] += gcols[:, :, w, :]
        gx = gxp[:, left:left + T, :].reshape(xd.shape)
        if bias is None:
            return gx, gk
        return gx, gk, g2.sum(axis=0)

    parents = (x, kernels, bias) if bias is not None else (x, kernels)
    return _make(out, parents, backward, "conv1d")


# ---------------------------------------------------------------------------
# normalisation and losses


def softmax_row(x) -> Tensor:
    """Numerically stable softmax over the last axis."""
    x = _as_tensor(x)
    if x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "softmax")


def masked_softmax(x: Tensor, mask: np.ndarray) -> Tensor:
    """Softmax over the last axis where ``mask`` False positions get weight 0.

    ``mask`` broadcasts against x.  A row with no valid position is an error.
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
    if not mask.any(axis=-1).all():
        raise ValueError("attention row with every position masked")
    z = np.where(mask, x.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = (e / e.sum(axis=-1, keepdims=True)).astype(x.dtype, copy=False)

    def backward(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _make(y, (x,), backward, "masked_softmax")


def log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def cross_entropy(logits: Tensor, target, weights: np.ndarray | None = None) -> Tensor:
    """Mean of -log softmax(logits)[target] over the positions with weight 1.

    logits is [..., V] and target an int (or int array matching the leading
    axes).  ``weights`` (0/1 per position) excludes padding from the mean.
    """
    V = logits.shape[-1]
    tgt = np.asarray(target)
    if tgt.shape != logits.shape[:-1]:
        raise ValueError(f"target shape {tgt.shape} does not match logits {logits.shape}")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= V):
        raise IndexError(f"target index out of range [0, {V})")
    lsm = log_softmax(logits.data)
    flat = lsm.reshape(-1, V)
    tflat = tgt.reshape(-1)
    picked = flat[np.arange(tflat.size), tflat]
    w = np.ones(tflat.size, dtype=logits.dtype) if weights is None else np.asarray(weights, dtype=logits.dtype).reshape(-1)
    n = w.sum()
    if n <= 0:
        raise ValueError("cross_entropy over zero target positions")
    loss = -(picked * w).sum() / n

    def backward(g):
        p = np.exp(flat)
        p[np.arange(tflat.size), tflat] -= 1
        p *= (w / n)[:, None]
        return ((g * p).reshape(logits.shape).astype(logits.dtype, copy=False),)

    return _make(np.asarray(loss, dtype=logits.dtype), (logits,), backward, "cross_entropy")


# ---------------------------------------------------------------------------
# reverse pass


def backward(loss: Tensor, params: Iterable[Tensor] | None = None) -> list[np.ndarray]:
    """Back-propagate from a scalar loss.

    Sets ``.grad`` on every leaf that requires grad and returns the gradients
    of ``params`` (zeros for parameters the loss does not depend on).  The
    recorded graph is released afterwards; a second call raises.
    """
    if loss.data.shape != ():
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if loss._consumed:
        raise GraphConsumedError("graph already consumed; run a new forward pass")
    params = list(params) if params is not None else None

    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}
    for node in reversed(order):
        g = grads.pop(id(node), None) if node._backward is not None else grads.get(id(node))
        if node._backward is None:
            if node.requires_grad:
                node.grad = g if g is not None else np.zeros_like(node.data)
            continue
        if g is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
        node._backward = None
        node._parents = ()
        node._consumed = True
    loss._consumed = True

    if params is None:
        return []
    out = []
    for p in params:
        out.append(p.grad if p.grad is not None and id(p) in seen else np.zeros_like(p.data))
    return out


# ---------------------------------------------------------------------------
# optimiser


@dataclass
class NesterovState:
    """Velocity buffers for Nesterov momentum.

    Parameters held by the model are the look-ahead point theta + mu*v, so
    each step needs only one gradient evaluation.  ``base_params`` recovers
    theta itself.
    """

    lr: float
    momentum: float
    velocity: list[np.ndarray] = field(default_factory=list)

    def __post_init__(self):
        if not self.lr >= 0:
            raise ValueError(f"lr must be non-negative, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ValueError(f"momentum must be in [0, 1), got {self.momentum}")

    @classmethod
    def for_params(cls, params: Sequence[Tensor], lr: float, momentum: float) -> NesterovState:
        return cls(lr, momentum, [np.zeros_like(p.data) for p in params])

    def base_params(self, params: Sequence[Tensor]) -> list[np.ndarray]:
        return [p.data - self.momentum * v for p, v in zip(params, self.velocity)]


def nesterov_step(params: Sequence[Tensor], grads: Sequence[np.ndarray], state: NesterovState) -> None:
    """v <- mu v - lr g(theta + mu v); theta <- theta + v, updating in place.

    With the look-ahead parameterisation phi = theta + mu v this becomes
    phi <- phi + mu v_new - lr g.
    """
    if not (len(params) == len(grads) == len(state.velocity)):
        raise ValueError("params, grads and velocity differ in length")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ValueError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        if not np.isfinite(g).all():
            raise NonFiniteError("non-finite gradient passed to nesterov_step")
    mu = state.momentum
    lr = state.lr
    for p, g, v in zip(params, grads, state.velocity):
        v *= mu
        v -= lr * g
        p.data += mu * v - lr * g


def global_norm(grads: Sequence[np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.vdot(g, g)) for g in grads)))
