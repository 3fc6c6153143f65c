"""Small reverse-mode autodiff over float64 numpy arrays.

Only the op set the denoiser, codec and losses need is provided: linear
layers, batched contractions (einsum), elementwise arithmetic, softmax,
layer norm, a few nonlinearities, reductions and an L2 norm, plus the
shape plumbing that glues them together.

Example:
    >>> x = Tensor([2.0, -3.0], requires_grad=True)
    >>> (x * x).sum().item()
    13.0
    >>> grad(0.5 * (x * x).sum(), [x])[0]
    array([ 2., -3.])
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NumericalError",
    "as_tensor",
    "grad",
    "no_grad",
    "is_grad_enabled",
    "linear",
    "einsum",
    "softmax",
    "layer_norm",
    "relu",
    "tanh",
    "silu",
    "gelu",
    "l2_norm",
    "concat",
    "where_const",
]


class NumericalError(ArithmeticError):
    """A forward or backward pass produced NaN or Inf."""

    def __init__(self, op: str, stage: str = "backward"):
        super().__init__(f"non-finite values in {stage} of '{op}'")
        self.op = op
        self.stage = stage


_GRAD_ENABLED = True


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (used for the EMA teacher and for sampling)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


class Tensor:
    __slots__ = ("data", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = "leaf"

    # -- basic protocol -------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __len__(self) -> int:
        return len(self.data)

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg}, op={self.op})"

    # -- arithmetic -----------------------------------------------------
    def __add__(self, other):
        return _add(self, as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -as_tensor(other))

    def __rsub__(self, other):
        return _add(as_tensor(other), -self)

    def __mul__(self, other):
        return _mul(self, as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return _mul(self, _reciprocal(other))
        return _mul(self, as_tensor(1.0 / np.asarray(other, dtype=np.float64)))

    def __neg__(self):
        return _unary(self, -self.data, lambda g: -g, "neg")

    def __matmul__(self, other):
        return matmul(self, as_tensor(other))

    def __getitem__(self, index):
        return _getitem(self, index)

    # -- shape ops --------------------------------------------------------
    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _unary(self, self.data.reshape(shape), lambda g: g.reshape(old), "reshape")

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inv = tuple(np.argsort(axes))
        return _unary(self, self.data.transpose(axes), lambda g: g.transpose(inv), "transpose")

    def broadcast_to(self, shape) -> "Tensor":
        old = self.shape
        return _unary(
            self, np.broadcast_to(self.data, shape).copy(), lambda g: _unbroadcast(g, old), "broadcast"
        )

    # -- reductions -----------------------------------------------------
    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        old = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return np.broadcast_to(g, old)

        return _unary(self, out, back, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            n = self.size
        else:
            axes = (axis,) if np.isscalar(axis) else tuple(axis)
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def square(self) -> "Tensor":
        x = self.data
        return _unary(self, x * x, lambda g: 2.0 * x * g, "square")

    def sqrt(self) -> "Tensor":
        out = np.sqrt(self.data)
        return _unary(self, out, lambda g: g / (2.0 * out), "sqrt")

    def exp(self) -> "Tensor":
        out = np.exp(self.data)
        return _unary(self, out, lambda g: g * out, "exp")

    def log(self) -> "Tensor":
        x = self.data
        return _unary(self, np.log(x), lambda g: g / x, "log")


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# ---------------------------------------------------------------------------
# graph construction helpers


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data
    out.op = op
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unary(x: Tensor, data: np.ndarray, back: Callable, op: str) -> Tensor:
    return _make(data, (x,), lambda g: (back(g),), op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _add(a: Tensor, b: Tensor) -> Tensor:
    sa, sb = a.shape, b.shape
    return _make(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def _mul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(g * bd, ad.shape) if a.requires_grad else None
        gb = _unbroadcast(g * ad, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad * bd, (a, b), back, "mul")


def _reciprocal(x: Tensor) -> Tensor:
    out = 1.0 / x.data
    return _unary(x, out, lambda g: -g * out * out, "reciprocal")


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def back(g):
        full = np.zeros(shape)
        np.add.at(full, index, g)
        return full

    return _unary(x, x.data[index], back, "getitem")


# ---------------------------------------------------------------------------
# public ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2:
        raise ValueError("matmul expects operands with ndim >= 2")

    def back(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), back, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with x of any leading shape; weight is [in, out]."""
    xd, wd = x.data, weight.data
    lead = xd.shape[:-1]
    x2 = xd.reshape(-1, xd.shape[-1])
    out = (x2 @ wd).reshape(*lead, wd.shape[1])
    if bias is not None:
        out += bias.data

    def back(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(xd.shape) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, back, "linear")


def _contract(sa: str, sb: str, so: str, ad: np.ndarray, bd: np.ndarray) -> np.ndarray:
    """np.einsum(f"{sa},{sb}->{so}") routed through one batched matmul.

    Much faster than np.einsum for the small attention contractions used here.
    """
    batch = [c for c in so if c in sa and c in sb]
    afree = [c for c in so if c in sa and c not in sb]
    bfree = [c for c in so if c in sb and c not in sa]
    contr = [c for c in sa if c in sb and c not in so]
    size = {}
    for s, arr in ((sa, ad), (sb, bd)):
        for c, n in zip(s, arr.shape):
            size[c] = max(size.get(c, 1), n)

    def prod(labels):
        return int(np.prod([size[c] for c in labels], dtype=np.int64))

    def arrange(s, arr, first, second):
        arr = np.broadcast_to(arr, tuple(size[c] for c in s)) if batch else arr
        perm = [s.index(c) for c in batch + first + second]
        return arr.transpose(perm).reshape(prod(batch), prod(first), prod(second))

    a3 = arrange(sa, ad, afree, contr)
    b3 = arrange(sb, bd, contr, bfree)
    res = np.matmul(a3, b3).reshape([size[c] for c in batch + afree + bfree])
    order = batch + afree + bfree
    return res.transpose([order.index(c) for c in so])


def einsum(subscripts: str, a: Tensor, b: Tensor) -> Tensor:
    """Two-operand einsum without repeated or summed-away-only labels.

    Every label of each input must appear in the output or in the other
    input, which is enough for attention contractions.
    """
    ins, out_s = subscripts.replace(" ", "").split("->")
    sa, sb = ins.split(",")
    for s, other in ((sa, sb), (sb, sa)):
        if len(set(s)) != len(s) or not set(s) <= set(out_s) | set(other):
            raise ValueError(f"unsupported einsum subscripts {subscripts!r}")
    if len(set(out_s)) != len(out_s) or not set(out_s) <= set(sa) | set(sb):
        raise ValueError(f"unsupported einsum subscripts {subscripts!r}")
    ad, bd = a.data, b.data

    def back(g):
        ga = _unbroadcast(_contract(out_s, sb, sa, g, bd), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(_contract(out_s, sa, sb, g, ad), bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(_contract(sa, sb, out_s, ad, bd), (a, b), back, "einsum")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return s * (g - (g * s).sum(axis=axis, keepdims=True))

    return _unary(x, s, back, "softmax")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * gamma.data + beta.data
    n = xd.shape[-1]

    def back(g):
        gx = None
        if x.requires_grad:
            gh = g * gamma.data
            gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                        - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / n)
        gg = _unbroadcast(g * xhat, gamma.shape) if gamma.requires_grad else None
        gb = _unbroadcast(g, beta.shape) if beta.requires_grad else None
        return gx, gg, gb

    return _make(out, (x, gamma, beta), back, "layer_norm")


def relu(x: Tensor) -> Tensor:
    m = x.data > 0
    return _unary(x, np.where(m, x.data, 0.0), lambda g: g * m, "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _unary(x, t, lambda g: g * (1.0 - t * t), "tanh")


def silu(x: Tensor) -> Tensor:
    xd = x.data
    s = 1.0 / (1.0 + np.exp(-xd))
    return _unary(x, xd * s, lambda g: g * (s * (1.0 + xd * (1.0 - s))), "silu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(x: Tensor) -> Tensor:
    """tanh approximation of GELU."""
    xd = x.data
    x2 = xd * xd
    u = _GELU_C * xd * (1.0 + 0.044715 * x2)
    t = np.tanh(u)
    du = _GELU_C * (1.0 + 3 * 0.044715 * x2)

    def back(g):
        return g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * du)

    return _unary(x, 0.5 * xd * (1.0 + t), back, "gelu")


def l2_norm(x: Tensor, axis: int = -1, keepdims: bool = False) -> Tensor:
    """Euclidean norm along ``axis``; the subgradient at zero is taken as 0."""
    xd = x.data
    n = np.sqrt((xd * xd).sum(axis=axis, keepdims=True))
    safe = np.where(n > 0, n, 1.0)
    out = n if keepdims else np.squeeze(n, axis=axis)

    def back(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return g * np.where(n > 0, xd / safe, 0.0)

    return _unary(x, out, back, "l2_norm")


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back, "concat")


def where_const(mask: np.ndarray, x: Tensor, fill: float) -> Tensor:
    """Replace entries where ``mask`` is False by a constant."""
    mask = np.asarray(mask, dtype=bool)
    return _unary(x, np.where(mask, x.data, fill), lambda g: np.where(mask, g, 0.0), "where")


# ---------------------------------------------------------------------------
# backward


def _toposort(root: Tensor) -> list[Tensor]:
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(loss: Tensor, params: Iterable[Tensor], check_finite: bool = True) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to ``params``.

    Parameters that do not influence the loss get zero gradients.
    """
    params = list(params)
    if loss.size != 1:
        raise ValueError(f"grad needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return [np.zeros_like(p.data) for p in params]
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    leaves: dict[int, np.ndarray] = {}
    for node in reversed(_toposort(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            leaves[id(node)] = g
            continue
        parent_grads = node._backward(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not p.requires_grad:
                continue
            if check_finite and not np.isfinite(pg).all():
                raise NumericalError(node.op)
            key = id(p)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg
    out = []
    for p in params:
        g = leaves.get(id(p))
        out.append(np.zeros_like(p.data) if g is None else np.array(g, dtype=np.float64).reshape(p.shape))
    return out
