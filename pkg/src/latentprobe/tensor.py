"""Dense float32 tensors with reverse-mode differentiation.

The engine covers exactly the operations needed to run the supported
generator and classifier layers in inference mode: elementwise arithmetic,
dense and (transposed) convolution layers, the usual activations, inference
batch normalisation, and the reductions used to build scalar losses.

Shapes are static, broadcasting is limited to python scalars, and all data
and gradient accumulation stays in float32. Each forward pass builds a fresh
graph; a graph can be differentiated once.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

Array = np.ndarray


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GraphError(RuntimeError):
    """The recorded graph cannot be differentiated (non-scalar loss, reuse)."""


def _as_f32(data) -> Array:
    return np.ascontiguousarray(np.asarray(data, dtype=np.float32))


class Tensor:
    """N-dimensional float32 array, optionally tracked for gradients.

    Tensors created by operations remember their parents and a vector-Jacobian
    product callback; ``backward`` walks that record. Tensors whose inputs do
    not require gradients are plain constants and carry no graph state.
    """

    __slots__ = ("data", "requires_grad", "_parents", "_vjp", "_consumed")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._vjp: Callable[[Array], tuple[Array | None, ...]] | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() on tensor of shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Convenience operators; scalars are the only permitted broadcast.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return mul(self, -1.0)


def _result(data: Array, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._vjp = vjp
    return out


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _coerce_operand(b) -> tuple[Tensor | None, float | None]:
    """Split the second operand into (tensor, scalar); exactly one is set."""
    if isinstance(b, Tensor):
        return b, None
    if isinstance(b, (int, float, np.floating, np.integer)):
        return None, float(b)
    raise TypeError(f"operand must be Tensor or scalar, got {type(b)!r}")


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a: Tensor, b) -> Tensor:
    bt, s = _coerce_operand(b)
    if bt is None:
        data = a.data + np.float32(s)
        return _result(data, (a,), lambda g: (g,))
    _check_same_shape(a, bt, "add")
    return _result(a.data + bt.data, (a, bt), lambda g: (g, g))


def sub(a: Tensor, b) -> Tensor:
    bt, s = _coerce_operand(b)
    if bt is None:
        data = a.data - np.float32(s)
        return _result(data, (a,), lambda g: (g,))
    _check_same_shape(a, bt, "sub")
    return _result(a.data - bt.data, (a, bt), lambda g: (g, -g))


def mul(a: Tensor, b) -> Tensor:
    bt, s = _coerce_operand(b)
    if bt is None:
        s32 = np.float32(s)
        return _result(a.data * s32, (a,), lambda g: (g * s32,))
    _check_same_shape(a, bt, "mul")
    ad, bd = a.data, bt.data
    return _result(ad * bd, (a, bt), lambda g: (g * bd, g * ad))


def maximum(a: Tensor, b) -> Tensor:
    # Ties route the whole gradient to the first operand.
    bt, s = _coerce_operand(b)
    if bt is None:
        s32 = np.float32(s)
        mask = (a.data >= s32).astype(np.float32)
        return _result(np.maximum(a.data, s32), (a,), lambda g: (g * mask,))
    _check_same_shape(a, bt, "maximum")
    mask = (a.data >= bt.data).astype(np.float32)
    inv = np.float32(1.0) - mask
    return _result(
        np.maximum(a.data, bt.data), (a, bt), lambda g: (g * mask, g * inv)
    )


# ---------------------------------------------------------------------------
# Layer operations


def dense(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Affine map ``y = x @ w.T + b`` for x:[n,i], w:[o,i], b:[o]."""
    if x.data.ndim != 2 or w.data.ndim != 2:
        raise ShapeError(f"dense: expected 2-d x and w, got {x.shape}, {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(f"dense: inner dims disagree, x {x.shape} vs w {w.shape}")
    if b.shape != (w.shape[0],):
        raise ShapeError(f"dense: bias {b.shape} does not match out dim {w.shape[0]}")
    xd, wd = x.data, w.data
    y = xd @ wd.T + b.data
    nx, nw, nb = x.requires_grad, w.requires_grad, b.requires_grad

    def vjp(g: Array):
        return (
            g @ wd if nx else None,
            g.T @ xd if nw else None,
            g.sum(axis=0) if nb else None,
        )

    return _result(y, (x, w, b), vjp)


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _conv_geometry(in_hw, k_hw, stride, padding, op: str):
    h, w = in_hw
    kh, kw = k_hw
    sh, sw = stride
    ph, pw = padding
    if sh < 1 or sw < 1 or ph < 0 or pw < 0:
        raise ShapeError(f"{op}: invalid stride/padding {stride}/{padding}")
    oh = (h + 2 * ph - kh) // sh + 1
    ow = (w + 2 * pw - kw) // sw + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"{op}: output dims {oh}x{ow} collapse for input {h}x{w}")
    return oh, ow


def _correlate(xp: Array, k: Array, stride, out_hw) -> Array:
    # xp: padded input [n, ci, H, W], k: [co, ci, kh, kw] -> [n, co, oh, ow]
    n = xp.shape[0]
    co, _, kh, kw = k.shape
    sh, sw = stride
    oh, ow = out_hw
    xv = xp.transpose(0, 2, 3, 1)  # [n, H, W, ci] view
    acc = np.zeros((n, oh, ow, co), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            xs = xv[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :]
            acc += xs @ k[:, :, i, j].T
    return acc.transpose(0, 3, 1, 2)


def _scatter(g: Array, k: Array, stride, padded_hw) -> Array:
    # Adjoint of _correlate: g [n, co, oh, ow] -> padded input grad [n, ci, H, W].
    n, _, oh, ow = g.shape
    co, ci, kh, kw = k.shape
    sh, sw = stride
    H, W = padded_hw
    out = np.zeros((n, ci, H, W), dtype=np.float32)
    ov = out.transpose(0, 2, 3, 1)  # writable view [n, H, W, ci]
    gv = np.ascontiguousarray(g.transpose(0, 2, 3, 1))  # [n, oh, ow, co]
    for i in range(kh):
        for j in range(kw):
            ov[:, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw, :] += (
                gv @ k[:, :, i, j]
            )
    return out


def _kernel_grad(xp: Array, g: Array, k_hw, stride) -> Array:
    # d/dk of _correlate: xp [n, ci, H, W], g [n, co, oh, ow] -> [co, ci, kh, kw].
    kh, kw = k_hw
    sh, sw = stride
    oh, ow = g.shape[2], g.shape[3]
    dk = np.zeros((g.shape[1], xp.shape[1], kh, kw), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            xs = xp[:, :, i : i + sh * (oh - 1) + 1 : sh, j : j + sw * (ow - 1) + 1 : sw]
            dk[:, :, i, j] = np.tensordot(g, xs, axes=([0, 2, 3], [0, 2, 3]))
    return dk


def _pad4(x: Array, ph: int, pw: int) -> Array:
    if ph == 0 and pw == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))


def conv2d(x: Tensor, k: Tensor, stride=1, padding=0) -> Tensor:
    """Cross-correlation of x:[n,ci,h,w] with k:[co,ci,kh,kw]."""
    stride, padding = _pair(stride), _pair(padding)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d x and k, got {x.shape}, {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise ShapeError(f"conv2d: channels disagree, x {x.shape} vs k {k.shape}")
    kh, kw = k.shape[2], k.shape[3]
    oh, ow = _conv_geometry(x.shape[2:], (kh, kw), stride, padding, "conv2d")
    ph, pw = padding
    xp = _pad4(x.data, ph, pw)
    y = _correlate(xp, k.data, stride, (oh, ow))
    kd = k.data
    in_shape = x.shape
    nx, nk = x.requires_grad, k.requires_grad

    def vjp(g: Array):
        gx = None
        if nx:
            gp = _scatter(g, kd, stride, xp.shape[2:])
            gx = gp[:, :, ph : ph + in_shape[2], pw : pw + in_shape[3]]
        gk = _kernel_grad(xp, g, (kh, kw), stride) if nk else None
        return gx, gk

    return _result(y, (x, k), vjp)


def conv_transpose2d(x: Tensor, k: Tensor, stride=1, padding=0) -> Tensor:
    """Exact adjoint of ``conv2d`` with the same kernel and geometry.

    Maps x:[n,co,h,w] through k:[co,ci,kh,kw] to [n,ci,H,W] with
    ``H = (h-1)*stride + kh - 2*padding`` (and likewise for W).
    """
    stride, padding = _pair(stride), _pair(padding)
    if x.data.ndim != 4 or k.data.ndim != 4:
        raise ShapeError(
            f"conv_transpose2d: expected 4-d x and k, got {x.shape}, {k.shape}"
        )
    if x.shape[1] != k.shape[0]:
        raise ShapeError(
            f"conv_transpose2d: channels disagree, x {x.shape} vs k {k.shape}"
        )
    n, _, h, w = x.shape
    co, ci, kh, kw = k.shape
    sh, sw = stride
    ph, pw = padding
    H = (h - 1) * sh + kh - 2 * ph
    W = (w - 1) * sw + kw - 2 * pw
    if H < 1 or W < 1:
        raise ShapeError(f"conv_transpose2d: output dims {H}x{W} collapse")
    full = _scatter(x.data, k.data, stride, (H + 2 * ph, W + 2 * pw))
    y = full[:, :, ph : ph + H, pw : pw + W]
    kd = k.data
    xd = x.data
    nx, nk = x.requires_grad, k.requires_grad

    def vjp(g: Array):
        gp = _pad4(g, ph, pw) if (nx or nk) else None
        gx = _correlate(gp, kd, stride, (h, w)) if nx else None
        gk = _kernel_grad(gp, xd, (kh, kw), stride) if nk else None
        return gx, gk

    return _result(y, (x, k), vjp)


def channel_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-c bias vector along the channel axis of x:[n,c,h,w]."""
    if x.data.ndim != 4 or b.data.ndim != 1 or b.shape[0] != x.shape[1]:
        raise ShapeError(f"channel_bias: x {x.shape} vs bias {b.shape}")
    y = x.data + b.data.reshape(1, -1, 1, 1)
    nb = b.requires_grad

    def vjp(g: Array):
        return g, g.sum(axis=(0, 2, 3)) if nb else None

    return _result(y, (x, b), vjp)


LEAKY_SLOPE = np.float32(0.2)


def relu(x: Tensor) -> Tensor:
    mask = (x.data > 0).astype(np.float32)
    return _result(np.maximum(x.data, np.float32(0)), (x,), lambda g: (g * mask,))


def leaky_relu(x: Tensor) -> Tensor:
    """LeakyReLU with the fixed negative-region slope 0.2."""
    mask = np.where(x.data >= 0, np.float32(1.0), LEAKY_SLOPE)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


def sigmoid(x: Tensor) -> Tensor:
    # tanh form avoids exp overflow in float32
    y = np.float32(0.5) * (np.tanh(x.data * np.float32(0.5)) + np.float32(1.0))
    d = y * (np.float32(1.0) - y)
    return _result(y, (x,), lambda g: (g * d,))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    d = np.float32(1.0) - y * y
    return _result(y, (x,), lambda g: (g * d,))


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "relu": relu,
    "leaky_relu": leaky_relu,
    "sigmoid": sigmoid,
    "tanh": tanh,
}


def activation(kind: str, x: Tensor) -> Tensor:
    try:
        fn = ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}") from None
    return fn(x)


def _channel_view(shape: tuple[int, ...], c: int) -> tuple[int, ...]:
    # Broadcast shape placing the parameter vector on the channel axis.
    if len(shape) == 2:
        return (1, c)
    if len(shape) == 4:
        return (1, c, 1, 1)
    raise ShapeError(f"batchnorm: unsupported input rank {len(shape)}")


def batchnorm_inference(
    x: Tensor, mean: Tensor, var: Tensor, gamma: Tensor, beta: Tensor, eps: float
) -> Tensor:
    """Normalise with stored statistics: ``gamma*(x-mean)/sqrt(var+eps)+beta``."""
    c = mean.shape[0] if mean.data.ndim == 1 else -1
    for name, t in (("mean", mean), ("var", var), ("gamma", gamma), ("beta", beta)):
        if t.shape != (c,) or c <= 0:
            raise ShapeError(f"batchnorm: parameter {name} has shape {t.shape}")
    view = _channel_view(x.shape, c)
    if x.shape[1] != c:
        raise ShapeError(f"batchnorm: input {x.shape} vs {c} channels")
    veps = var.data + np.float32(eps)
    if np.any(veps <= 0):
        raise ValueError("batchnorm: var + eps must be positive")
    invstd = np.float32(1.0) / np.sqrt(veps)
    centered = x.data - mean.data.reshape(view)
    scaled = centered * invstd.reshape(view)
    y = gamma.data.reshape(view) * scaled + beta.data.reshape(view)
    axes = tuple(i for i in range(x.data.ndim) if i != 1)
    gd = gamma.data
    needs = tuple(t.requires_grad for t in (x, mean, var, gamma, beta))

    def vjp(g: Array):
        gi = (gd * invstd).reshape(view)
        dx = g * gi if needs[0] else None
        dmean = -(g * gi).sum(axis=axes) if needs[1] else None
        dvar = (
            (g * centered).sum(axis=axes) * gd * np.float32(-0.5) * invstd**3
            if needs[2]
            else None
        )
        dgamma = (g * scaled).sum(axis=axes) if needs[3] else None
        dbeta = g.sum(axis=axes) if needs[4] else None
        return dx, dmean, dvar, dgamma, dbeta

    return _result(y, (x, mean, var, gamma, beta), vjp)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ShapeError(f"reshape: cannot view {x.shape} as {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def upsample_nearest(x: Tensor, factor: int) -> Tensor:
    """Repeat each spatial cell of x:[n,c,h,w] into a factor*factor block."""
    f = int(factor)
    if f < 1:
        raise ShapeError(f"upsample_nearest: factor must be >= 1, got {factor}")
    if x.data.ndim != 4:
        raise ShapeError(f"upsample_nearest: expected 4-d input, got {x.shape}")
    n, c, h, w = x.shape
    y = np.repeat(np.repeat(x.data, f, axis=2), f, axis=3)

    def vjp(g: Array):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _result(y, (x,), vjp)


# ---------------------------------------------------------------------------
# Reductions used by losses


def tsum(x: Tensor) -> Tensor:
    shape = x.shape

    def vjp(g: Array):
        return (np.full(shape, g.reshape(()), dtype=np.float32),)

    return _result(np.sum(x.data, dtype=np.float32).reshape(()), (x,), vjp)


def reduce_max(x: Tensor) -> Tensor:
    """Maximum over all entries; the gradient flows to the first argmax."""
    idx = int(np.argmax(x.data))
    shape = x.shape

    def vjp(g: Array):
        out = np.zeros(shape, dtype=np.float32)
        out.flat[idx] = g.reshape(())
        return (out,)

    return _result(np.asarray(x.data.flat[idx]).reshape(()), (x,), vjp)


def element(x: Tensor, index: int) -> Tensor:
    """Scalar at flat position ``index`` (row-major)."""
    idx = int(index)
    if not 0 <= idx < x.size:
        raise ShapeError(f"element: index {index} out of range for {x.shape}")
    shape = x.shape

    def vjp(g: Array):
        out = np.zeros(shape, dtype=np.float32)
        out.flat[idx] = g.reshape(())
        return (out,)

    return _result(np.asarray(x.data.flat[idx]).reshape(()), (x,), vjp)


# ---------------------------------------------------------------------------
# Reverse pass


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
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, leaves: Iterable[Tensor]) -> dict[Tensor, Array]:
    """Differentiate a scalar ``loss`` and return gradients for ``leaves``.

    Leaves the forward pass never touched get zero gradients of their own
    shape. The traversed graph is consumed: running backward again through
    any of its nodes raises ``GraphError``.
    """
    leaves = list(leaves)
    for leaf in leaves:
        if not leaf.requires_grad:
            raise GraphError("backward: leaf does not require gradients")
    if loss.data.size != 1:
        raise GraphError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _toposort(loss)
    for node in order:
        if node._consumed:
            raise GraphError("backward: graph already differentiated; run a new forward pass")
    grads: dict[int, Array] = {id(loss): np.ones((), dtype=np.float32).reshape(loss.shape)}
    for node in reversed(order):
        g = grads.get(id(node))
        if g is None or node._vjp is None:
            continue
        for parent, pg in zip(node._parents, node._vjp(g)):
            if pg is None or not parent.requires_grad:
                continue
            acc = grads.get(id(parent))
            grads[id(parent)] = pg.astype(np.float32, copy=False) if acc is None else acc + pg
    for node in order:
        if node._vjp is not None:
            node._consumed = True
    out: dict[Tensor, Array] = {}
    for leaf in leaves:
        g = grads.get(id(leaf))
        out[leaf] = np.zeros(leaf.shape, dtype=np.float32) if g is None else g
    return out
