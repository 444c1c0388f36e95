"""Small reverse-mode autodiff engine on top of numpy.

Only the operations the separation network and its losses need are
provided. Arrays use the ``(batch, channels, height, width)`` layout for
all spatial ops. Values are double precision unless a float32 array is
passed in explicitly.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "NonFiniteError",
    "no_grad",
    "is_grad_enabled",
    "concat",
    "concat_channels",
    "conv2d",
    "relu",
    "pool2d",
    "batch_norm",
    "bn_relu_conv",
    "upsample2d",
    "pad_reflect_end",
    "matmul",
]

_GRAD_ENABLED = True


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or infinite values."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


def _check_finite(values: np.ndarray, what: str) -> None:
    if not np.isfinite(values).all():
        raise NonFiniteError(f"non-finite values produced by {what}")


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum ``grad`` down to ``shape`` after numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Tensor:
    """An n-dimensional array that can record the ops applied to it.

    Parameters
    ----------
    data : array_like
        Values. Integer and boolean input is promoted to float64.
    requires_grad : bool
        If True, ``grad`` is populated by :meth:`backward` on a downstream
        scalar.
    """

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self._op = "leaf"

    # -- construction helpers -------------------------------------------
    @classmethod
    def _from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward, op: str) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out._op = op
        needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        if needs:
            out._parents = tuple(parents)
            out._backward = backward
        else:
            out._parents = ()
            out._backward = None
        return out

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def check_finite(self, what: str = "forward pass") -> "Tensor":
        """Raise :class:`NonFiniteError` if any value is NaN or infinite."""
        _check_finite(self.data, what)
        return self

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # -- autodiff ---------------------------------------------------------
    def backward(self, retain_graph: bool = False) -> None:
        """Accumulate d(self)/d(leaf) into ``grad`` of every leaf that requires it."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar output, got shape {self.shape}")
        if not self.requires_grad:
            raise RuntimeError("backward() called on a tensor that does not require grad")

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))

        self.check_finite("backward input")
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                _check_finite(g, "backward")
                node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            if not retain_graph:
                node._backward = None
                node._parents = ()

    # -- arithmetic -------------------------------------------------------
    @staticmethod
    def _wrap(other) -> "Tensor":
        return other if isinstance(other, Tensor) else Tensor(other)

    def __add__(self, other) -> "Tensor":
        other = self._wrap(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return Tensor._from_op(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self) -> "Tensor":
        return Tensor._from_op(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other) -> "Tensor":
        other = self._wrap(other)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(-g, b_shape)

        return Tensor._from_op(self.data - other.data, (self, other), backward, "sub")

    def __rsub__(self, other) -> "Tensor":
        return self._wrap(other) - self

    def __mul__(self, other) -> "Tensor":
        other = self._wrap(other)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return Tensor._from_op(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            a, b = self.data, other.data

            def backward(g):
                return _unbroadcast(g / b, a.shape), _unbroadcast(-g * a / (b * b), b.shape)

            return Tensor._from_op(a / b, (self, other), backward, "div")
        scale = 1.0 / float(other)
        return self * scale

    def __matmul__(self, other) -> "Tensor":
        return matmul(self, other)

    def __getitem__(self, index) -> "Tensor":
        src_shape, dtype = self.shape, self.dtype

        def backward(g):
            full = np.zeros(src_shape, dtype=dtype)
            full[index] = g
            return (full,)

        return Tensor._from_op(self.data[index], (self,), backward, "slice")

    def square(self) -> "Tensor":
        x = self.data
        return Tensor._from_op(x * x, (self,), lambda g: (2.0 * x * g,), "square")

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        out = np.asarray(self.data.sum(axis=axis, keepdims=keepdims), dtype=self.dtype)
        return Tensor._from_op(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        if axis is None:
            count = self.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            count = math.prod(self.shape[a] for a in axes)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src_shape = self.shape
        return Tensor._from_op(
            self.data.reshape(shape), (self,), lambda g: (g.reshape(src_shape),), "reshape"
        )

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        if not axes:
            axes = tuple(reversed(range(self.ndim)))
        inverse = tuple(np.argsort(axes))
        return Tensor._from_op(
            np.ascontiguousarray(self.data.transpose(axes)),
            (self,),
            lambda g: (g.transpose(inverse),),
            "transpose",
        )


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    x, y = a.data, b.data

    def backward(g):
        ga = g @ np.swapaxes(y, -1, -2)
        gb = np.swapaxes(x, -1, -2) @ g
        return _unbroadcast(ga, x.shape), _unbroadcast(gb, y.shape)

    return Tensor._from_op(x @ y, (a, b), backward, "matmul")


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    """Join tensors along ``axis``; earlier tensors come first."""
    tensors = list(tensors)
    if not tensors:
        raise ValueError("concat needs at least one tensor")
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        other = t.shape
        if len(other) != len(ref) or any(
            i != axis and p != q for i, (p, q) in enumerate(zip(ref, other))
        ):
            raise ValueError(f"cannot concatenate shapes {ref} and {other} along axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        out = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(g[tuple(sl)])
        return out

    data = np.concatenate([t.data for t in tensors], axis=axis)
    return Tensor._from_op(data, tensors, backward, "concat")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Stack ``b``'s channels after ``a``'s for ``(B, C, H, W)`` tensors."""
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat_channels: incompatible shapes {a.shape} and {b.shape}")
    return concat([a, b], axis=1)


def relu(x: Tensor) -> Tensor:
    """Elementwise max(0, x); the gradient at exactly 0 is 0."""
    mask = x.data > 0
    return Tensor._from_op(np.maximum(x.data, 0), (x,), lambda g: (g * mask,), "relu")


def _pair(v) -> tuple[int, int]:
    if isinstance(v, (tuple, list)):
        return int(v[0]), int(v[1])
    return int(v), int(v)


def _conv_geometry(x_shape, k_shape, stride, padding):
    B, C, H, W = x_shape
    Co, Ci, kh, kw = k_shape
    if Ci != C:
        raise ValueError(f"conv2d channel mismatch: input shape {x_shape} vs kernel shape {k_shape}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if sh < 1 or sw < 1:
        raise ValueError("conv2d stride must be >= 1")
    Hp, Wp = H + 2 * ph, W + 2 * pw
    if kh > Hp or kw > Wp:
        raise ValueError(
            f"conv2d kernel {k_shape} larger than padded input extent {(Hp, Wp)} of input {x_shape}"
        )
    return (sh, sw), (ph, pw), ((Hp - kh) // sh + 1, (Wp - kw) // sw + 1)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """2-D cross-correlation.

    Parameters
    ----------
    x : Tensor, shape (B, C, H, W)
    weight : Tensor, shape (C_out, C, kh, kw)
    bias : Tensor, shape (C_out,), optional
    stride, padding : int or pair of int
        Zero padding is applied symmetrically.

    Returns
    -------
    Tensor, shape (B, C_out, H', W') with H' = (H + 2p - kh) // stride + 1.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(f"conv2d expects 4-D input and kernel, got {x.shape} and {weight.shape}")
    Co = weight.shape[0]
    if bias is not None and bias.shape != (Co,):
        raise ValueError(f"conv2d bias shape {bias.shape} does not match kernel shape {weight.shape}")
    stride, padding, _ = _conv_geometry(x.shape, weight.shape, stride, padding)
    dtype = np.result_type(x.dtype, weight.dtype)
    xd = x.data.astype(dtype, copy=False)
    kd = weight.data.astype(dtype, copy=False)
    out = _conv_forward(xd, kd, stride, padding)
    parents = [x, weight]
    if bias is not None:
        out += bias.data.astype(dtype, copy=False).reshape(1, Co, 1, 1)
        parents.append(bias)

    def backward(g):
        gx, gk = _conv_backward(g, xd, kd, stride, padding, x.requires_grad, weight.requires_grad)
        if bias is None:
            return gx, gk
        return gx, gk, (g.sum(axis=(0, 2, 3)) if bias.requires_grad else None)

    return Tensor._from_op(out, parents, backward, "conv2d")


def _conv_forward(xd, kd, stride, padding) -> np.ndarray:
    B, C, H, W = xd.shape
    Co, _, kh, kw = kd.shape
    if (kh, kw) == (1, 1) and stride == (1, 1) and padding == (0, 0):
        return np.matmul(kd.reshape(Co, C), xd.reshape(B, C, H * W)).reshape(B, Co, H, W)
    if stride == (1, 1):
        return _conv_shift_forward(xd, kd, padding)
    cols, (Ho, Wo) = _im2col(xd, kd.shape, stride, padding)
    return np.matmul(kd.reshape(Co, -1), cols).reshape(B, Co, Ho, Wo)


def _conv_backward(g, xd, kd, stride, padding, need_x, need_k):
    B, C, H, W = xd.shape
    Co, _, kh, kw = kd.shape
    if (kh, kw) == (1, 1) and stride == (1, 1) and padding == (0, 0):
        k2 = kd.reshape(Co, C)
        gf = g.reshape(B, Co, H * W)
        gx = np.matmul(k2.T, gf).reshape(B, C, H, W) if need_x else None
        gk = None
        if need_k:
            xf = xd.reshape(B, C, H * W)
            gk = np.zeros((Co, C), dtype=g.dtype)
            for b in range(B):
                gk += gf[b] @ xf[b].T
            gk = gk.reshape(Co, C, 1, 1)
        return gx, gk
    if stride == (1, 1):
        return _conv_shift_backward(g, xd, kd, padding, need_x, need_k)
    return _im2col_backward(g, xd, kd, stride, padding, need_x, need_k)


# Stride-1 convolution on the flattened padded image: each kernel tap is a
# contiguous slice, so no im2col buffer is needed. Columns past Wo in each
# output row are junk and get dropped.

def _shift_layout(xd, kd, padding):
    B, C, H, W = xd.shape
    Co, _, kh, kw = kd.shape
    ph, pw = padding
    Hp, Wp = H + 2 * ph, W + 2 * pw
    Ho, Wo = Hp - kh + 1, Wp - kw + 1
    # one spare row so the last tap's slice stays in bounds
    xp = np.zeros((B, C, Hp + 1, Wp), dtype=xd.dtype)
    xp[:, :, ph:ph + H, pw:pw + W] = xd
    offsets = [i * Wp + j for i in range(kh) for j in range(kw)]
    ktaps = np.ascontiguousarray(kd.transpose(2, 3, 0, 1).reshape(kh * kw, Co, C))
    return xp.reshape(B, C, (Hp + 1) * Wp), offsets, ktaps, (Ho, Wo, Wp)


def _conv_shift_forward(xd, kd, padding):
    B, C = xd.shape[:2]
    Co = kd.shape[0]
    xf, offsets, ktaps, (Ho, Wo, Wp) = _shift_layout(xd, kd, padding)
    L = Ho * Wp
    acc = np.empty((B, Co, L), dtype=xd.dtype)
    if C * len(offsets) <= 64:
        kflat = ktaps.transpose(1, 0, 2).reshape(Co, -1)
        for b in range(B):
            cols = np.concatenate([xf[b, :, off:off + L] for off in offsets], axis=0)
            np.dot(kflat, cols, out=acc[b])
    else:
        for b in range(B):
            acc[b] = 0
            for t, off in enumerate(offsets):
                acc[b] += np.dot(ktaps[t], xf[b, :, off:off + L])
    return np.ascontiguousarray(acc.reshape(B, Co, Ho, Wp)[:, :, :, :Wo])


def _conv_shift_backward(g, xd, kd, padding, need_x, need_k):
    B, C, H, W = xd.shape
    Co = kd.shape[0]
    ph, pw = padding
    xf, offsets, ktaps, (Ho, Wo, Wp) = _shift_layout(xd, kd, padding)
    L = Ho * Wp
    gxp = np.zeros_like(xf) if need_x else None
    gtaps = np.zeros_like(ktaps) if need_k else None
    gfull = np.zeros((Co, Ho, Wp), dtype=g.dtype)
    gf = gfull.reshape(Co, L)
    for b in range(B):
        gfull[:, :, :Wo] = g[b]
        for t, off in enumerate(offsets):
            if need_x:
                gxp[b, :, off:off + L] += np.dot(ktaps[t].T, gf)
            if need_k:
                gtaps[t] += np.dot(gf, xf[b, :, off:off + L].T)
    gx = gk = None
    if need_x:
        Hp = H + 2 * ph
        gx = gxp.reshape(B, C, Hp + 1, Wp)[:, :, ph:ph + H, pw:pw + W].copy()
    if need_k:
        kh, kw = kd.shape[2:]
        gk = np.ascontiguousarray(gtaps.reshape(kh, kw, Co, C).transpose(2, 3, 0, 1))
    return gx, gk


def _im2col(xd, k_shape, stride, padding):
    B, C = xd.shape[:2]
    _, _, kh, kw = k_shape
    (sh, sw), (ph, pw) = stride, padding
    xp = np.pad(xd, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    return win.transpose(0, 1, 4, 5, 2, 3).reshape(B, C * kh * kw, Ho * Wo), (Ho, Wo)


def _im2col_backward(g, xd, kd, stride, padding, need_x, need_k):
    B, C, H, W = xd.shape
    Co, _, kh, kw = kd.shape
    (sh, sw), (ph, pw) = stride, padding
    Ho, Wo = g.shape[2], g.shape[3]
    gf = g.reshape(B, Co, Ho * Wo)
    gx = gk = None
    if need_x:
        gcols = np.matmul(kd.reshape(Co, -1).T, gf).reshape(B, C, kh, kw, Ho, Wo)
        gxp = np.zeros((B, C, H + 2 * ph, W + 2 * pw), dtype=g.dtype)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gcols[:, :, i, j]
        gx = gxp[:, :, ph:ph + H, pw:pw + W].copy()
    if need_k:
        cols, _ = _im2col(xd, kd.shape, stride, padding)
        gk = sum(gf[b] @ cols[b].T for b in range(B)).reshape(kd.shape)
    return gx, gk


def pool2d(x: Tensor, mode: str = "max", window=2, stride=None) -> Tensor:
    """Max or average pooling over ``(H, W)``.

    Max pooling sends the gradient to the first maximum of each window in
    row-major order.
    """
    if mode not in ("max", "average"):
        raise ValueError(f"unknown pooling mode {mode!r}")
    kh, kw = _pair(window)
    sh, sw = _pair(stride if stride is not None else window)
    B, C, H, W = x.shape
    if kh > H or kw > W:
        raise ValueError(f"pool window {(kh, kw)} exceeds spatial extents {(H, W)}")
    win = np.lib.stride_tricks.sliding_window_view(x.data, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw]
    Ho, Wo = win.shape[2], win.shape[3]
    flat = win.reshape(B, C, Ho, Wo, kh * kw)
    shape, dtype = x.shape, x.dtype

    if mode == "max":
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

        def backward(g):
            gx = np.zeros(shape, dtype=dtype)
            for t in range(kh * kw):
                i, j = divmod(t, kw)
                gx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += np.where(arg == t, g, 0)
            return (gx,)

    else:
        out = flat.mean(axis=-1)
        scale = 1.0 / (kh * kw)

        def backward(g):
            gx = np.zeros(shape, dtype=dtype)
            gs = g * scale
            for i in range(kh):
                for j in range(kw):
                    gx[:, :, i:i + sh * Ho:sh, j:j + sw * Wo:sw] += gs
            return (gx,)

    return Tensor._from_op(np.ascontiguousarray(out, dtype=dtype), (x,), backward, f"{mode}_pool")


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel batch normalization for ``(B, C, H, W)`` input.

    In training mode the batch moments are used and the running statistics
    are updated in place (unbiased variance, exponential moving average).
    A zero-variance channel is safe: ``eps`` keeps the denominator positive.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match {C} channels"
        )
    xd = x.data
    dtype = xd.dtype
    m = xd.size // C
    if training:
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        centered = xd - mean.astype(dtype).reshape(1, C, 1, 1)
        var = np.einsum("bchw,bchw->c", centered, centered, dtype=np.float64) / m
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (m / (m - 1)) if m > 1 else var)
    else:
        centered = xd - running_mean.astype(dtype).reshape(1, C, 1, 1)
        var = running_var.astype(np.float64)
    inv_std = (1.0 / np.sqrt(var + eps)).astype(dtype)
    scale = (gamma.data * inv_std).reshape(1, C, 1, 1)
    out = centered * scale
    out += beta.data.reshape(1, C, 1, 1)

    def backward(g):
        need_gamma = gamma.requires_grad or (x.requires_grad and training)
        gbeta = g.sum(axis=(0, 2, 3)) if (beta.requires_grad or (x.requires_grad and training)) else None
        # sum(g * xhat) per channel
        gxc = np.einsum("bchw,bchw->c", g, centered) * inv_std if need_gamma else None
        gx = None
        if x.requires_grad:
            if training:
                # (gamma*inv_std) * (g - mean(g) - xhat * mean(g*xhat))
                k1 = (gbeta / m).astype(dtype).reshape(1, C, 1, 1)
                k2 = (gxc * inv_std / m).astype(dtype).reshape(1, C, 1, 1)
                gx = g - k1
                gx -= centered * k2
                gx *= scale
            else:
                gx = g * scale
        return (
            gx,
            gxc.astype(dtype) if gamma.requires_grad else None,
            gbeta.astype(dtype) if beta.requires_grad else None,
        )

    return Tensor._from_op(out, (x, gamma, beta), backward, "batch_norm")


def bn_relu_conv(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    weight: Tensor,
    bias: Tensor,
    training: bool,
    padding: int = 0,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """``conv2d(relu(batch_norm(x)))`` as one op.

    Same values and gradients as the three ops chained, but the normalized
    activation is recomputed in backward instead of being stored, which keeps
    dense blocks from holding several copies of their growing input.
    """
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ValueError(
            f"batch_norm: gamma {gamma.shape} / beta {beta.shape} do not match {C} channels"
        )
    Co = weight.shape[0]
    stride, pad, _ = _conv_geometry(x.shape, weight.shape, 1, padding)
    xd = x.data
    dtype = xd.dtype
    kd = weight.data.astype(dtype, copy=False)
    m = xd.size // C
    if training:
        mean = xd.mean(axis=(0, 2, 3), dtype=np.float64)
        var = np.einsum("bchw,bchw->c", xd, xd, dtype=np.float64) / m - mean * mean
        var = np.maximum(var, 0.0)
        if m > 1 and np.any(var < 1e-8 * mean * mean):
            # cancellation guard: exact two-pass variance
            centered = xd - mean.astype(dtype).reshape(1, C, 1, 1)
            var = np.einsum("bchw,bchw->c", centered, centered, dtype=np.float64) / m
            del centered
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * (var * (m / (m - 1)) if m > 1 else var)
    else:
        mean = running_mean.astype(np.float64)
        var = running_var.astype(np.float64)
    inv_std = 1.0 / np.sqrt(var + eps)
    scale64 = gamma.data.astype(np.float64) * inv_std
    scale = scale64.astype(dtype).reshape(1, C, 1, 1)
    shift = (beta.data.astype(np.float64) - mean * scale64).astype(dtype).reshape(1, C, 1, 1)

    def activation():
        z = xd * scale
        z += shift
        return z

    z = activation()
    np.maximum(z, 0, out=z)
    out = _conv_forward(z, kd, stride, pad)
    del z
    out += bias.data.astype(dtype, copy=False).reshape(1, Co, 1, 1)

    def backward(g):
        z = activation()
        mask = z > 0
        np.maximum(z, 0, out=z)
        need_x = x.requires_grad
        need_bn = need_x or gamma.requires_grad or beta.requires_grad
        ga, gk = _conv_backward(g, z, kd, stride, pad, need_bn, weight.requires_grad)
        del z
        gb = g.sum(axis=(0, 2, 3)) if bias.requires_grad else None
        gx = ggamma = gbeta = None
        if need_bn:
            ga *= mask
            del mask
            sum_g = ga.sum(axis=(0, 2, 3), dtype=np.float64)
            # sum(g * xhat) = inv_std * (sum(g * x) - mean * sum(g))
            sum_gx = np.einsum("bchw,bchw->c", ga, xd, dtype=np.float64)
            sum_gxhat = inv_std * (sum_gx - mean * sum_g)
            if gamma.requires_grad:
                ggamma = sum_gxhat.astype(dtype)
            if beta.requires_grad:
                gbeta = sum_g.astype(dtype)
            if need_x:
                if training:
                    # scale * (g - mean(g) - xhat * mean(g * xhat)), xhat = (x - mean) * inv_std
                    k2 = scale64 * inv_std * sum_gxhat / m
                    k0 = -scale64 * sum_g / m + k2 * mean
                    gx = ga * scale
                    gx -= xd * k2.astype(dtype).reshape(1, C, 1, 1)
                    gx += k0.astype(dtype).reshape(1, C, 1, 1)
                else:
                    gx = ga * scale
        return gx, ggamma, gbeta, gk, gb

    return Tensor._from_op(out, (x, gamma, beta, weight, bias), backward, "bn_relu_conv")


def upsample2d(x: Tensor, factor: int) -> Tensor:
    """Nearest-neighbour upsampling of both spatial axes by an integer factor."""
    factor = int(factor)
    if factor < 1:
        raise ValueError("upsample factor must be a positive integer")
    if factor == 1:
        return x
    B, C, H, W = x.shape
    out = np.repeat(np.repeat(x.data, factor, axis=2), factor, axis=3)

    def backward(g):
        return (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),)

    return Tensor._from_op(out, (x,), backward, "upsample")


def pad_reflect_end(x: Tensor, axis: int, amount: int = 1) -> Tensor:
    """Append ``amount`` reflected samples at the end of ``axis``."""
    if amount == 0:
        return x
    n = x.shape[axis]
    if n <= amount:
        raise ValueError(f"cannot reflect-pad axis of extent {n} by {amount}")
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, amount)
    out = np.pad(x.data, widths, mode="reflect")

    def backward(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(0, n)
        gx = g[tuple(sl)].copy()
        for k in range(amount):
            src = [slice(None)] * g.ndim
            dst = [slice(None)] * g.ndim
            src[axis] = n + k
            dst[axis] = n - 2 - k
            gx[tuple(dst)] += g[tuple(src)]
        return (gx,)

    return Tensor._from_op(out, (x,), backward, "pad_reflect")


def parameters_grad_norm(params: Iterable[Tensor]) -> float:
    total = 0.0
    for p in params:
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(total)
