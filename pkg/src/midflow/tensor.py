"""Minimal reverse-mode autodiff over float32 numpy arrays.

The engine covers exactly the kernel set the rest of the library needs:
elementwise arithmetic, reductions, shape ops, matmul, conv2d,
grid_sample_bilinear, resize (nearest/bilinear/bicubic), group_norm and
softmax. Every op records parents and a backward closure; ``backward()`` on
a scalar loss topologically walks the graph, accumulates gradients into
leaf tensors that require them, and releases the tape.

Rank is limited to 4 and dtype is always float32; kernels use a fixed
summation order so seeded runs are bit-reproducible.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes violate an op's contract."""


_grad_enabled = True


class no_grad:
    """Context manager that disables graph construction."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def is_grad_enabled() -> bool:
    return _grad_enabled


def _as_f32(data) -> np.ndarray:
    arr = np.ascontiguousarray(data, dtype=np.float32)
    if arr.ndim > 4:
        raise ShapeError(f"tensors are limited to rank 4, got shape {arr.shape}")
    return arr


class Tensor:
    """Dense float32 array, optionally tracked for reverse-mode gradients."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_f32(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None

    # -- basic properties --------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # -- graph machinery ---------------------------------------------------

    def _tracked(self) -> bool:
        return _grad_enabled and self.requires_grad

    def backward(self) -> None:
        """Backprop from a scalar; accumulates into leaf ``.grad`` and frees the tape."""
        if self.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        order: list[Tensor] = []
        seen = set()
        stack = [(self, False)]
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
                if p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        owned: set[int] = {id(self)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            owned.discard(id(node))
            if node._backward is not None:
                for parent, pg in node._backward(g):
                    if not parent.requires_grad:
                        continue
                    key = id(parent)
                    cur = grads.get(key)
                    if cur is None:
                        grads[key] = pg
                    elif key in owned:
                        cur += pg
                    else:
                        # first stored array may alias another parent's entry;
                        # accumulate out of place before mutating
                        grads[key] = cur + pg
                        owned.add(key)
            elif node.requires_grad:
                add = np.asarray(g, dtype=np.float32)
                if node.grad is None:
                    node.grad = np.array(add, copy=True)
                else:
                    node.grad += add
            node._backward = None
            node._parents = ()

    # -- operator sugar ------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def reshape(self, *shape):
        return reshape(self, shape if len(shape) > 1 or isinstance(shape[0], int) else shape[0])

    def permute(self, *axes):
        return permute(self, axes)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_from_op(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    """Build an op result.

    ``backward_fn(g)`` must return ``[(parent, grad_array), ...]`` for the
    tracked parents. Graph edges are only recorded while grad is enabled and
    at least one parent requires grad.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


# -- elementwise and broadcasting ops ---------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(g, b.shape))]

    return make_from_op(out, (a, b), bw)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def bw(g):
        return [(a, _unbroadcast(g, a.shape)), (b, _unbroadcast(-g, b.shape))]

    return make_from_op(out, (a, b), bw)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def bw(g):
        return [(a, _unbroadcast(g * b.data, a.shape)),
                (b, _unbroadcast(g * a.data, b.shape))]

    return make_from_op(out, (a, b), bw)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data

    def bw(g):
        return [(a, _unbroadcast(g / b.data, a.shape)),
                (b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))]

    return make_from_op(out, (a, b), bw)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return [(a, g * (2.0 * a.data))]

    return make_from_op(a.data * a.data, (a,), bw)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def bw(g):
        # subgradient 0 at the origin keeps norms of identical inputs NaN-free
        denom = np.where(out > 0, 2.0 * out, 1.0)
        return [(a, np.where(out > 0, g / denom, 0.0).astype(np.float32))]

    return make_from_op(out, (a,), bw)


def absolute(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return [(a, g * np.sign(a.data))]

    return make_from_op(np.abs(a.data), (a,), bw)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)

    def bw(g):
        return [(a, g * out)]

    return make_from_op(out, (a,), bw)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bw(g):
        return [(a, g / a.data)]

    return make_from_op(np.log(a.data), (a,), bw)


def clamp(a, lo: float, hi: float) -> Tensor:
    a = as_tensor(a)
    out = np.clip(a.data, lo, hi)

    def bw(g):
        mask = (a.data >= lo) & (a.data <= hi)
        return [(a, g * mask)]

    return make_from_op(out, (a,), bw)


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # exp overflow saturates correctly
        out = 1.0 / (1.0 + np.exp(-a.data))

    def bw(g):
        return [(a, g * out * (1.0 - out))]

    return make_from_op(out, (a,), bw)


def silu(a) -> Tensor:
    a = as_tensor(a)
    with np.errstate(over="ignore"):  # exp overflow saturates correctly
        s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def bw(g):
        return [(a, g * (s * (1.0 + a.data * (1.0 - s))))]

    return make_from_op(out, (a,), bw)


def leaky_relu(a, slope: float = 0.1) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0
    out = np.where(pos, a.data, slope * a.data).astype(np.float32)

    def bw(g):
        return [(a, g * np.where(pos, 1.0, slope).astype(np.float32))]

    return make_from_op(out, (a,), bw)


def relu(a) -> Tensor:
    a = as_tensor(a)
    pos = a.data > 0

    def bw(g):
        return [(a, g * pos)]

    return make_from_op(a.data * pos, (a,), bw)


# -- reductions --------------------------------------------------------------


def tsum(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32)

    def bw(g):
        if axis is None:
            return [(a, np.broadcast_to(g.reshape((1,) * a.ndim), a.shape))]
        ax = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, ax)
        return [(a, np.broadcast_to(g, a.shape))]

    return make_from_op(out, (a,), bw)


def tmean(a, axis=None, keepdims=False) -> Tensor:
    a = as_tensor(a)
    count = a.size if axis is None else np.prod(
        [a.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(tsum(a, axis, keepdims), float(1.0 / count))


# -- shape ops ----------------------------------------------------------------


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def bw(g):
        return [(a, g.reshape(a.shape))]

    return make_from_op(out, (a,), bw)


def permute(a, axes) -> Tensor:
    a = as_tensor(a)
    out = np.ascontiguousarray(a.data.transpose(axes))
    inv = tuple(np.argsort(axes))

    def bw(g):
        return [(a, np.ascontiguousarray(g.transpose(inv)))]

    return make_from_op(out, (a,), bw)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bw(g):
        parts = np.split(g, splits, axis=axis)
        return list(zip(tensors, (np.ascontiguousarray(p) for p in parts)))

    return make_from_op(out, tuple(tensors), bw)


def narrow(a, axis: int, start: int, length: int) -> Tensor:
    a = as_tensor(a)
    sl = [slice(None)] * a.ndim
    sl[axis] = slice(start, start + length)
    sl = tuple(sl)
    out = np.ascontiguousarray(a.data[sl])

    def bw(g):
        full = np.zeros(a.shape, dtype=np.float32)
        full[sl] = g
        return [(a, full)]

    return make_from_op(out, (a,), bw)


def pad_reflect2d(a, pad_top: int, pad_bottom: int, pad_left: int, pad_right: int) -> Tensor:
    """Reflect-pad the last two axes (no edge repeat), differentiable."""
    a = as_tensor(a)
    h, w = a.shape[-2], a.shape[-1]
    idx_h = np.pad(np.arange(h), (pad_top, pad_bottom), mode="reflect")
    idx_w = np.pad(np.arange(w), (pad_left, pad_right), mode="reflect")
    out = np.ascontiguousarray(a.data[..., idx_h[:, None], idx_w[None, :]])
    comb = (idx_h[:, None] * w + idx_w[None, :]).ravel()

    def bw(g):
        planes = g.reshape(-1, comb.size)
        acc = np.empty((planes.shape[0], h * w), dtype=np.float32)
        for i in range(planes.shape[0]):
            acc[i] = np.bincount(comb, weights=planes[i], minlength=h * w)
        return [(a, acc.reshape(a.shape))]

    return make_from_op(out, (a,), bw)


# -- matmul -------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    """2-D or batch-matching 3-D matrix product."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != b.ndim or a.ndim not in (2, 3):
        raise ShapeError(f"matmul expects equal-rank 2D or 3D operands, got {a.shape} @ {b.shape}")
    out = np.matmul(a.data, b.data)

    def bw(g):
        return [(a, np.matmul(g, b.data.swapaxes(-1, -2))),
                (b, np.matmul(a.data.swapaxes(-1, -2), g))]

    return make_from_op(out, (a, b), bw)


# -- conv2d -------------------------------------------------------------------


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of NCHW input with OIKK weights.

    Forward and both backward passes run as one channel-contraction GEMM per
    kernel tap, which beats an explicit im2col at these problem sizes.
    """
    x, weight = as_tensor(x), as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4D input and weight, got {x.shape} and {weight.shape}")
    n, ci, h, w = x.shape
    co, ciw, kh, kw = weight.shape
    if ci != ciw:
        raise ShapeError(f"conv2d channel mismatch: input has {ci} channels, weight expects {ciw}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(
            f"conv2d: kernel {kh}x{kw} stride {stride} pad {padding} admits no output "
            f"position on {h}x{w} input")
    if padding:
        xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    else:
        xp = x.data

    hp, wp = h + 2 * padding, w + 2 * padding
    # Small outputs go through an explicit im2col GEMM; large ones through
    # per-tap GEMMs on uncopied slices (the im2col copy falls out of cache).
    small = ho * wo < 2048

    def tap(i, j):
        return xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride]

    def build_cols():
        sn, sc, sh, sw = xp.strides
        view = np.lib.stride_tricks.as_strided(
            xp, (n, ci, kh, kw, ho, wo),
            (sn, sc, sh, sw, sh * stride, sw * stride), writeable=False)
        return np.ascontiguousarray(view.transpose(1, 2, 3, 0, 4, 5)).reshape(ci * kh * kw, -1)

    w2 = weight.data.reshape(co, ci * kh * kw)
    if small:
        cols = build_cols()
        out = np.ascontiguousarray((w2 @ cols).reshape(co, n, ho, wo).transpose(1, 0, 2, 3))
    else:
        acc = np.zeros((co, n, ho, wo), dtype=np.float32)
        for i in range(kh):
            for j in range(kw):
                acc += np.tensordot(weight.data[:, :, i, j], tap(i, j), axes=([1], [1]))
        out = np.ascontiguousarray(acc.transpose(1, 0, 2, 3))
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (co,):
            raise ShapeError(f"conv2d bias shape {bias.shape} does not match {co} output channels")
        out += bias.data[None, :, None, None]

    def bw(g):
        grads = []
        g2 = None
        if small and (x.requires_grad or weight.requires_grad):
            g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(co, -1)
        if x.requires_grad:
            dxp = np.zeros((ci, n, hp, wp), dtype=np.float32)
            if small:
                dcols = (w2.T @ g2).reshape(ci, kh, kw, n, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            dcols[:, i, j]
            else:
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                            np.tensordot(weight.data[:, :, i, j], g, axes=([0], [1]))
            dx = dxp[:, :, padding:padding + h, padding:padding + w] if padding else dxp
            grads.append((x, np.ascontiguousarray(dx.transpose(1, 0, 2, 3))))
        if weight.requires_grad:
            if small:
                dw = (g2 @ build_cols().T).reshape(co, ci, kh, kw)
            else:
                dw = np.empty((co, ci, kh, kw), dtype=np.float32)
                for i in range(kh):
                    for j in range(kw):
                        dw[:, :, i, j] = np.tensordot(g, tap(i, j), axes=([0, 2, 3], [0, 2, 3]))
            grads.append((weight, dw))
        if bias is not None and bias.requires_grad:
            grads.append((bias, g.sum(axis=(0, 2, 3), dtype=np.float32)))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return make_from_op(out, parents, bw)


# -- grid sampling ------------------------------------------------------------


def grid_sample_bilinear(x, grid) -> Tensor:
    """Bilinear sampling of NCHW input at absolute pixel coordinates.

    ``grid`` is (N, Hg, Wg, 2) with (x, y) per location; out-of-bounds
    coordinates clamp to the border.
    """
    x, grid = as_tensor(x), as_tensor(grid)
    if x.ndim != 4 or grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"grid_sample expects NCHW input and N,H,W,2 grid, got {x.shape}, {grid.shape}")
    if x.shape[0] != grid.shape[0]:
        raise ShapeError(f"grid_sample batch mismatch: {x.shape[0]} vs {grid.shape[0]}")
    if not np.isfinite(grid.data).all():
        raise ValueError("grid_sample: grid contains non-finite coordinates")
    n, c, h, w = x.shape
    hg, wg = grid.shape[1], grid.shape[2]
    p = hg * wg
    gx = grid.data[..., 0].reshape(n, p)
    gy = grid.data[..., 1].reshape(n, p)
    gxc = np.clip(gx, 0.0, w - 1.0)
    gyc = np.clip(gy, 0.0, h - 1.0)
    x0 = np.floor(gxc)
    y0 = np.floor(gyc)
    fx = gxc - x0
    fy = gyc - y0
    x0 = x0.astype(np.int32)
    y0 = y0.astype(np.int32)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)

    xf = x.data.reshape(n, c, h * w)
    i00 = (y0 * w + x0)[:, None, :]
    i10 = (y0 * w + x1)[:, None, :]
    i01 = (y1 * w + x0)[:, None, :]
    i11 = (y1 * w + x1)[:, None, :]
    v00 = np.take_along_axis(xf, i00, axis=2)
    v10 = np.take_along_axis(xf, i10, axis=2)
    v01 = np.take_along_axis(xf, i01, axis=2)
    v11 = np.take_along_axis(xf, i11, axis=2)
    wx = fx[:, None, :]
    wy = fy[:, None, :]
    out = ((1 - wx) * (1 - wy) * v00 + wx * (1 - wy) * v10 +
           (1 - wx) * wy * v01 + wx * wy * v11).astype(np.float32)
    out = out.reshape(n, c, hg, wg)

    def bw(g):
        gf = g.reshape(n, c, p).astype(np.float32)
        grads = []
        if x.requires_grad:
            dxf = np.zeros((n * c, h * w), dtype=np.float32)
            base = (np.arange(n, dtype=np.int64) * c)[:, None, None] + \
                np.arange(c, dtype=np.int64)[None, :, None]
            for idx, wgt in ((i00, (1 - wx) * (1 - wy)), (i10, wx * (1 - wy)),
                             (i01, (1 - wx) * wy), (i11, wx * wy)):
                comb = (base * (h * w) + idx).ravel()
                contrib = (gf * wgt).ravel()
                dxf += np.bincount(comb, weights=contrib,
                                   minlength=n * c * h * w).reshape(n * c, h * w).astype(np.float32)
            grads.append((x, dxf.reshape(n, c, h, w)))
        if grid.requires_grad:
            # clamped coordinates stop contributing to the coordinate gradient
            mx = ((gx >= 0.0) & (gx <= w - 1.0))[:, None, :]
            my = ((gy >= 0.0) & (gy <= h - 1.0))[:, None, :]
            dve_dx = (1 - wy) * (v10 - v00) + wy * (v11 - v01)
            dve_dy = (1 - wx) * (v01 - v00) + wx * (v11 - v10)
            dgx = (gf * dve_dx * mx).sum(axis=1)
            dgy = (gf * dve_dy * my).sum(axis=1)
            dgrid = np.stack([dgx.reshape(n, hg, wg), dgy.reshape(n, hg, wg)], axis=-1)
            grads.append((grid, dgrid.astype(np.float32)))
        return grads

    return make_from_op(out, (x, grid), bw)


# -- resize -------------------------------------------------------------------

_RESIZE_CACHE: dict[tuple, np.ndarray] = {}


def _cubic_kernel(d: np.ndarray, a: float = -0.5) -> np.ndarray:
    ad = np.abs(d)
    w = np.where(ad <= 1.0, (a + 2) * ad**3 - (a + 3) * ad**2 + 1.0,
                 np.where(ad < 2.0, a * ad**3 - 5 * a * ad**2 + 8 * a * ad - 4 * a, 0.0))
    return w


def _resize_matrix(n_in: int, n_out: int, mode: str) -> np.ndarray:
    key = (n_in, n_out, mode)
    mat = _RESIZE_CACHE.get(key)
    if mat is not None:
        return mat
    dst = np.arange(n_out, dtype=np.float64)
    src = (dst + 0.5) * (n_in / n_out) - 0.5
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if mode == "nearest":
        idx = np.clip(np.floor(src + 0.5).astype(np.int64), 0, n_in - 1)
        m[dst.astype(np.int64), idx] = 1.0
    elif mode == "bilinear":
        i0 = np.floor(src).astype(np.int64)
        f = src - i0
        for off, wgt in ((0, 1.0 - f), (1, f)):
            np.add.at(m, (dst.astype(np.int64), np.clip(i0 + off, 0, n_in - 1)), wgt)
    elif mode == "bicubic":
        i0 = np.floor(src).astype(np.int64)
        f = src - i0
        for off in (-1, 0, 1, 2):
            np.add.at(m, (dst.astype(np.int64), np.clip(i0 + off, 0, n_in - 1)),
                      _cubic_kernel(f - off))
    else:
        raise ValueError(f"unknown resize mode {mode!r}")
    mat = m.astype(np.float32)
    _RESIZE_CACHE[key] = mat
    return mat


def resize_to(x, out_hw: tuple[int, int], mode: str = "bilinear") -> Tensor:
    """Resample the last two axes of an NCHW tensor to an explicit size.

    Separable: ``out = Ah @ x @ Aw.T`` with per-axis resampling matrices,
    so the backward pass is exactly the transposed map. Bicubic uses the
    Catmull-Rom coefficient a=-0.5 with replicated borders; coordinates
    follow the align-corners-false convention.
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"resize expects an NCHW tensor, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    ho, wo = int(out_hw[0]), int(out_hw[1])
    ah = _resize_matrix(h, ho, mode)
    aw = _resize_matrix(w, wo, mode)
    out = np.matmul(np.matmul(ah, x.data), aw.T)

    def bw(g):
        return [(x, np.matmul(np.matmul(ah.T, g), aw))]

    return make_from_op(np.ascontiguousarray(out), (x,), bw)


def resize(x, scale, mode: str = "bilinear") -> Tensor:
    """Resample an NCHW tensor by a rational scale with integral output extents."""
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"resize expects an NCHW tensor, got shape {x.shape}")
    h, w = x.shape[2], x.shape[3]
    ho, wo = h * scale, w * scale
    if abs(ho - round(ho)) > 1e-9 or abs(wo - round(wo)) > 1e-9:
        raise ShapeError(f"resize scale {scale} of {h}x{w} yields non-integral extents ({ho}x{wo})")
    ho, wo = int(round(ho)), int(round(wo))
    if scale == 1:
        def bw(g):
            return [(x, g)]
        return make_from_op(x.data.copy(), (x,), bw)
    return resize_to(x, (ho, wo), mode)


# -- normalization and softmax -------------------------------------------------


def group_norm(x, groups: int, gamma, beta, eps: float = 1e-5) -> Tensor:
    """Per-group standardization over (C/G, H, W) followed by a channel affine."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    if x.ndim != 4:
        raise ShapeError(f"group_norm expects an NCHW tensor, got shape {x.shape}")
    n, c, h, w = x.shape
    if c % groups != 0:
        raise ShapeError(f"group_norm: {c} channels not divisible by {groups} groups")
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"group_norm affine shapes {gamma.shape}/{beta.shape} must be ({c},)")
    xg = x.data.reshape(n, groups, -1)
    mu = xg.mean(axis=2, keepdims=True)
    var = xg.var(axis=2, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat = ((xg - mu) * istd).reshape(n, c, h, w)
    out = gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None]

    def bw(g):
        grads = []
        dxhat = (g * gamma.data[None, :, None, None]).reshape(n, groups, -1)
        if x.requires_grad:
            xh = xhat.reshape(n, groups, -1)
            t1 = dxhat.mean(axis=2, keepdims=True)
            t2 = (dxhat * xh).mean(axis=2, keepdims=True)
            dx = (dxhat - t1 - xh * t2) * istd
            grads.append((x, dx.reshape(n, c, h, w).astype(np.float32)))
        if gamma.requires_grad:
            grads.append((gamma, (g * xhat).sum(axis=(0, 2, 3), dtype=np.float32)))
        if beta.requires_grad:
            grads.append((beta, g.sum(axis=(0, 2, 3), dtype=np.float32)))
        return grads

    return make_from_op(out.astype(np.float32), (x, gamma, beta), bw)


def softmax_channel(x, axis: int = 1) -> Tensor:
    """Max-stabilized softmax along one axis (channel by default)."""
    x = as_tensor(x)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return [(x, (out * (g - dot)).astype(np.float32))]

    return make_from_op(out.astype(np.float32), (x,), bw)
