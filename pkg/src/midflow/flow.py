"""Optical-flow operators: warping, convex upsampling, rescaling, color
visualization, and Middlebury ``.flo`` file interchange.

Conventions: a flow field stores per-pixel displacements (u horizontal,
v vertical) in pixel units at its own resolution. A field pointing from
the intermediate frame toward input frame ``i`` is backward-warp-ready:
``warped_i(p) = frame_i[p + flow(p)]``.
"""

from __future__ import annotations

import struct

import numpy as np

from . import tensor as T
from .tensor import Tensor

FLO_MAGIC = 202021.25
FLOW_NORM_SCALE = 128.0
UPSAMPLE_FACTOR = 8
MASK_CHANNELS = UPSAMPLE_FACTOR * UPSAMPLE_FACTOR * 9


class FlowField:
    """H x W x 2 float32 displacement field in pixel units."""

    def __init__(self, data: np.ndarray):
        data = np.ascontiguousarray(data, dtype=np.float32)
        if data.ndim != 3 or data.shape[2] != 2:
            raise T.ShapeError(f"FlowField expects (H, W, 2) data, got {data.shape}")
        if not np.isfinite(data).all():
            raise ValueError("FlowField entries must be finite")
        self.data = data

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @classmethod
    def zeros(cls, height: int, width: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))

    @classmethod
    def constant(cls, height: int, width: int, u: float, v: float) -> "FlowField":
        d = np.empty((height, width, 2), dtype=np.float32)
        d[..., 0] = u
        d[..., 1] = v
        return cls(d)

    def to_tensor(self) -> Tensor:
        """(1, 2, H, W) tensor with channels (u, v)."""
        return Tensor(self.data.transpose(2, 0, 1)[None])

    @classmethod
    def from_tensor(cls, t: Tensor | np.ndarray, index: int = 0) -> "FlowField":
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.ndim != 4 or arr.shape[1] != 2:
            raise T.ShapeError(f"expected (N, 2, H, W) flow tensor, got {arr.shape}")
        return cls(arr[index].transpose(1, 2, 0))

    def magnitude(self) -> np.ndarray:
        return np.sqrt(self.data[..., 0] ** 2 + self.data[..., 1] ** 2)

    def __eq__(self, other):
        return isinstance(other, FlowField) and np.array_equal(self.data, other.data)


class FlowPair:
    """Bi-directional fields toward frame 0 and frame 1, equal extents."""

    def __init__(self, to_frame0: FlowField, to_frame1: FlowField):
        if to_frame0.data.shape != to_frame1.data.shape:
            raise T.ShapeError(
                f"FlowPair extents differ: {to_frame0.data.shape[:2]} vs {to_frame1.data.shape[:2]}")
        self.to_frame0 = to_frame0
        self.to_frame1 = to_frame1

    @property
    def height(self) -> int:
        return self.to_frame0.height

    @property
    def width(self) -> int:
        return self.to_frame0.width

    def to_tensor(self) -> Tensor:
        """(1, 4, H, W) tensor with channels (u0, v0, u1, v1)."""
        stacked = np.concatenate([self.to_frame0.data, self.to_frame1.data], axis=2)
        return Tensor(stacked.transpose(2, 0, 1)[None])

    @classmethod
    def from_tensor(cls, t: Tensor | np.ndarray, index: int = 0) -> "FlowPair":
        arr = t.data if isinstance(t, Tensor) else np.asarray(t)
        if arr.ndim != 4 or arr.shape[1] != 4:
            raise T.ShapeError(f"expected (N, 4, H, W) flow-pair tensor, got {arr.shape}")
        hwc = arr[index].transpose(1, 2, 0)
        return cls(FlowField(hwc[..., :2]), FlowField(hwc[..., 2:]))

    def __eq__(self, other):
        return (isinstance(other, FlowPair) and self.to_frame0 == other.to_frame0
                and self.to_frame1 == other.to_frame1)


def _as_flow_tensor(flow, channels: int) -> Tensor:
    if isinstance(flow, FlowField):
        flow = flow.to_tensor()
    elif isinstance(flow, FlowPair):
        flow = flow.to_tensor()
    flow = T.as_tensor(flow)
    if flow.ndim != 4 or flow.shape[1] % 2:
        raise T.ShapeError(f"expected (N, 2k, H, W) flow tensor, got {flow.shape}")
    if channels and flow.shape[1] != channels:
        raise T.ShapeError(f"expected {channels} flow channels, got {flow.shape[1]}")
    return flow


_GRID_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _base_grid(h: int, w: int) -> np.ndarray:
    g = _GRID_CACHE.get((h, w))
    if g is None:
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float32),
                             np.arange(w, dtype=np.float32), indexing="ij")
        g = np.stack([xs, ys], axis=-1)[None]  # (1, H, W, 2)
        _GRID_CACHE[(h, w)] = g
    return g


def backward_warp(frame, flow) -> Tensor:
    """Sample ``frame`` at ``p + flow(p)``; differentiable in both inputs."""
    frame = T.as_tensor(frame)
    flow = _as_flow_tensor(flow, 2)
    n, _, h, w = frame.shape
    if flow.shape[0] != n or flow.shape[2:] != (h, w):
        raise T.ShapeError(f"warp extent mismatch: frame {frame.shape} vs flow {flow.shape}")
    grid = T.permute(flow, (0, 2, 3, 1)) + Tensor(_base_grid(h, w))
    return T.grid_sample_bilinear(frame, grid)


def convex_upsample(coarse_flow, weights) -> Tensor:
    """8x flow upsampling by convex combination of 3x3 coarse neighborhoods.

    ``weights`` holds one 9-vector per fine sub-position, already softmaxed
    (channel layout ``(dy*8 + dx)*9 + k`` with k indexing the 3x3
    neighborhood row-major). Coarse displacements are multiplied by 8 so the
    result is in fine-resolution pixel units. Border neighborhoods replicate
    the edge value, which preserves the convex-combination property there.
    The layer has no learnable parameters.
    """
    flow = _as_flow_tensor(coarse_flow, 0)
    weights = T.as_tensor(weights)
    n, c, h, w = flow.shape
    f = UPSAMPLE_FACTOR
    if weights.shape != (n, MASK_CHANNELS, h, w):
        raise T.ShapeError(
            f"upsample weights must be (N, {MASK_CHANNELS}, h, w) matching coarse flow "
            f"{flow.shape}, got {weights.shape}")

    wr = weights.data.reshape(n, f, f, 9, h, w)
    fpad = np.pad(flow.data, ((0, 0), (0, 0), (1, 1), (1, 1)), mode="edge")
    neigh = np.empty((n, c, 9, h, w), dtype=np.float32)
    for k in range(9):
        di, dj = divmod(k, 3)
        neigh[:, :, k] = fpad[:, :, di:di + h, dj:dj + w]
    neigh *= float(f)
    out6 = np.einsum("nyxkij,nckij->nciyjx", wr, neigh)
    out = np.ascontiguousarray(out6).reshape(n, c, h * f, w * f)

    def bw(g):
        g6 = g.reshape(n, c, h, f, w, f)
        grads = []
        if flow.requires_grad:
            dneigh = np.einsum("nciyjx,nyxkij->nckij", g6, wr) * float(f)
            dpad = np.zeros_like(fpad)
            for k in range(9):
                di, dj = divmod(k, 3)
                dpad[:, :, di:di + h, dj:dj + w] += dneigh[:, :, k]
            dflow = dpad[:, :, 1:-1, 1:-1].copy()
            dflow[:, :, 0, :] += dpad[:, :, 0, 1:-1]
            dflow[:, :, -1, :] += dpad[:, :, -1, 1:-1]
            dflow[:, :, :, 0] += dpad[:, :, 1:-1, 0]
            dflow[:, :, :, -1] += dpad[:, :, 1:-1, -1]
            dflow[:, :, 0, 0] += dpad[:, :, 0, 0]
            dflow[:, :, 0, -1] += dpad[:, :, 0, -1]
            dflow[:, :, -1, 0] += dpad[:, :, -1, 0]
            dflow[:, :, -1, -1] += dpad[:, :, -1, -1]
            grads.append((flow, dflow))
        if weights.requires_grad:
            dwr = np.einsum("nciyjx,nckij->nyxkij", g6, neigh)
            grads.append((weights, np.ascontiguousarray(dwr).reshape(n, MASK_CHANNELS, h, w)))
        return grads

    return T.make_from_op(out, (flow, weights), bw)


def resize_flow(flow, scale, mode: str = "bilinear"):
    """Spatially resample a flow and rescale its displacement values.

    ``scale`` may be a scalar or an (sx, sy) pair; displacements stay in
    output-resolution pixel units. Accepts and returns the caller's type:
    FlowField/FlowPair in, same out; tensors stay tensors (differentiable).
    """
    if isinstance(flow, FlowField):
        with T.no_grad():
            return FlowField.from_tensor(resize_flow(flow.to_tensor(), scale, mode))
    if isinstance(flow, FlowPair):
        with T.no_grad():
            return FlowPair.from_tensor(resize_flow(flow.to_tensor(), scale, mode))
    t = _as_flow_tensor(flow, 0)
    if np.isscalar(scale):
        sx = sy = float(scale)
    else:
        sx, sy = float(scale[0]), float(scale[1])
    h, w = t.shape[2], t.shape[3]
    ho, wo = h * sy, w * sx
    if abs(ho - round(ho)) > 1e-9 or abs(wo - round(wo)) > 1e-9:
        raise T.ShapeError(f"resize_flow scale {scale} of {h}x{w} yields non-integral extents")
    if (sx, sy) == (1.0, 1.0):
        return t
    r = T.resize_to(t, (int(round(ho)), int(round(wo))), mode)
    pairs = t.shape[1] // 2
    factors = np.tile(np.array([sx, sy], dtype=np.float32), pairs)
    return r * Tensor(factors.reshape(1, -1, 1, 1))


def normalize_flow(flow):
    """Map pixel displacements into the diffusion value range (divide by 128)."""
    if isinstance(flow, FlowField):
        return FlowField(flow.data / FLOW_NORM_SCALE)
    if isinstance(flow, FlowPair):
        return FlowPair(normalize_flow(flow.to_frame0), normalize_flow(flow.to_frame1))
    return T.as_tensor(flow) * (1.0 / FLOW_NORM_SCALE)


def denormalize_flow(flow):
    """Exact inverse of :func:`normalize_flow` (multiply by 128)."""
    if isinstance(flow, FlowField):
        return FlowField(flow.data * FLOW_NORM_SCALE)
    if isinstance(flow, FlowPair):
        return FlowPair(denormalize_flow(flow.to_frame0), denormalize_flow(flow.to_frame1))
    return T.as_tensor(flow) * FLOW_NORM_SCALE


def flow_to_color(flow: FlowField | np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """Color-wheel rendering: hue from atan2(v, u), saturation from magnitude.

    Zero flow maps to white. Returns an (H, W, 3) uint8 image.
    """
    data = flow.data if isinstance(flow, FlowField) else np.asarray(flow, dtype=np.float32)
    u, v = data[..., 0], data[..., 1]
    mag = np.sqrt(u * u + v * v)
    if max_mag is None:
        max_mag = float(mag.max())
    if max_mag <= 0:
        max_mag = 1.0
    hue = (np.arctan2(v, u) / (2.0 * np.pi)) % 1.0
    sat = np.clip(mag / max_mag, 0.0, 1.0)
    # HSV -> RGB with value fixed at 1
    k = hue * 6.0
    i = np.floor(k).astype(np.int32) % 6
    f = k - np.floor(k)
    p = 1.0 - sat
    q = 1.0 - sat * f
    t = 1.0 - sat * (1.0 - f)
    one = np.ones_like(sat)
    lut = np.stack([
        np.stack([one, t, p], -1), np.stack([q, one, p], -1),
        np.stack([p, one, t], -1), np.stack([p, q, one], -1),
        np.stack([t, p, one], -1), np.stack([one, p, q], -1),
    ])
    rgb = np.take_along_axis(lut, i[None, ..., None], axis=0)[0]
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8)


def write_flo(path, flow: FlowField) -> None:
    """Middlebury format: float32 magic, int32 width/height, row-major (u, v)."""
    with open(path, "wb") as fh:
        fh.write(struct.pack("<fii", FLO_MAGIC, flow.width, flow.height))
        fh.write(flow.data.astype("<f4").tobytes())


def read_flo(path) -> FlowField:
    with open(path, "rb") as fh:
        header = fh.read(12)
        if len(header) < 12:
            raise ValueError(f"{path}: truncated .flo header ({len(header)} bytes)")
        magic, width, height = struct.unpack("<fii", header)
        if magic != np.float32(FLO_MAGIC):
            raise ValueError(f"{path}: bad .flo magic {magic!r}, expected {FLO_MAGIC}")
        if width <= 0 or height <= 0:
            raise ValueError(f"{path}: invalid .flo extents {width}x{height}")
        payload = fh.read(width * height * 2 * 4)
        if len(payload) != width * height * 2 * 4:
            raise ValueError(
                f"{path}: truncated .flo payload ({len(payload)} of {width * height * 8} bytes)")
    data = np.frombuffer(payload, dtype="<f4").reshape(height, width, 2)
    return FlowField(data)
