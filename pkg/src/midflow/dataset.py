"""Synthetic moving-shapes triplets with analytic ground-truth flows.

A scene is a smooth-noise background plus 1-6 rigid shapes (rectangles,
ellipses, textured patches) moving with constant velocity and optional
rotation about their centers. Frames are rendered at times 0, 0.5 and 1
with supersampled antialiasing. Ground-truth bi-directional flows at the
middle frame follow the surface visible there, respecting z-order; the
generator also reports per-direction validity masks (pixel visible at the
middle time AND at its corresponding position in the other frame) for
warp-consistency checks.

Dataset layout on disk: ``<dir>/<index>/{im0.png, imt.png, im1.png,
flow_t0.flo, flow_t1.flo}`` plus a top-level ``manifest.json``.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .flow import FlowField, FlowPair, read_flo, write_flo
from .rng import Rng

SUPERSAMPLE = 4
_RETRY_LIMIT = 64


@dataclass(frozen=True)
class ShapeSpec:
    kind: str                      # rectangle | ellipse | patch
    center: tuple[float, float]    # at time 0, pixels
    size: tuple[float, float]      # half extents, pixels
    velocity: tuple[float, float]  # pixels per frame
    rotation_rate: float = 0.0     # radians per frame, about the center
    angle: float = 0.0             # orientation at time 0
    color: tuple[float, float, float] = (0.5, 0.5, 0.5)
    texture_seed: int = 0

    def center_at(self, t: float) -> np.ndarray:
        return np.array([self.center[0] + self.velocity[0] * t,
                         self.center[1] + self.velocity[1] * t])

    def angle_at(self, t: float) -> float:
        return self.angle + self.rotation_rate * t


@dataclass(frozen=True)
class SceneSpec:
    width: int
    height: int
    background_seed: int
    shapes: tuple[ShapeSpec, ...]  # render order; later entries occlude earlier

    def __post_init__(self):
        if not 1 <= len(self.shapes) <= 6:
            raise ValueError(f"scenes carry 1..6 shapes, got {len(self.shapes)}")


@dataclass(frozen=True)
class SceneDistribution:
    """Sampling ranges for random scenes."""

    size: int = 64
    min_shapes: int = 1
    max_shapes: int = 6
    min_speed: float = 1.0
    max_speed: float = 12.0   # pixels/frame at size 64, scaled with canvas
    min_half_extent: float = 5.0
    max_half_extent: float = 14.0
    rotation_prob: float = 0.3
    max_rotation: float = 0.12  # radians/frame

    def speed_scale(self) -> float:
        return self.size / 64.0


@dataclass
class Triplet:
    """(frame0, frame_mid, frame1) in [0,1] CHW plus optional supervision."""

    frame0: np.ndarray
    frame_mid: np.ndarray
    frame1: np.ndarray
    flows: FlowPair | None = None
    valid_to0: np.ndarray | None = None
    valid_to1: np.ndarray | None = None

    @property
    def height(self) -> int:
        return self.frame0.shape[1]

    @property
    def width(self) -> int:
        return self.frame0.shape[2]


def _smooth_noise(rng: Rng, height: int, width: int, cells: int = 6) -> np.ndarray:
    """Low-frequency RGB texture in [0.1, 0.9], (3, H, W)."""
    grid = rng.uniform((3, cells, cells), 0.1, 0.9).astype(np.float64)
    ys = np.linspace(0, cells - 1, height)
    xs = np.linspace(0, cells - 1, width)
    y0 = np.clip(np.floor(ys).astype(int), 0, cells - 2)
    x0 = np.clip(np.floor(xs).astype(int), 0, cells - 2)
    fy = (ys - y0)[None, :, None]
    fx = (xs - x0)[None, None, :]
    g = grid[:, :, x0]
    top = g[:, y0, :] * (1 - fy) + g[:, y0 + 1, :] * fy
    gg = grid[:, :, x0 + 1]
    top2 = gg[:, y0, :] * (1 - fy) + gg[:, y0 + 1, :] * fy
    return (top * (1 - fx) + top2 * fx).astype(np.float32)


def _local_coords(shape: ShapeSpec, t: float, px: np.ndarray, py: np.ndarray):
    c = shape.center_at(t)
    th = shape.angle_at(t)
    dx, dy = px - c[0], py - c[1]
    cos_t, sin_t = np.cos(-th), np.sin(-th)
    return cos_t * dx - sin_t * dy, sin_t * dx + cos_t * dy


def _inside(shape: ShapeSpec, qx: np.ndarray, qy: np.ndarray) -> np.ndarray:
    sx, sy = shape.size
    if shape.kind == "ellipse":
        return (qx / sx) ** 2 + (qy / sy) ** 2 <= 1.0
    return (np.abs(qx) <= sx) & (np.abs(qy) <= sy)


def _bbox(shape: ShapeSpec, t: float, height: int, width: int) -> tuple[int, int, int, int]:
    c = shape.center_at(t)
    r = float(np.hypot(*shape.size)) + 1.0
    y0 = max(0, int(np.floor(c[1] - r)))
    y1 = min(height, int(np.ceil(c[1] + r)) + 1)
    x0 = max(0, int(np.floor(c[0] - r)))
    x1 = min(width, int(np.ceil(c[0] + r)) + 1)
    return y0, y1, x0, x1


def _coverage(shape: ShapeSpec, t: float, height: int, width: int,
              ss: int = SUPERSAMPLE) -> np.ndarray:
    """Antialiased occupancy in [0,1] via ss^2 subsamples per pixel,
    evaluated only inside the shape's bounding box."""
    out = np.zeros((height, width), dtype=np.float32)
    y0, y1, x0, x1 = _bbox(shape, t, height, width)
    if y0 >= y1 or x0 >= x1:
        return out
    coords_y = y0 + (np.arange((y1 - y0) * ss, dtype=np.float64) + 0.5) / ss - 0.5
    coords_x = x0 + (np.arange((x1 - x0) * ss, dtype=np.float64) + 0.5) / ss - 0.5
    py, px = np.meshgrid(coords_y, coords_x, indexing="ij")
    qx, qy = _local_coords(shape, t, px, py)
    inside = _inside(shape, qx, qy).astype(np.float32)
    out[y0:y1, x0:x1] = inside.reshape(y1 - y0, ss, x1 - x0, ss).mean(axis=(1, 3))
    return out


def _shape_color(shape: ShapeSpec, t: float, height: int, width: int) -> np.ndarray:
    """(3, H, W) paint; textured patches sample in shape-local coordinates."""
    if shape.kind != "patch":
        return np.asarray(shape.color, dtype=np.float32)[:, None, None]
    ys = (np.arange(height, dtype=np.float64))
    xs = (np.arange(width, dtype=np.float64))
    py, px = np.meshgrid(ys, xs, indexing="ij")
    qx, qy = _local_coords(shape, t, px, py)
    tex = _smooth_noise(Rng(shape.texture_seed, 0xA11), 16, 16, cells=5)
    sx, sy = shape.size
    u = np.clip((qx / sx + 1) * 7.5, 0, 15).astype(int)
    v = np.clip((qy / sy + 1) * 7.5, 0, 15).astype(int)
    return tex[:, v, u]


def render_frame(scene: SceneSpec, t: float) -> np.ndarray:
    """(3, H, W) float32 frame at time t, painter's order."""
    h, w = scene.height, scene.width
    img = _smooth_noise(Rng(scene.background_seed, 0xB6), h, w).copy()
    for shape in scene.shapes:
        cov = _coverage(shape, t, h, w)[None]
        img = img * (1.0 - cov) + _shape_color(shape, t, h, w) * cov
    return img.astype(np.float32)


def _id_map(scene: SceneSpec, t: float) -> np.ndarray:
    """Topmost shape index per pixel (-1 for background), majority coverage."""
    h, w = scene.height, scene.width
    ids = np.full((h, w), -1, dtype=np.int32)
    for idx, shape in enumerate(scene.shapes):
        ids[_coverage(shape, t, h, w, ss=1) > 0.5] = idx
    return ids


def _motion_endpoints(scene: SceneSpec, ids: np.ndarray, t_from: float, t_to: float):
    """Per-pixel displacement from t_from toward t_to for visible surfaces."""
    h, w = ids.shape
    py, px = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    u = np.zeros((h, w), dtype=np.float64)
    v = np.zeros((h, w), dtype=np.float64)
    for idx, shape in enumerate(scene.shapes):
        mask = ids == idx
        if not mask.any():
            continue
        qx, qy = _local_coords(shape, t_from, px[mask], py[mask])
        c = shape.center_at(t_to)
        th = shape.angle_at(t_to)
        cos_t, sin_t = np.cos(th), np.sin(th)
        tx = c[0] + cos_t * qx - sin_t * qy
        ty = c[1] + sin_t * qx + cos_t * qy
        u[mask] = tx - px[mask]
        v[mask] = ty - py[mask]
    return u, v


def _validity(ids_mid: np.ndarray, ids_at: np.ndarray, u: np.ndarray, v: np.ndarray):
    """True where the mid-frame surface is also visible at its target position."""
    h, w = ids_mid.shape
    py, px = np.meshgrid(np.arange(h, dtype=np.float64),
                         np.arange(w, dtype=np.float64), indexing="ij")
    tx, ty = px + u, py + v
    ok = (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    x0 = np.clip(np.floor(tx).astype(int), 0, w - 1)
    y0 = np.clip(np.floor(ty).astype(int), 0, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    for yy, xx in ((y0, x0), (y0, x1), (y1, x0), (y1, x1)):
        ok &= ids_at[yy, xx] == ids_mid
    return ok


def render_triplet(scene: SceneSpec, occluded_flow: str = "foreground") -> Triplet:
    """Deterministic render of frames, analytic flows, and validity masks.

    ``occluded_flow`` picks the ground truth where the mid-frame surface is
    hidden in the other frame: "foreground" (default) keeps the visible
    surface's own motion; "background" zeroes those vectors instead.
    """
    if occluded_flow not in ("foreground", "background"):
        raise ValueError(f"unknown occluded_flow policy {occluded_flow!r}")
    ids_mid = _id_map(scene, 0.5)
    u0, v0 = _motion_endpoints(scene, ids_mid, 0.5, 0.0)
    u1, v1 = _motion_endpoints(scene, ids_mid, 0.5, 1.0)
    valid0 = _validity(ids_mid, _id_map(scene, 0.0), u0, v0)
    valid1 = _validity(ids_mid, _id_map(scene, 1.0), u1, v1)
    if occluded_flow == "background":
        u0, v0 = u0 * valid0, v0 * valid0
        u1, v1 = u1 * valid1, v1 * valid1
    flow0 = FlowField(np.stack([u0, v0], axis=-1).astype(np.float32))
    flow1 = FlowField(np.stack([u1, v1], axis=-1).astype(np.float32))
    return Triplet(
        frame0=render_frame(scene, 0.0),
        frame_mid=render_frame(scene, 0.5),
        frame1=render_frame(scene, 1.0),
        flows=FlowPair(flow0, flow1),
        valid_to0=valid0,
        valid_to1=valid1,
    )


def _shape_on_canvas_fraction(shape: ShapeSpec, t: float, scene_w: int, scene_h: int) -> float:
    cov = _coverage(shape, t, scene_h, scene_w, ss=2)
    sx, sy = shape.size
    area = np.pi * sx * sy if shape.kind == "ellipse" else 4.0 * sx * sy
    return float(cov.sum() / max(area, 1e-6))


def sample_scene(dist: SceneDistribution, rng: Rng) -> SceneSpec:
    """Draw a valid random scene; shapes stay >= 50% on-canvas at all times."""
    size = dist.size
    scale = dist.speed_scale()
    count = int(rng.integers(dist.min_shapes, dist.max_shapes + 1))
    shapes: list[ShapeSpec] = []
    attempts = 0
    while len(shapes) < count:
        if attempts > _RETRY_LIMIT * count:
            raise RuntimeError(
                f"could not place {count} shapes within {attempts} attempts; "
                f"distribution {dist} is too constrained")
        attempts += 1
        kind = ("rectangle", "ellipse", "patch")[int(rng.integers(0, 3))]
        half = (float(rng.uniform((), dist.min_half_extent, dist.max_half_extent) * scale),
                float(rng.uniform((), dist.min_half_extent, dist.max_half_extent) * scale))
        center = (float(rng.uniform((), 4, size - 4)), float(rng.uniform((), 4, size - 4)))
        speed = float(rng.uniform((), dist.min_speed, dist.max_speed)) * scale
        direction = float(rng.uniform((), 0, 2 * np.pi))
        rot = float(rng.uniform((), -dist.max_rotation, dist.max_rotation)) \
            if rng.choice(dist.rotation_prob) else 0.0
        shape = ShapeSpec(
            kind=kind, center=center, size=half,
            velocity=(speed * np.cos(direction), speed * np.sin(direction)),
            rotation_rate=rot, angle=float(rng.uniform((), 0, np.pi)),
            color=tuple(float(c) for c in rng.uniform((3,), 0.05, 0.95)),
            texture_seed=int(rng.integers(0, 2 ** 31)))
        ok = all(_shape_on_canvas_fraction(shape, t, size, size) >= 0.5
                 for t in (0.0, 0.5, 1.0))
        if ok:
            shapes.append(shape)
    return SceneSpec(width=size, height=size,
                     background_seed=int(rng.integers(0, 2 ** 31)),
                     shapes=tuple(shapes))


def generate_triplet(dist: SceneDistribution, rng: Rng) -> Triplet:
    """Sample a scene from the distribution and render its triplet."""
    return render_triplet(sample_scene(dist, rng))


# ------------------------------------------------------------- disk layout


def _to_png(path: str, frame_chw: np.ndarray) -> None:
    arr = np.clip(np.round(frame_chw.transpose(1, 2, 0) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def _from_png(path: str) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


MEMBER_FILES = ("im0.png", "imt.png", "im1.png", "flow_t0.flo", "flow_t1.flo")


def write_dataset(count: int, dist: SceneDistribution, out_dir: str, seed: int) -> dict:
    """Write ``count`` triplets; sample i is fully determined by (seed, i).

    Returns the manifest (also written as ``manifest.json``).
    """
    os.makedirs(out_dir, exist_ok=True)
    mags = []
    for i in range(count):
        triplet = generate_triplet(dist, Rng(seed, i))
        sample_dir = os.path.join(out_dir, f"{i:05d}")
        os.makedirs(sample_dir, exist_ok=True)
        _to_png(os.path.join(sample_dir, "im0.png"), triplet.frame0)
        _to_png(os.path.join(sample_dir, "imt.png"), triplet.frame_mid)
        _to_png(os.path.join(sample_dir, "im1.png"), triplet.frame1)
        write_flo(os.path.join(sample_dir, "flow_t0.flo"), triplet.flows.to_frame0)
        write_flo(os.path.join(sample_dir, "flow_t1.flo"), triplet.flows.to_frame1)
        mags.append(float(triplet.flows.to_frame1.magnitude().mean()))
    manifest = {
        "count": count,
        "size": dist.size,
        "seed": seed,
        "mean_flow_magnitude": float(np.mean(mags)) if mags else 0.0,
        "max_flow_magnitude_mean": float(np.max(mags)) if mags else 0.0,
    }
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


class TripletFolder:
    """Validated handle over an on-disk triplet dataset."""

    def __init__(self, root: str):
        self.root = root
        if not os.path.isdir(root):
            raise FileNotFoundError(f"dataset directory {root} does not exist")
        self.indices = sorted(
            d for d in os.listdir(root) if os.path.isdir(os.path.join(root, d)))
        problems = []
        for d in self.indices:
            for member in MEMBER_FILES:
                if not os.path.isfile(os.path.join(root, d, member)):
                    problems.append(f"{d}: missing {member}")
        if problems:
            raise ValueError("dataset incomplete:\n  " + "\n  ".join(problems))

    def __len__(self) -> int:
        return len(self.indices)

    def load(self, i: int) -> Triplet:
        d = os.path.join(self.root, self.indices[i])
        f0 = _from_png(os.path.join(d, "im0.png"))
        ft = _from_png(os.path.join(d, "imt.png"))
        f1 = _from_png(os.path.join(d, "im1.png"))
        flow0 = read_flo(os.path.join(d, "flow_t0.flo"))
        flow1 = read_flo(os.path.join(d, "flow_t1.flo"))
        shapes = {f0.shape, ft.shape, f1.shape}
        if len(shapes) != 1:
            raise ValueError(f"{d}: frame extents disagree: {shapes}")
        if (flow0.height, flow0.width) != f0.shape[1:]:
            raise ValueError(f"{d}: flow extents {flow0.height}x{flow0.width} "
                             f"do not match frames {f0.shape[1:]}")
        return Triplet(f0, ft, f1, flows=FlowPair(flow0, flow1))


def load_triplet_folder(root: str) -> TripletFolder:
    return TripletFolder(root)
