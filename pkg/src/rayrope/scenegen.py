"""Procedural scenes, a raycasting renderer with z-depth, and the on-disk dataset format.

Scenes hold spheres and axis-aligned checkered squares inside the unit ball.
Rendering shoots one ray per pixel center, keeps the nearest hit and applies
Lambert shading from a fixed light plus an ambient term (no shadows).

Dataset layout: ``scene_<seed>/view_<i>.ppm`` (P6, maxval 255),
``view_<i>.pfm`` (single-channel little-endian float32, rows bottom-up),
``cameras.txt`` (``fx fy cx cy qw qx qy qz tx ty tz width height`` per view)
and ``meta.json``. Even seeds form the train split, odd seeds validation.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import geometry as geo

log = logging.getLogger(__name__)

LIGHT_DIR = np.array([1.0, 1.0, 1.0]) / math.sqrt(3.0)
AMBIENT = 0.3
HIT_EPS = 1e-9


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple


@dataclass(frozen=True)
class CheckerSquare:
    """Square in the plane ``x[axis] = center[axis]``, two-sided, checkered in-plane."""

    axis: int
    center: tuple
    half_size: float
    albedo_a: tuple
    albedo_b: tuple
    cell: float


@dataclass(frozen=True)
class Scene:
    spheres: tuple = ()
    squares: tuple = ()
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    @property
    def primitives(self) -> tuple:
        return self.spheres + self.squares

    def digest(self) -> str:
        return hashlib.sha256(repr((self.spheres, self.squares, self.background)).encode()).hexdigest()

    def max_extent(self) -> float:
        """Largest distance from the origin reached by any primitive."""
        ext = [np.linalg.norm(s.center) + s.radius for s in self.spheres]
        ext += [np.linalg.norm(q.center) + q.half_size * math.sqrt(2.0) for q in self.squares]
        return float(max(ext, default=0.0))


def _color(rng, lo=0.2, hi=1.0) -> tuple:
    return tuple(float(c) for c in rng.uniform(lo, hi, 3))


def _in_ball(rng, max_norm: float) -> np.ndarray:
    v = rng.normal(size=3)
    v /= np.linalg.norm(v)
    return v * max_norm * rng.uniform() ** (1.0 / 3.0)


def generate_scene(seed: int) -> Scene:
    """3-8 primitives drawn from ``default_rng(seed)``; every primitive stays in the unit ball."""
    rng = np.random.default_rng(int(seed) % 2**64)
    n = int(rng.integers(3, 9))
    spheres, squares = [], []
    for _ in range(n):
        if rng.uniform() < 0.7:
            r = float(rng.uniform(0.15, 0.4))
            c = _in_ball(rng, 1.0 - r)
            spheres.append(Sphere(tuple(float(x) for x in c), r, _color(rng)))
        else:
            h = float(rng.uniform(0.2, 0.45))
            c = _in_ball(rng, 1.0 - h * math.sqrt(2.0))
            squares.append(
                CheckerSquare(int(rng.integers(0, 3)), tuple(float(x) for x in c), h, _color(rng), _color(rng, 0.0, 0.6),
                              float(rng.uniform(0.08, 0.2)))
            )
    background = _color(rng, 0.0, 0.25)
    return Scene(tuple(spheres), tuple(squares), background, int(seed))


def _sphere_hits(s: Sphere, origin, dirs):
    c = np.asarray(s.center)
    oc = origin - c
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = dirs @ oc
    cc = oc @ oc - s.radius**2
    disc = b * b - a * cc
    ok = disc >= 0
    root = np.sqrt(np.where(ok, disc, 0.0))
    t = (-b - root) / a
    t_far = (-b + root) / a
    t = np.where(t > HIT_EPS, t, t_far)
    t = np.where(ok & (t > HIT_EPS), t, np.inf)
    p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    normal = (p - c) / s.radius
    albedo = np.broadcast_to(np.asarray(s.albedo), dirs.shape)
    return t, normal, albedo


def _square_hits(q: CheckerSquare, origin, dirs):
    k = q.axis
    u, v = [i for i in range(3) if i != k]
    c = np.asarray(q.center)
    wk = dirs[:, k]
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (c[k] - origin[k]) / wk
    p = origin + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
    du = p[:, u] - c[u]
    dv = p[:, v] - c[v]
    ok = np.isfinite(t) & (t > HIT_EPS) & (np.abs(du) <= q.half_size) & (np.abs(dv) <= q.half_size)
    t = np.where(ok, t, np.inf)
    normal = np.zeros_like(dirs)
    normal[:, k] = -np.sign(wk)
    parity = (np.floor((du + q.half_size) / q.cell) + np.floor((dv + q.half_size) / q.cell)) % 2
    albedo = np.where(parity[:, None] == 0, np.asarray(q.albedo_a), np.asarray(q.albedo_b))
    return t, normal, albedo


def render(scene: Scene, camera: geo.Camera, resolution=None):
    """Render RGB (H, W, 3) in [0, 1] and z-depth (H, W) with +inf background.

    ``resolution`` (width, height) must match the camera if given.
    """
    W, H = camera.width, camera.height
    if resolution is not None and tuple(resolution) != (W, H):
        raise ValueError(f"resolution {tuple(resolution)} does not match camera {W}x{H}")
    jj, ii = np.meshgrid(np.arange(W) + 0.5, np.arange(H) + 0.5)
    px = np.stack([jj.reshape(-1), ii.reshape(-1)], axis=-1)
    dirs = camera.world_dirs(px)  # camera-frame z of each direction is 1, so t is z-depth
    origin = camera.center
    n = len(px)
    depth = np.full(n, np.inf)
    normal = np.zeros((n, 3))
    albedo = np.zeros((n, 3))
    hits = [_sphere_hits(s, origin, dirs) for s in scene.spheres]
    hits += [_square_hits(q, origin, dirs) for q in scene.squares]
    for t, nrm, alb in hits:
        closer = t < depth
        depth = np.where(closer, t, depth)
        normal = np.where(closer[:, None], nrm, normal)
        albedo = np.where(closer[:, None], alb, albedo)
    shade = AMBIENT + (1.0 - AMBIENT) * np.maximum(normal @ LIGHT_DIR, 0.0)
    rgb = np.where(np.isfinite(depth)[:, None], albedo * shade[:, None], np.asarray(scene.background))
    return np.clip(rgb, 0.0, 1.0).reshape(H, W, 3), depth.reshape(H, W)


def surface_distance(scene: Scene, points) -> np.ndarray:
    """Distance from each point (..., 3) to the nearest primitive surface."""
    points = np.asarray(points, dtype=np.float64)
    best = np.full(points.shape[:-1], np.inf)
    for s in scene.spheres:
        best = np.minimum(best, np.abs(np.linalg.norm(points - np.asarray(s.center), axis=-1) - s.radius))
    for q in scene.squares:
        c = np.asarray(q.center)
        u, v = [i for i in range(3) if i != q.axis]
        du = np.maximum(np.abs(points[..., u] - c[u]) - q.half_size, 0.0)
        dv = np.maximum(np.abs(points[..., v] - c[v]) - q.half_size, 0.0)
        dk = points[..., q.axis] - c[q.axis]
        best = np.minimum(best, np.sqrt(du**2 + dv**2 + dk**2))
    return best


# ---------------------------------------------------------------------------
# cameras
# ---------------------------------------------------------------------------


@dataclass
class CameraDistribution:
    """Cameras on a sphere around the origin looking at it."""

    fov_deg: tuple = (30.0, 70.0)
    radius: tuple = (2.2, 3.0)
    elevation_deg: tuple = (-10.0, 40.0)
    azimuth_spread_deg: float = 90.0
    image_size: int = 32

    def sample(self, rng: np.random.Generator, views: int) -> list:
        base = rng.uniform(0.0, 360.0)
        cams = []
        for _ in range(views):
            az = math.radians(base + rng.uniform(-0.5, 0.5) * self.azimuth_spread_deg)
            el = math.radians(rng.uniform(*self.elevation_deg))
            r = rng.uniform(*self.radius)
            fov = rng.uniform(*self.fov_deg)
            eye = r * np.array([math.cos(el) * math.cos(az), math.sin(el), math.cos(el) * math.sin(az)])
            cams.append(geo.Camera.look_at(eye, np.zeros(3), fov, self.image_size, self.image_size))
        return cams


def quaternion_camera(cam: geo.Camera, q=None) -> geo.Camera:
    """Same camera with its rotation rebuilt from quaternion ``q`` (default: from its own rotation).

    Matrix -> quaternion -> matrix is not bitwise idempotent, so the stored
    quaternion, not the matrix, is the source of truth for the text format.
    """
    q = geo.rotation_to_quat(cam.R) if q is None else np.asarray(q, dtype=np.float64)
    return geo.Camera(cam.K, geo.rigid(geo.quat_to_rotation(q), cam.t), cam.width, cam.height)


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------


def write_ppm(path, rgb) -> None:
    rgb = np.asarray(rgb)
    if rgb.dtype != np.uint8:
        rgb = to_uint8(rgb)
    H, W, _ = rgb.shape
    Path(path).write_bytes(f"P6\n{W} {H}\n255\n".encode() + np.ascontiguousarray(rgb).tobytes())


def _read_header(data: bytes, count: int):
    """Split ``count`` whitespace-separated header tokens (skipping comments) from binary data."""
    tokens = []
    i = 0
    while len(tokens) < count:
        while data[i : i + 1].isspace():
            i += 1
        if data[i : i + 1] == b"#":
            while data[i : i + 1] not in (b"\n", b""):
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        tokens.append(data[i:j].decode())
        i = j
    return tokens, i + 1


def read_ppm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, maxval), off = _read_header(data, 4)
    if magic != "P6" or int(maxval) != 255:
        raise ValueError(f"{path}: expected binary P6 with maxval 255")
    w, h = int(w), int(h)
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


def write_pfm(path, depth) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("write_pfm expects a single-channel (H, W) map")
    H, W = depth.shape
    Path(path).write_bytes(f"Pf\n{W} {H}\n-1.0\n".encode() + np.ascontiguousarray(depth[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    (magic, w, h, scale), off = _read_header(data, 4)
    if magic not in ("Pf", "PF"):
        raise ValueError(f"{path}: not a PFM file")
    ch = 3 if magic == "PF" else 1
    w, h, scale = int(w), int(h), float(scale)
    dt = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(data, dtype=dt, count=w * h * ch, offset=off).astype(np.float32)
    arr = arr.reshape(h, w, ch) if ch == 3 else arr.reshape(h, w)
    return arr[::-1].copy()


def format_cameras(cameras, quats=None) -> str:
    """One line per view; ``quats`` (V, 4) overrides the quaternions derived from the rotations."""
    lines = []
    for i, cam in enumerate(cameras):
        q = geo.rotation_to_quat(cam.R) if quats is None else quats[i]
        vals = [cam.K[0, 0], cam.K[1, 1], cam.K[0, 2], cam.K[1, 2], *q, *cam.t]
        lines.append(" ".join(repr(float(v)) for v in vals) + f" {cam.width} {cam.height}")
    return "\n".join(lines) + "\n"


def parse_cameras(text: str, with_quats: bool = False):
    """Cameras from ``cameras.txt`` text; optionally also the stored quaternions (V, 4)."""
    cams, quats = [], []
    for ln, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 13:
            raise ValueError(f"cameras.txt line {ln}: expected 13 fields, got {len(parts)}")
        fx, fy, cx, cy, qw, qx, qy, qz, tx, ty, tz = (float(p) for p in parts[:11])
        quats.append([qw, qx, qy, qz])
        R = geo.quat_to_rotation(quats[-1])
        cams.append(geo.Camera.from_params(fx, fy, cx, cy, R, [tx, ty, tz], int(parts[11]), int(parts[12])))
    return (cams, np.array(quats)) if with_quats else cams


def to_uint8(rgb) -> np.ndarray:
    return np.round(np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------


def split_of(seed: int) -> str:
    return "train" if seed % 2 == 0 else "val"


@dataclass
class SceneSample:
    cameras: list
    images: np.ndarray  # (V, H, W, 3) in [0, 1]
    depths: np.ndarray  # (V, H, W) z-depth, +inf background
    target_index: int
    split: str
    seed: int = 0
    scale: float = 1.0
    quats: np.ndarray | None = None  # (V, 4) quaternions the rotations were built from

    @property
    def views(self) -> list:
        return list(zip(self.cameras, self.images, self.depths))


def render_sample(seed: int, views: int, dist: CameraDistribution) -> SceneSample:
    """Render one scene's views with poses normalized to the first camera."""
    scene = generate_scene(seed)
    rng = np.random.default_rng([int(seed) % 2**64, 1])
    cams = dist.sample(rng, views)
    rendered = [render(scene, c) for c in cams]
    norm, scale = geo.normalize_to_first_camera(cams)
    quats = np.array([geo.rotation_to_quat(c.R) for c in norm])
    norm = [quaternion_camera(c, q) for c, q in zip(norm, quats)]
    images = np.stack([to_uint8(rgb) for rgb, _ in rendered]).astype(np.float64) / 255.0
    depths = np.stack([d for _, d in rendered]) * scale
    return SceneSample(norm, images, depths.astype(np.float32).astype(np.float64), views - 1, split_of(seed), seed, scale, quats)


def write_sample(sample: SceneSample, out_dir) -> Path:
    d = Path(out_dir) / f"scene_{sample.seed}"
    d.mkdir(parents=True, exist_ok=True)
    for i, (img, dep) in enumerate(zip(sample.images, sample.depths)):
        write_ppm(d / f"view_{i}.ppm", to_uint8(img))
        write_pfm(d / f"view_{i}.pfm", dep)
    (d / "cameras.txt").write_text(format_cameras(sample.cameras, sample.quats))
    meta = {"seed": sample.seed, "split": sample.split, "scale": sample.scale, "views": len(sample.cameras),
            "target_index": sample.target_index}
    (d / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return d


def read_sample(scene_dir) -> SceneSample:
    d = Path(scene_dir)
    meta = json.loads((d / "meta.json").read_text())
    cams, quats = parse_cameras((d / "cameras.txt").read_text(), with_quats=True)
    images = np.stack([read_ppm(d / f"view_{i}.ppm") for i in range(len(cams))]).astype(np.float64) / 255.0
    depths = np.stack([read_pfm(d / f"view_{i}.pfm") for i in range(len(cams))]).astype(np.float64)
    return SceneSample(cams, images, depths, int(meta["target_index"]), meta["split"], int(meta["seed"]), float(meta["scale"]),
                       quats)


def make_dataset(num_scenes: int, views_per_scene: int, dist: CameraDistribution | None, out_dir, first_seed: int = 0) -> dict:
    """Render ``num_scenes`` scenes with seeds ``first_seed ...`` into ``out_dir``; returns split counts."""
    dist = dist or CameraDistribution()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    counts = {"train": 0, "val": 0}
    for seed in range(first_seed, first_seed + num_scenes):
        sample = render_sample(seed, views_per_scene, dist)
        try:
            write_sample(sample, out)
        except OSError as e:
            raise OSError(f"failed writing scene {seed} under {out}: {e}") from e
        counts[sample.split] += 1
    log.info("wrote %d scenes to %s", num_scenes, out)
    return counts


@dataclass
class Dataset:
    """Stacked samples of one split: images (S, V, H, W, 3), depths (S, V, H, W), cameras K/T (S, V, ...)."""

    images: np.ndarray
    depths: np.ndarray
    K: np.ndarray
    T: np.ndarray
    seeds: np.ndarray
    width: int
    height: int
    extra: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.seeds)


def load_dataset(path, split: str | None = None) -> Dataset:
    path = Path(path)
    dirs = sorted((p for p in path.glob("scene_*") if p.is_dir()), key=lambda p: int(p.name.split("_")[1]))
    if not dirs:
        raise FileNotFoundError(f"no scene_<seed> directories under {path}")
    samples = [read_sample(d) for d in dirs]
    if split is not None:
        samples = [s for s in samples if s.split == split]
        if not samples:
            raise ValueError(f"dataset {path} has no {split!r} scenes")
    cam0 = samples[0].cameras[0]
    return Dataset(
        np.stack([s.images for s in samples]),
        np.stack([s.depths for s in samples]),
        np.array([[c.K for c in s.cameras] for s in samples]),
        np.array([[c.T for c in s.cameras] for s in samples]),
        np.array([s.seed for s in samples]),
        cam0.width,
        cam0.height,
    )
