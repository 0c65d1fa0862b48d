"""Pinhole cameras, rigid transforms, patch rays and projection onto a query camera.

Conventions: extrinsics are world-to-camera (``x_cam = R x_world + t``),
pixel ``(row i, col j)`` covers ``[j, j+1] x [i, i+1]`` in continuous pixel
coordinates, and all depths are camera-frame z.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

DEPTH_FLOOR = 1e-3
DEPTH_EPS = 1e-4
ORTHO_TOL = 1e-9

THREE_CORNERS = "three_corners"
CENTER_ONLY = "center_only"


def _frozen(a, shape=None) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if shape is not None and arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    arr.setflags(write=False)
    return arr


def is_rigid(G, tol: float = ORTHO_TOL) -> bool:
    G = np.asarray(G, dtype=np.float64)
    if G.shape != (4, 4):
        return False
    R = G[:3, :3]
    return (
        np.allclose(R.T @ R, np.eye(3), atol=tol, rtol=0)
        and abs(np.linalg.det(R) - 1.0) <= tol
        and np.allclose(G[3], [0, 0, 0, 1], atol=0, rtol=0)
    )


def rigid(R, t) -> np.ndarray:
    G = np.eye(4)
    G[:3, :3] = R
    G[:3, 3] = t
    return G


def rigid_inverse(G) -> np.ndarray:
    G = np.asarray(G, dtype=np.float64)
    R = G[:3, :3]
    return rigid(R.T, -R.T @ G[:3, 3])


def rotation_from_axis_angle(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    x, y, z = axis
    Kx = np.array([[0, -z, y], [z, 0, -x], [-y, x, 0]])
    return np.eye(3) + np.sin(angle) * Kx + (1 - np.cos(angle)) * (Kx @ Kx)


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    return quat_to_rotation(q / np.linalg.norm(q))


def random_rigid(rng: np.random.Generator, translation_scale: float = 1.0) -> np.ndarray:
    return rigid(random_rotation(rng), rng.normal(size=3) * translation_scale)


def quat_to_rotation(q) -> np.ndarray:
    """Unit quaternion (w, x, y, z) to rotation matrix."""
    w, x, y, z = (float(v) for v in q)
    n = w * w + x * x + y * y + z * z
    s = 2.0 / n
    return np.array(
        [
            [1 - s * (y * y + z * z), s * (x * y - w * z), s * (x * z + w * y)],
            [s * (x * y + w * z), 1 - s * (x * x + z * z), s * (y * z - w * x)],
            [s * (x * z - w * y), s * (y * z + w * x), 1 - s * (x * x + y * y)],
        ]
    )


def rotation_to_quat(R) -> np.ndarray:
    """Rotation matrix to unit quaternion (w, x, y, z) with w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    tr = np.trace(R)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s]
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = np.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2]) * 2
        q = [(R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s]
    elif R[1, 1] > R[2, 2]:
        s = np.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2]) * 2
        q = [(R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1]) * 2
        q = [(R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s]
    q = np.array(q)
    q /= np.linalg.norm(q)
    return -q if q[0] < 0 else q


@dataclass(frozen=True, eq=False)
class Camera:
    """Pinhole camera with zero-skew intrinsics and world-to-camera extrinsics."""

    K: np.ndarray
    T: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        K = _frozen(self.K, (3, 3))
        T = _frozen(self.T, (4, 4))
        object.__setattr__(self, "K", K)
        object.__setattr__(self, "T", T)
        if not (K[0, 0] > 0 and K[1, 1] > 0):
            raise ValueError(f"focal lengths must be positive, got fx={K[0, 0]}, fy={K[1, 1]}")
        if K[0, 1] != 0 or K[1, 0] != 0 or K[2, 0] != 0 or K[2, 1] != 0 or K[2, 2] != 1:
            raise ValueError("intrinsics must be upper-triangular with zero skew and K[2,2] = 1")
        if not is_rigid(T):
            raise ValueError("extrinsics must be a rigid transform (orthonormal R, det +1)")

    @classmethod
    def from_params(cls, fx, fy, cx, cy, R=None, t=None, width=32, height=32) -> "Camera":
        K = np.array([[fx, 0.0, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])
        R = np.eye(3) if R is None else R
        t = np.zeros(3) if t is None else t
        return cls(K, rigid(R, t), int(width), int(height))

    @classmethod
    def look_at(cls, eye, target, fov_deg: float, width: int, height: int, up=(0.0, 1.0, 0.0)) -> "Camera":
        """Camera at ``eye`` looking at ``target``; image y points along -up, horizontal FOV in degrees."""
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(fwd, [0.0, 0.0, 1.0])
        right /= np.linalg.norm(right)
        down = np.cross(fwd, right)
        R = np.stack([right, down, fwd])
        f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
        return cls.from_params(f, f, width / 2, height / 2, R, -R @ eye, width, height)

    @property
    def R(self) -> np.ndarray:
        return self.T[:3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[:3, 3]

    @cached_property
    def P(self) -> np.ndarray:
        return _frozen(self.K @ self.T[:3])

    @cached_property
    def center(self) -> np.ndarray:
        return _frozen(-self.R.T @ self.t)

    def with_extrinsics(self, T) -> "Camera":
        return Camera(self.K, T, self.width, self.height)

    def project(self, X) -> np.ndarray:
        """World points (..., 3) to pixel coordinates (..., 2)."""
        X = np.asarray(X, dtype=np.float64)
        x = X @ self.P[:, :3].T + self.P[:, 3]
        return x[..., :2] / x[..., 2:3]

    def camera_dirs(self, pixels) -> np.ndarray:
        """Camera-frame directions with unit z through continuous pixel coordinates (..., 2)."""
        pixels = np.asarray(pixels, dtype=np.float64)
        fx, fy, cx, cy = self.K[0, 0], self.K[1, 1], self.K[0, 2], self.K[1, 2]
        x = (pixels[..., 0] - cx) / fx
        y = (pixels[..., 1] - cy) / fy
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def world_dirs(self, pixels) -> np.ndarray:
        """World-frame directions through ``pixels`` scaled so the camera-frame z component is 1."""
        return self.camera_dirs(pixels) @ self.R

    def __eq__(self, other):
        if not isinstance(other, Camera):
            return NotImplemented
        return (
            np.array_equal(self.K, other.K)
            and np.array_equal(self.T, other.T)
            and (self.width, self.height) == (other.width, other.height)
        )

    __hash__ = None


@dataclass(frozen=True, eq=False)
class RaySegment:
    """Ray segment in homogeneous world coordinates.

    ``point_lo``/``point_hi`` bracket the predicted point; a point at infinity
    has last component 0 (its first three entries hold the direction).
    """

    center: np.ndarray
    point_lo: np.ndarray
    point_hi: np.ndarray
    depth: float
    sigma: float = 0.0

    def __post_init__(self):
        for name in ("center", "point_lo", "point_hi"):
            object.__setattr__(self, name, _frozen(getattr(self, name), (4,)))

    @property
    def at_infinity(self) -> bool:
        return self.point_lo[3] == 0.0


@dataclass(frozen=True, eq=False)
class ProjectedRayInterval:
    """Per-component [lo, hi] of (x, y, z, u, v, disparity) in a query camera frame."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", _frozen(self.lo, (6,)))
        object.__setattr__(self, "hi", _frozen(self.hi, (6,)))
        if np.any(self.lo > self.hi):
            raise ValueError("interval lower bound exceeds upper bound")


# ---------------------------------------------------------------------------
# rays
# ---------------------------------------------------------------------------


def patch_corner_pixels(row: int, col: int, patch_size: int, ray_layout: str = THREE_CORNERS) -> np.ndarray:
    """Continuous pixel coordinates (R, 2) of the rays used for one patch.

    ``three_corners`` gives the top-left, top-right and bottom-left corners;
    ``center_only`` gives the patch center.
    """
    x0, y0 = col * patch_size, row * patch_size
    if ray_layout == THREE_CORNERS:
        return np.array([[x0, y0], [x0 + patch_size, y0], [x0, y0 + patch_size]], dtype=np.float64)
    if ray_layout == CENTER_ONLY:
        return np.array([[x0 + patch_size / 2, y0 + patch_size / 2]], dtype=np.float64)
    raise ValueError(f"unknown ray layout {ray_layout!r}")


def ray_pixel_indices(row: int, col: int, patch_size: int, ray_layout: str = THREE_CORNERS) -> np.ndarray:
    """(row, col) of the image pixel whose depth serves each ray of a patch."""
    y0, x0 = row * patch_size, col * patch_size
    last = patch_size - 1
    if ray_layout == THREE_CORNERS:
        return np.array([[y0, x0], [y0, x0 + last], [y0 + last, x0]])
    if ray_layout == CENTER_ONLY:
        return np.array([[y0 + patch_size // 2, x0 + patch_size // 2]])
    raise ValueError(f"unknown ray layout {ray_layout!r}")


def patch_rays(camera: Camera, patch_row: int, patch_col: int, patch_size: int, ray_layout: str = THREE_CORNERS):
    """Unit world-frame ray directions for one patch, plus the camera center."""
    rows = camera.height // patch_size
    cols = camera.width // patch_size
    if not (0 <= patch_row < rows and 0 <= patch_col < cols):
        raise ValueError(
            f"patch ({patch_row}, {patch_col}) out of bounds for {camera.width}x{camera.height} image "
            f"with patch size {patch_size}"
        )
    px = patch_corner_pixels(patch_row, patch_col, patch_size, ray_layout)
    d = camera.world_dirs(px)
    return d / np.linalg.norm(d, axis=-1, keepdims=True), camera.center.copy()


def make_segment(camera: Camera, ray, d: float, sigma: float = 0.0, depth_floor: float = DEPTH_FLOOR) -> RaySegment:
    """Segment along ``ray`` from ``camera`` between camera-frame depths max(d - sigma, floor) and d + sigma."""
    d = float(d)
    sigma = float(sigma)
    if not (np.isfinite(d) and np.isfinite(sigma)):
        raise ValueError(f"depth and sigma must be finite, got d={d}, sigma={sigma}")
    if d <= 0 or sigma < 0:
        raise ValueError(f"need d > 0 and sigma >= 0, got d={d}, sigma={sigma}")
    ray = np.asarray(ray, dtype=np.float64)
    z = float(camera.R[2] @ ray)
    if z <= 0:
        raise ValueError("ray points away from the camera's viewing direction")
    step = ray / z
    c = camera.center
    lo = max(d - sigma, depth_floor)
    hi = d + sigma
    return RaySegment(
        np.append(c, 1.0),
        np.append(c + lo * step, 1.0),
        np.append(c + hi * step, 1.0),
        d,
        sigma,
    )


def segment_at_infinity(camera: Camera, ray) -> RaySegment:
    ray = np.asarray(ray, dtype=np.float64)
    p = np.append(ray / np.linalg.norm(ray), 0.0)
    return RaySegment(np.append(camera.center, 1.0), p, p, np.inf, 0.0)


def _project_point(query: Camera, p, d_eps: float) -> np.ndarray:
    x = query.P @ p
    dz = x[2]
    if abs(dz) < d_eps:
        dz = d_eps if dz >= 0 else -d_eps
    if p[3] == 0.0:
        return np.array([x[0] / dz, x[1] / dz, 0.0])
    return np.array([x[0] / dz, x[1] / dz, 1.0 / dz])


def project_segment(query: Camera, seg: RaySegment, d_eps: float = DEPTH_EPS) -> ProjectedRayInterval:
    """Express a world segment in the query camera: (T c, pixel of the point, disparity)."""
    if not (np.all(np.isfinite(seg.center)) and np.all(np.isfinite(seg.point_lo)) and np.all(np.isfinite(seg.point_hi))):
        raise ValueError("segment has non-finite coordinates")
    xyz = (query.T @ seg.center)[:3]
    a = _project_point(query, seg.point_lo, d_eps)
    b = _project_point(query, seg.point_hi, d_eps)
    return ProjectedRayInterval(
        np.concatenate([xyz, np.minimum(a, b)]),
        np.concatenate([xyz, np.maximum(a, b)]),
    )


# ---------------------------------------------------------------------------
# frame changes
# ---------------------------------------------------------------------------


def apply_global_rigid(G, cameras):
    """Move the world frame by ``G`` (points map to G p); extrinsics become T G^-1."""
    G = np.asarray(G, dtype=np.float64)
    if not is_rigid(G):
        raise ValueError("global transform is not rigid")
    Ginv = rigid_inverse(G)
    return [cam.with_extrinsics(cam.T @ Ginv) for cam in cameras]


def _median_baseline(centers) -> float:
    n = len(centers)
    if n < 2:
        return 1.0
    dists = [np.linalg.norm(centers[i] - centers[j]) for i in range(n) for j in range(i + 1, n)]
    return float(np.median(dists))


def normalize_to_first_camera(cameras):
    """Re-express cameras in the first camera's frame with median baseline 1.

    Returns ``(cameras, scale)``; depths measured in the original frame must
    be multiplied by ``scale``.
    """
    if not cameras:
        raise ValueError("need at least one camera")
    T0inv = rigid_inverse(cameras[0].T)
    rel = [cam.T @ T0inv for cam in cameras]
    rel[0] = np.eye(4)
    centers = [-T[:3, :3].T @ T[:3, 3] for T in rel]
    base = _median_baseline(centers)
    # already-normalized input keeps its translations bit for bit
    scale = 1.0 if base <= 0 or abs(base - 1.0) < 1e-12 else 1.0 / base
    out = []
    for cam, T in zip(cameras, rel):
        T = T.copy()
        T[:3, 3] *= scale
        out.append(cam.with_extrinsics(T))
    return out, scale
