"""Positional-encoding strategies for multi-view attention.

Two layers live here:

* reference operations on :class:`~rayrope.geometry.Camera` objects
  (``rayrope_positions``, ``baseline_encoding``, ``input_raymaps``), used as
  oracles and by the analysis tools;
* batched encoders that turn camera arrays and per-token depth tensors into
  per-token feature transforms consumed by the attention layers.

Every strategy is expressed as four transforms (query, key, value, output)
applied to per-head features grouped by query view. The score between a
query token i and key token j is ``q^T E_i E'_j k`` where ``E_i`` is the
query-side encoding (applied to q transposed) and ``E'_j`` the key side.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, fields, replace

import numpy as np

from . import geometry as geo
from . import rope
from . import tensor as tn

log = logging.getLogger(__name__)

KINDS = ("rayrope", "rope_on_rays", "cape", "gta", "prope", "plucker_input", "none")
FLAGS = (
    "use_sigma",
    "point_at_infinity",
    "rays_per_patch",
    "single_frequency",
    "encode_value_output",
    "known_depth_mode",
)
_MEANINGFUL = {
    "rayrope": set(FLAGS),
    "rope_on_rays": {"rays_per_patch", "single_frequency", "encode_value_output", "known_depth_mode"},
    "cape": {"known_depth_mode"},
    "gta": {"encode_value_output", "known_depth_mode"},
    "prope": {"encode_value_output", "known_depth_mode"},
    "plucker_input": {"known_depth_mode"},
    "none": {"known_depth_mode"},
}
ROPE_TAIL_BASE = 10000.0


@dataclass(frozen=True)
class EncodingStrategy:
    kind: str = "rayrope"
    use_sigma: bool = True
    point_at_infinity: bool = False
    rays_per_patch: int = 3
    single_frequency: bool = False
    encode_value_output: bool = True
    known_depth_mode: bool = False
    omega_min: float = rope.OMEGA_MIN
    omega_max: float = rope.OMEGA_MAX

    @classmethod
    def create(cls, kind: str = "rayrope", omega_min=rope.OMEGA_MIN, omega_max=rope.OMEGA_MAX, **flags) -> "EncodingStrategy":
        """Build a strategy, rejecting flags that mean nothing for ``kind``."""
        if kind not in KINDS:
            raise ValueError(f"unknown encoding kind {kind!r}; expected one of {KINDS}")
        unknown = set(flags) - set(FLAGS)
        if unknown:
            raise ValueError(f"unknown encoding flags {sorted(unknown)}")
        given = {k: v for k, v in flags.items() if v is not None}
        bad = set(given) - _MEANINGFUL[kind]
        if bad:
            raise ValueError(f"flags {sorted(bad)} are not meaningful for encoding kind {kind!r}")
        if kind == "cape":
            given.setdefault("encode_value_output", False)
        strat = cls(kind=kind, omega_min=float(omega_min), omega_max=float(omega_max), **given)
        if strat.rays_per_patch not in (1, 3):
            raise ValueError(f"rays_per_patch must be 1 or 3, got {strat.rays_per_patch}")
        if not (0 < strat.omega_min <= strat.omega_max):
            raise ValueError("need 0 < omega_min <= omega_max")
        return strat

    @property
    def rotary(self) -> bool:
        return self.kind in ("rayrope", "rope_on_rays")

    @property
    def ray_layout(self) -> str:
        return geo.THREE_CORNERS if self.rays_per_patch == 3 else geo.CENTER_ONLY

    @property
    def components(self) -> int:
        return 6 * self.rays_per_patch

    @property
    def predicts_depth(self) -> bool:
        return self.kind == "rayrope" and not self.point_at_infinity

    @property
    def predicts_sigma(self) -> bool:
        return self.predicts_depth and self.use_sigma

    @property
    def input_raymap(self) -> str:
        return "plucker" if self.kind == "plucker_input" else "camray"

    def head_dim_divisor(self) -> int:
        if self.rotary:
            return 2 * self.components
        if self.kind == "cape":
            return 4
        if self.kind in ("gta", "prope"):
            return 8
        return 1

    def check_head_dim(self, head_dim: int) -> None:
        div = self.head_dim_divisor()
        if head_dim % div:
            raise ValueError(f"head dim {head_dim} must be divisible by {div} for encoding kind {self.kind!r}")

    def freqs(self, head_dim: int) -> np.ndarray:
        self.check_head_dim(head_dim)
        F = head_dim // (2 * self.components)
        return rope.frequency_schedule(F, self.omega_min, self.omega_max, single=self.single_frequency)

    def flags(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name in FLAGS}


def ablation_config(variant, base: EncodingStrategy | None = None) -> EncodingStrategy:
    """RayRoPE ablation variants by number (1, 2, 4, 5, 6; 3 is the unablated model).

    1: no sigma; 2: point at infinity; 4: single ray; 5: single frequency;
    6: no value/output encoding.
    """
    base = base or EncodingStrategy.create("rayrope")
    changes = {
        1: dict(use_sigma=False),
        2: dict(point_at_infinity=True),
        3: {},
        4: dict(rays_per_patch=1),
        5: dict(single_frequency=True),
        6: dict(encode_value_output=False),
    }
    try:
        v = int(variant)
    except (TypeError, ValueError):
        raise ValueError(f"unknown ablation variant {variant!r}") from None
    if v not in changes:
        raise ValueError(f"unknown ablation variant {variant!r}; expected 1-6")
    return replace(base, **changes[v])


# ---------------------------------------------------------------------------
# reference (per-camera) operations
# ---------------------------------------------------------------------------


def _grid(camera: geo.Camera, patch_size: int):
    return camera.height // patch_size, camera.width // patch_size


def known_depth_at_rays(depth_map, patch_size: int, ray_layout: str) -> np.ndarray:
    """Known depth for every (token, ray): array (HW, R) sampled at each ray's pixel."""
    H, W = depth_map.shape
    rows, cols = H // patch_size, W // patch_size
    out = []
    for r in range(rows):
        for c in range(cols):
            idx = geo.ray_pixel_indices(r, c, patch_size, ray_layout)
            out.append(depth_map[idx[:, 0], idx[:, 1]])
    return np.asarray(out, dtype=np.float64)


def _valid_known(values) -> bool:
    values = np.asarray(values)
    return bool(np.all((values > 0) & ~np.isnan(values)))


def rayrope_positions(cameras, patch_size: int, d, sigma, strategy: EncodingStrategy, known_depths=None):
    """Per-view, per-token lists of :class:`RaySegment` (one per ray).

    ``d`` and ``sigma`` have shape (N, HW). Where a view's known depth map is
    given, each ray takes the depth at its pixel with zero uncertainty; a
    token whose known depths are not all positive falls back to the
    prediction. Known depth +inf maps to the point at infinity.
    """
    d = np.asarray(d, dtype=np.float64)
    sigma = np.zeros_like(d) if sigma is None or not strategy.use_sigma else np.asarray(sigma, dtype=np.float64)
    out = []
    fallback = 0
    for n, cam in enumerate(cameras):
        rows, cols = _grid(cam, patch_size)
        known = None
        if known_depths is not None and known_depths[n] is not None:
            known = known_depth_at_rays(known_depths[n], patch_size, strategy.ray_layout)
        view = []
        for t in range(rows * cols):
            dirs, _ = geo.patch_rays(cam, t // cols, t % cols, patch_size, strategy.ray_layout)
            use_known = known is not None and _valid_known(known[t])
            if known is not None and not use_known:
                fallback += 1
            segs = []
            for r, ray in enumerate(dirs):
                if strategy.point_at_infinity:
                    segs.append(geo.segment_at_infinity(cam, ray))
                elif use_known:
                    kd = known[t, r]
                    segs.append(geo.segment_at_infinity(cam, ray) if np.isinf(kd) else geo.make_segment(cam, ray, kd, 0.0))
                else:
                    segs.append(geo.make_segment(cam, ray, d[n, t], sigma[n, t]))
            view.append(segs)
        out.append(view)
    if fallback:
        log.info("known depth invalid for %d tokens; using predicted depth", fallback)
    return out


def component_scale(width: int) -> np.ndarray:
    """Per-component multipliers for (x, y, z, u, v, disparity)."""
    return np.array([1.0, 1.0, 1.0, 1.0 / width, 1.0 / width, 1.0])


def reference_token_encoding(query: geo.Camera, segments, freqs, head_dim: int) -> rope.BlockEncoding:
    """Expected RayRoPE encoding of one token's segments seen from ``query``."""
    intervals = [geo.project_segment(query, s) for s in segments]
    return rope.build_encoding(intervals, len(segments), freqs, head_dim, component_scale(query.width))


def camera_matrix(kind: str, camera: geo.Camera) -> np.ndarray:
    """4x4 matrix repeated along the diagonal: extrinsics for CaPE/GTA, lifted K T for PRoPE.

    PRoPE uses intrinsics in image-normalized units (pixels divided by the
    image width/height) so the lifted matrix stays well conditioned.
    """
    if kind in ("cape", "gta"):
        return np.array(camera.T)
    if kind == "prope":
        Kn = np.diag([1.0 / camera.width, 1.0 / camera.height, 1.0]) @ camera.K
        lifted = np.zeros((4, 4))
        lifted[:3, :3] = Kn
        lifted[3, 3] = 1.0
        return lifted @ camera.T
    raise ValueError(f"no camera matrix for kind {kind!r}")


def _checked_inverse(M) -> np.ndarray:
    cond = np.linalg.cond(M)
    if not np.isfinite(cond) or cond > 1e12:
        raise ValueError(f"singular camera block (condition number {cond:.3g})")
    log.debug("camera block condition number %.3g", cond)
    return np.linalg.inv(M)


def rope_tail_freqs(tail_dim: int) -> np.ndarray:
    F = tail_dim // 4
    return ROPE_TAIL_BASE ** (-np.arange(F) / F)


def _block_diag(blocks) -> np.ndarray:
    n = sum(b.shape[0] for b in blocks)
    M = np.zeros((n, n))
    i = 0
    for b in blocks:
        k = b.shape[0]
        M[i : i + k, i : i + k] = b
        i += k
    return M


def baseline_encoding(kind: str, camera_i: geo.Camera, camera_j: geo.Camera, uv_i, uv_j, dim: int):
    """Dense (query-side, key-side) encodings for CaPE / GTA / PRoPE.

    Attention uses ``E_q^T q``, ``E_k k``, ``E_k v`` and ``E_q o``, so the score
    is ``q^T E_q E_k k``, which for camera blocks is ``q^T M_i M_j^-1 k``.
    ``uv_i``/``uv_j`` are integer patch indices (column, row) for the 2D RoPE tail.
    """
    if kind not in ("cape", "gta", "prope"):
        raise ValueError(f"baseline encoding kind must be cape, gta or prope, got {kind!r}")
    Mi = camera_matrix(kind, camera_i)
    Mj_inv = _checked_inverse(camera_matrix(kind, camera_j))
    if kind == "cape":
        if dim % 4:
            raise ValueError(f"dim {dim} must be divisible by 4 for cape")
        n = dim // 4
        return _block_diag([Mi] * n), _block_diag([Mj_inv] * n)
    if dim % 8:
        raise ValueError(f"dim {dim} must be divisible by 8 for {kind}")
    n = dim // 8
    freqs = rope_tail_freqs(dim // 2)
    tail_i = rope.encoding_from_intervals(np.asarray(uv_i, float), np.asarray(uv_i, float), freqs, dim // 2)
    tail_j = rope.encoding_from_intervals(np.asarray(uv_j, float), np.asarray(uv_j, float), freqs, dim // 2)
    return (
        _block_diag([Mi] * n + [tail_i.dense()]),
        _block_diag([Mj_inv] * n + [tail_j.conj().dense()]),
    )


def patch_center_pixels(rows: int, cols: int, patch_size: int) -> np.ndarray:
    rr, cc = np.meshgrid(np.arange(rows), np.arange(cols), indexing="ij")
    return np.stack([(cc.reshape(-1) + 0.5) * patch_size, (rr.reshape(-1) + 0.5) * patch_size], axis=-1)


def input_raymaps(kind: str, cameras, patch_size: int) -> np.ndarray:
    """Per-token 6-vectors (N, HW, 6) at patch centers.

    plucker: (unit world direction r, c x r); camray: (unit camera-frame
    direction, u / width, v / height, 0), independent of pose.
    """
    if kind not in ("plucker", "camray"):
        raise ValueError(f"unknown raymap kind {kind!r}")
    out = []
    for cam in cameras:
        rows, cols = _grid(cam, patch_size)
        px = patch_center_pixels(rows, cols, patch_size)
        if kind == "plucker":
            r = cam.world_dirs(px)
            r /= np.linalg.norm(r, axis=-1, keepdims=True)
            m = np.cross(np.broadcast_to(cam.center, r.shape), r)
            out.append(np.concatenate([r, m], axis=-1))
        else:
            r = cam.camera_dirs(px)
            r /= np.linalg.norm(r, axis=-1, keepdims=True)
            uv = px / np.array([cam.width, cam.height])
            out.append(np.concatenate([r, uv, np.zeros((len(px), 1))], axis=-1))
    return np.asarray(out)


# ---------------------------------------------------------------------------
# batched camera arrays
# ---------------------------------------------------------------------------


@dataclass
class ViewBatch:
    """Cameras for a batch of samples: K (B, N, 3, 3), T (B, N, 4, 4)."""

    K: np.ndarray
    T: np.ndarray
    width: int
    height: int
    patch_size: int

    @classmethod
    def from_cameras(cls, cameras, patch_size: int) -> "ViewBatch":
        """``cameras`` is a list (batch) of lists (views) of Camera."""
        K = np.array([[c.K for c in views] for views in cameras], dtype=np.float64)
        T = np.array([[c.T for c in views] for views in cameras], dtype=np.float64)
        c0 = cameras[0][0]
        return cls(K, T, c0.width, c0.height, patch_size)

    def cameras(self, b: int) -> list:
        return [geo.Camera(self.K[b, n], self.T[b, n], self.width, self.height) for n in range(self.K.shape[1])]

    def select(self, views) -> "ViewBatch":
        views = list(views)
        return ViewBatch(self.K[:, views], self.T[:, views], self.width, self.height, self.patch_size)

    def transformed(self, G) -> "ViewBatch":
        """Apply per-sample global rigid transforms G (B, 4, 4)."""
        G = np.asarray(G, dtype=np.float64)
        Ginv = np.linalg.inv(G)
        return ViewBatch(self.K, self.T @ Ginv[:, None], self.width, self.height, self.patch_size)

    @property
    def batch(self) -> int:
        return self.K.shape[0]

    @property
    def views(self) -> int:
        return self.K.shape[1]

    @property
    def rows(self) -> int:
        return self.height // self.patch_size

    @property
    def cols(self) -> int:
        return self.width // self.patch_size

    @property
    def tokens_per_view(self) -> int:
        return self.rows * self.cols

    @property
    def R(self) -> np.ndarray:
        return self.T[..., :3, :3]

    @property
    def t(self) -> np.ndarray:
        return self.T[..., :3, 3]

    @property
    def centers(self) -> np.ndarray:
        return -np.einsum("bnji,bnj->bni", self.R, self.t)

    def ray_pixels(self, ray_layout: str) -> np.ndarray:
        """(HW, R, 2) continuous pixel coordinates of each token's rays."""
        return np.array(
            [geo.patch_corner_pixels(r, c, self.patch_size, ray_layout) for r in range(self.rows) for c in range(self.cols)]
        )

    def camera_dirs(self, pixels) -> np.ndarray:
        """Camera-frame unit-z directions (B, N, *pixels.shape[:-1], 3)."""
        fx = self.K[..., 0, 0]
        fy = self.K[..., 1, 1]
        cx = self.K[..., 0, 2]
        cy = self.K[..., 1, 2]
        extra = (None,) * (pixels.ndim - 1)
        x = (pixels[..., 0] - cx[(...,) + extra]) / fx[(...,) + extra]
        y = (pixels[..., 1] - cy[(...,) + extra]) / fy[(...,) + extra]
        return np.stack([x, y, np.ones_like(x)], axis=-1)

    def raymaps(self, kind: str) -> np.ndarray:
        """Batched :func:`input_raymaps`: (B, N, HW, 6)."""
        px = patch_center_pixels(self.rows, self.cols, self.patch_size)
        dc = self.camera_dirs(px)
        if kind == "camray":
            r = dc / np.linalg.norm(dc, axis=-1, keepdims=True)
            uv = np.broadcast_to(px / np.array([self.width, self.height]), r.shape[:-1] + (2,))
            return np.concatenate([r, uv, np.zeros(r.shape[:-1] + (1,))], axis=-1)
        if kind == "plucker":
            r = np.einsum("bnpi,bnij->bnpj", dc, self.R)
            r = r / np.linalg.norm(r, axis=-1, keepdims=True)
            m = np.cross(np.broadcast_to(self.centers[:, :, None, :], r.shape), r)
            return np.concatenate([r, m], axis=-1)
        raise ValueError(f"unknown raymap kind {kind!r}")


def known_depth_rays(depths, views: ViewBatch, ray_layout: str) -> np.ndarray:
    """Sample (B, N, H, W) depth maps at every ray pixel: (B, N, HW, R)."""
    idx = np.array(
        [geo.ray_pixel_indices(r, c, views.patch_size, ray_layout) for r in range(views.rows) for c in range(views.cols)]
    )
    return np.asarray(depths, dtype=np.float64)[:, :, idx[..., 0], idx[..., 1]]


# ---------------------------------------------------------------------------
# feature transforms
# ---------------------------------------------------------------------------


def _expand_heads(x, heads: int):
    """(B, G, T, P) -> (B, G, H, T, P); ``x`` may be a Tensor or an array."""
    B, G, T, P = x.shape
    if isinstance(x, tn.Tensor):
        return tn.broadcast_to(tn.reshape(x, (B, G, 1, T, P)), (B, G, heads, T, P))
    return np.broadcast_to(x[:, :, None], (B, G, heads, T, P))


class RotaryTransform:
    """Blockwise 2x2 transform with coefficients (B, G, T, P), optionally transposed."""

    def __init__(self, a, b, transpose: bool = False):
        self.a = a
        self.b = b
        self.transpose = transpose

    def __call__(self, x: tn.Tensor) -> tn.Tensor:
        heads = x.shape[2]
        return tn.rotate_pairs(x, _expand_heads(self.a, heads), _expand_heads(self.b, heads), conj=self.transpose)


class MatrixTransform:
    """Per-token 4x4 blocks on the first ``cam_dim`` features plus an optional rotary tail.

    ``M`` (B, G, T, 4, 4) acts on each 4-feature block as ``x -> M x``.
    """

    def __init__(self, M, cam_dim: int, tail: RotaryTransform | None = None):
        self.M = M
        self.cam_dim = cam_dim
        self.tail = tail

    def __call__(self, x: tn.Tensor) -> tn.Tensor:
        B, G, H, T, Dh = x.shape
        cam = x if self.tail is None else tn.take(x, (Ellipsis, slice(0, self.cam_dim)))
        nb = self.cam_dim // 4
        blocks = tn.reshape(cam, (B, G, H, T, nb, 4))
        Mt = np.broadcast_to(np.swapaxes(self.M, -1, -2)[:, :, None], (B, G, H, T, 4, 4))
        cam = tn.reshape(tn.matmul(blocks, tn.Tensor(Mt)), (B, G, H, T, self.cam_dim))
        if self.tail is None:
            return cam
        rest = self.tail(tn.take(x, (Ellipsis, slice(self.cam_dim, Dh))))
        return tn.concat([cam, rest], axis=-1)


@dataclass
class LayerTransforms:
    """Transforms for one attention call. ``groups`` query-view groups; None means identity."""

    groups: int
    query: object = None
    key: object = None
    value: object = None
    output: object = None


IDENTITY = LayerTransforms(1)


# ---------------------------------------------------------------------------
# batched encoders
# ---------------------------------------------------------------------------


def _rotary_consts(lo, hi, freqs):
    """Expected-rotation coefficients for constant bounds (..., C) -> (..., C, F)."""
    return rope.expected_coeffs(freqs, lo[..., None], hi[..., None])


def _expected_rotation(lo: tn.Tensor, hi: tn.Tensor, freqs, width_eps: float = rope.WIDTH_EPS):
    """Tensor version of the midpoint-sinc expected rotation; lo/hi (..., C) -> a, b (..., C, F).

    Fused into two nodes with hand-written adjoints; the narrow-width branch
    is the plain rotation at the midpoint (zero derivative in the width).
    """
    w = np.asarray(freqs, dtype=lo.data.dtype)
    l, h = lo.data[..., None], hi.data[..., None]
    mid = 0.5 * (l + h) * w
    half = 0.5 * (h - l) * w
    wide = 2.0 * np.abs(half) > width_eps
    safe = np.where(wide, half, 1.0)
    sinc = np.where(wide, np.sin(safe) / safe, 1.0)
    dsinc = np.where(wide, (np.cos(safe) - sinc) / safe, 0.0)
    cm, sm = np.cos(mid), np.sin(mid)
    a, b = cm * sinc, sm * sinc
    hw = 0.5 * w

    def adjoint(g_mid, g_half):
        # contracting the short frequency axis with a product beats a reduction
        return (g_mid - g_half) @ hw, (g_mid + g_half) @ hw

    def a_backward(g):
        return adjoint(-g * b, g * cm * dsinc)

    def b_backward(g):
        return adjoint(g * a, g * sm * dsinc)

    return tn.custom(a, (lo, hi), a_backward), tn.custom(b, (lo, hi), b_backward)


def _clamp_depth(den: tn.Tensor, eps: float) -> tn.Tensor:
    small = np.abs(den.data) < eps
    if not small.any():
        return den
    repl = np.where(den.data >= 0, eps, -eps)
    return tn.where(~small, den, repl)


class RayRopeProjector:
    """Projects key-token ray segments into every query camera and builds expected encodings.

    Camera-only quantities (ray directions, centers in each query frame) are
    computed once; calling the projector with depth tensors produces the
    coefficient tensors (B, Nq, Tk, D_head/2).
    """

    def __init__(self, strategy: EncodingStrategy, qviews: ViewBatch, kviews: ViewBatch, head_dim: int,
                 known_depths=None, depth_floor: float = geo.DEPTH_FLOOR, d_eps: float = geo.DEPTH_EPS):
        self.strategy = strategy
        self.freqs = strategy.freqs(head_dim)
        self.depth_floor = depth_floor
        self.d_eps = d_eps
        R = strategy.rays_per_patch
        B, Nq, Nk = qviews.batch, qviews.views, kviews.views
        HW = kviews.tokens_per_view
        self.shape = (B, Nq, Nk * HW, R)
        pix = kviews.ray_pixels(strategy.ray_layout)  # (HW, R, 2)
        w = np.einsum("bnhri,bnij->bnhrj", kviews.camera_dirs(pix), kviews.R)  # world, unit camera z
        xyz = np.einsum("bqij,bkj->bqki", qviews.R, kviews.centers) + qviews.t[:, :, None, :]
        alpha = np.einsum("bqij,bqkj->bqki", qviews.K, xyz)
        beta = np.einsum("bqij,bqjl,bkhrl->bqkhri", qviews.K, qviews.R, w)
        self.alpha = [np.broadcast_to(alpha[:, :, :, None, None, i], (B, Nq, Nk, HW, R)).reshape(self.shape) for i in range(3)]
        self.beta = [beta[..., i].reshape(self.shape) for i in range(3)]
        self.inv_width = 1.0 / qviews.width

        xyz_t = np.broadcast_to(xyz[:, :, :, None, None, :], (B, Nq, Nk, HW, R, 3)).reshape(self.shape + (3,))
        xa, xb = _rotary_consts(xyz_t, xyz_t, self.freqs)
        dt = tn.get_dtype()
        self.xyz_a = tn.Tensor(xa.astype(dt))
        self.xyz_b = tn.Tensor(xb.astype(dt))

        self.known = None
        if known_depths is not None and strategy.known_depth_mode:
            kd = known_depth_rays(known_depths, kviews, strategy.ray_layout)  # (B, Nk, HW, R)
            valid = np.all((kd > 0) & ~np.isnan(kd), axis=-1, keepdims=True)
            valid = np.broadcast_to(valid, kd.shape)
            bad = int((~valid[..., 0]).sum() - np.isnan(kd[..., 0]).sum())
            if bad > 0:
                log.info("known depth <= 0 for %d tokens; using predicted depth", bad)
            self.known = (valid.reshape(B, Nk * HW, R), np.where(valid, kd, 1.0).reshape(B, Nk * HW, R))

    def _infinity_uvq(self):
        den = self.beta[2]
        den = np.where(np.abs(den) < self.d_eps, np.where(den >= 0, self.d_eps, -self.d_eps), den)
        return self.beta[0] / den, self.beta[1] / den, np.zeros_like(den)

    def _uvq(self, depth: tn.Tensor):
        den = _clamp_depth(tn.add(tn.mul(depth, self.beta[2]), self.alpha[2]), self.d_eps)
        r = tn.reciprocal(den)
        u = tn.mul(tn.add(tn.mul(depth, self.beta[0]), self.alpha[0]), r)
        v = tn.mul(tn.add(tn.mul(depth, self.beta[1]), self.alpha[1]), r)
        return u, v, r

    def _per_ray(self, x: tn.Tensor) -> tn.Tensor:
        """(B, Tk) -> (B, Nq, Tk, R)."""
        B, Nq, Tk, R = self.shape
        return tn.broadcast_to(tn.reshape(x, (B, 1, Tk, 1)), self.shape)

    def segment_depths(self, d: tn.Tensor, sigma: tn.Tensor | None):
        """Near/far depths (B, Nq, Tk, R) plus the mask of rays at infinity."""
        B, Nq, Tk, R = self.shape
        if sigma is None:
            lo = hi = self._per_ray(d)
        else:
            lo = self._per_ray(tn.maximum(tn.sub(d, sigma), self.depth_floor))
            hi = self._per_ray(tn.add(d, sigma))
        inf_mask = np.zeros(self.shape, dtype=bool)
        if self.known is not None:
            valid, kd = self.known
            isinf = np.isinf(kd)
            kd_fin = np.where(isinf, 1.0, kd)
            valid_e = np.broadcast_to(valid[:, None], self.shape)
            kd_e = np.broadcast_to(kd_fin[:, None], self.shape)
            lo = tn.where(valid_e, kd_e, lo)
            hi = lo if hi is lo else tn.where(valid_e, kd_e, hi)
            inf_mask = np.broadcast_to((valid & isinf)[:, None], self.shape)
        return lo, hi, inf_mask

    def __call__(self, d: tn.Tensor | None, sigma: tn.Tensor | None = None):
        """Expected-encoding coefficients (a, b), each (B, Nq, Tk, P)."""
        B, Nq, Tk, R = self.shape
        F = len(self.freqs)
        if self.strategy.point_at_infinity or d is None:
            u, v, q = self._infinity_uvq()
            dt = tn.get_dtype()
            lo = tn.Tensor(np.stack([u * self.inv_width, v * self.inv_width, q], axis=-1).astype(dt))
            hi = lo
        else:
            d_lo, d_hi, inf_mask = self.segment_depths(d, sigma)
            end_lo = self._uvq(d_lo)
            end_hi = end_lo if d_hi is d_lo else self._uvq(d_hi)
            if inf_mask.any():
                inf_vals = self._infinity_uvq()
                end_lo = tuple(tn.where(inf_mask, iv, e) for iv, e in zip(inf_vals, end_lo))
                end_hi = end_lo if d_hi is d_lo else tuple(tn.where(inf_mask, iv, e) for iv, e in zip(inf_vals, end_hi))
            scales = (self.inv_width, self.inv_width, 1.0)
            los, his = [], []
            for x0, x1, s in zip(end_lo, end_hi, scales):
                if x1 is x0:
                    lo_c = hi_c = x0
                else:
                    order = x0.data <= x1.data
                    lo_c = tn.where(order, x0, x1)
                    hi_c = tn.where(order, x1, x0)
                los.append(tn.scale(lo_c, s) if s != 1.0 else lo_c)
                his.append(tn.scale(hi_c, s) if s != 1.0 else hi_c)
            lo = tn.stack(los, axis=-1)
            hi = lo if end_hi is end_lo else tn.stack(his, axis=-1)
        a_uvq, b_uvq = _expected_rotation(lo, hi, self.freqs)
        a = tn.concat([self.xyz_a, a_uvq], axis=-2)
        b = tn.concat([self.xyz_b, b_uvq], axis=-2)
        P = R * 6 * F
        return tn.reshape(a, (B, Nq, Tk, P)), tn.reshape(b, (B, Nq, Tk, P))


def _diagonal(x: tn.Tensor, views: int, per_view: int) -> tn.Tensor:
    """(B, N, N*HW, P) -> (B, N, HW, P): each query view's own tokens."""
    B, N, T, P = x.shape
    ar = np.arange(views)
    return tn.take(tn.reshape(x, (B, N, views, per_view, P)), (slice(None), ar, ar), unique=True)


class EncodingContext:
    """Per-forward encoding state for one strategy over fixed query/key cameras.

    ``transforms(dq, sq, dk, sk)`` returns the :class:`LayerTransforms` for a
    layer given that layer's predicted depths/uncertainties (B, T) for the
    query and key tokens (ignored by strategies that do not predict depth).
    """

    def __init__(self, strategy: EncodingStrategy, qviews: ViewBatch, kviews: ViewBatch | None, head_dim: int,
                 known_depths_q=None, known_depths_k=None):
        self.strategy = strategy
        self.self_attention = kviews is None
        kviews = qviews if kviews is None else kviews
        if known_depths_k is None and self.self_attention:
            known_depths_k = known_depths_q
        self.qviews = qviews
        self.kviews = kviews
        self.head_dim = head_dim
        strategy.check_head_dim(head_dim)
        kind = strategy.kind
        dt = tn.get_dtype()
        if kind == "rayrope":
            self.key_proj = RayRopeProjector(strategy, qviews, kviews, head_dim, known_depths_k)
            self.query_proj = None if self.self_attention else RayRopeProjector(strategy, qviews, qviews, head_dim, known_depths_q)
        elif kind == "rope_on_rays":
            self.q_coef = self._world_ray_coeffs(qviews)
            self.k_coef = self.q_coef if self.self_attention else self._world_ray_coeffs(kviews)
        elif kind in ("cape", "gta", "prope"):
            self.q_mat = self._camera_mats(qviews, invert=False)
            self.k_mat = self._camera_mats(kviews, invert=True)
            if kind != "cape":
                self.q_tail = self._tail_coeffs(qviews)
                self.k_tail = self._tail_coeffs(kviews)
        self._static = None
        self._dt = dt

    # -- constant encodings -------------------------------------------------

    def _world_ray_coeffs(self, views: ViewBatch):
        s = self.strategy
        pix = views.ray_pixels(s.ray_layout)
        w = np.einsum("bnhri,bnij->bnhrj", views.camera_dirs(pix), views.R)
        w = w / np.linalg.norm(w, axis=-1, keepdims=True)
        c = np.broadcast_to(views.centers[:, :, None, None, :], w.shape)
        pos = np.concatenate([c, w], axis=-1)  # (B, N, HW, R, 6)
        B, N, HW, R, _ = pos.shape
        pos = pos.reshape(B, 1, N * HW, R * 6)
        a, b = _rotary_consts(pos, pos, self.strategy.freqs(self.head_dim))
        return a.reshape(B, 1, N * HW, -1), b.reshape(B, 1, N * HW, -1)

    def _camera_mats(self, views: ViewBatch, invert: bool):
        kind = self.strategy.kind
        B, N = views.batch, views.views
        HW = views.tokens_per_view
        mats = np.empty((B, N, 4, 4))
        for b in range(B):
            for n in range(N):
                cam = geo.Camera(views.K[b, n], views.T[b, n], views.width, views.height)
                M = camera_matrix(kind, cam)
                mats[b, n] = _checked_inverse(M) if invert else M
        return np.broadcast_to(mats[:, :, None], (B, N, HW, 4, 4)).reshape(B, 1, N * HW, 4, 4)

    def _tail_coeffs(self, views: ViewBatch):
        B, N = views.batch, views.views
        rr, cc = np.meshgrid(np.arange(views.rows), np.arange(views.cols), indexing="ij")
        uv = np.stack([cc.reshape(-1), rr.reshape(-1)], axis=-1).astype(np.float64)  # (HW, 2)
        freqs = rope_tail_freqs(self.head_dim // 2)
        a, b = _rotary_consts(uv, uv, freqs)
        a = a.reshape(len(uv), -1)
        b = b.reshape(len(uv), -1)
        a = np.broadcast_to(np.tile(a, (N, 1))[None, None], (B, 1, N * len(uv), a.shape[-1]))
        b = np.broadcast_to(np.tile(b, (N, 1))[None, None], (B, 1, N * len(uv), b.shape[-1]))
        return a, b

    def effective_depths(self, d, sigma=None):
        """Key-token depth and sigma per ray after known-depth substitution: arrays (B, T, R)."""
        R = self.strategy.rays_per_patch
        dd = np.repeat(np.asarray(d.data if isinstance(d, tn.Tensor) else d, dtype=np.float64)[..., None], R, axis=-1)
        if sigma is None or not self.strategy.use_sigma:
            ss = np.zeros_like(dd)
        else:
            ss = np.repeat(np.asarray(sigma.data if isinstance(sigma, tn.Tensor) else sigma, dtype=np.float64)[..., None], R, axis=-1)
        proj = getattr(self, "key_proj", None)
        if proj is not None and proj.known is not None:
            valid, kd = proj.known
            dd = np.where(valid, kd, dd)
            ss = np.where(valid, 0.0, ss)
        return dd, ss

    # -- per-layer transforms -----------------------------------------------

    def transforms(self, dq=None, sq=None, dk=None, sk=None) -> LayerTransforms:
        s = self.strategy
        kind = s.kind
        vo = s.encode_value_output
        if kind in ("none", "plucker_input"):
            return IDENTITY
        if kind == "rayrope":
            if self.self_attention:
                dk, sk = dq, sq
            if not s.use_sigma:
                sq = sk = None
            ka, kb = self.key_proj(dk, sk)
            qa, qb = (ka, kb) if self.self_attention else self.query_proj(dq, sq)
            HW = self.qviews.tokens_per_view
            qa, qb = _diagonal(qa, self.qviews.views, HW), _diagonal(qb, self.qviews.views, HW)
            groups = self.qviews.views
            key = RotaryTransform(ka, kb, transpose=True)
            return LayerTransforms(
                groups,
                query=RotaryTransform(qa, qb, transpose=True),
                key=key,
                value=key if vo else None,
                output=RotaryTransform(qa, qb) if vo else None,
            )
        if self._static is None:
            self._static = self._static_transforms()
        return self._static

    def _static_transforms(self) -> LayerTransforms:
        s = self.strategy
        vo = s.encode_value_output
        dt = self._dt
        if s.kind == "rope_on_rays":
            qa, qb = (x.astype(dt) for x in self.q_coef)
            ka, kb = (x.astype(dt) for x in self.k_coef)
            key = RotaryTransform(ka, kb, transpose=True)
            return LayerTransforms(
                1,
                query=RotaryTransform(qa, qb, transpose=True),
                key=key,
                value=key if vo else None,
                output=RotaryTransform(qa, qb) if vo else None,
            )
        cam_dim = self.head_dim if s.kind == "cape" else self.head_dim // 2
        # query side applies M_i^T, output side M_i, key/value side M_j^-1
        q_tail = k_tail = o_tail = None
        if s.kind != "cape":
            qa, qb = (x.astype(dt) for x in self.q_tail)
            ka, kb = (x.astype(dt) for x in self.k_tail)
            q_tail = RotaryTransform(qa, qb, transpose=True)
            o_tail = RotaryTransform(qa, qb)
            k_tail = RotaryTransform(ka, kb, transpose=True)
        Mq = self.q_mat.astype(dt)
        Mk = self.k_mat.astype(dt)
        key = MatrixTransform(Mk, cam_dim, k_tail)
        return LayerTransforms(
            1,
            query=MatrixTransform(np.swapaxes(Mq, -1, -2), cam_dim, q_tail),
            key=key,
            value=key if vo else None,
            output=MatrixTransform(Mq, cam_dim, o_tail) if vo else None,
        )
