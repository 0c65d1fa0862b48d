"""Attention similarity between two patches as camera placement or predicted depth varies.

With query and key features fixed to all-ones vectors, the similarity is
``1^T E_q E_k 1`` for the encodings of the two centre patches. Three
settings are provided:

a) the second camera translated along x by ``dx``;
b) the second camera rotated about y by ``dtheta`` degrees;
c) both centre rays see the point (0, 0, 1) at depth 1; the first depth is
   fixed at 1 and the second swept, for several uncertainty levels.
"""

from __future__ import annotations

import math

import numpy as np

from . import geometry as geo
from . import posenc
from . import rope
from .posenc import EncodingStrategy

SETTINGS = ("a", "b", "c")
IMAGE = 36
PATCH = 4
FOV = 60.0


def _camera(R=None, center=None) -> geo.Camera:
    f = 0.5 * IMAGE / math.tan(math.radians(FOV) / 2)
    R = np.eye(3) if R is None else np.asarray(R, dtype=np.float64)
    c = np.zeros(3) if center is None else np.asarray(center, dtype=np.float64)
    return geo.Camera.from_params(f, f, IMAGE / 2, IMAGE / 2, R, -R @ c, IMAGE, IMAGE)


def _segments(cam: geo.Camera, strategy: EncodingStrategy, d: float, sigma: float):
    row = col = IMAGE // PATCH // 2
    dirs, _ = geo.patch_rays(cam, row, col, PATCH, strategy.ray_layout)
    if strategy.point_at_infinity:
        return [geo.segment_at_infinity(cam, r) for r in dirs]
    s = sigma if strategy.use_sigma else 0.0
    return [geo.make_segment(cam, r, d, s) for r in dirs]


def _world_ray_encoding(cam: geo.Camera, strategy: EncodingStrategy, head_dim: int) -> rope.BlockEncoding:
    row = col = IMAGE // PATCH // 2
    dirs, c = geo.patch_rays(cam, row, col, PATCH, strategy.ray_layout)
    pos = np.concatenate([np.concatenate([c, r]) for r in dirs])
    return rope.encoding_from_intervals(pos, pos, strategy.freqs(head_dim), head_dim)


def pair_similarity(strategy: EncodingStrategy, cam1: geo.Camera, cam2: geo.Camera, head_dim: int,
                    d1: float = 1.0, d2: float = 1.0, sigma1: float = 0.0, sigma2: float = 0.0) -> float:
    """``1^T E_q E_k 1`` between the centre patches of ``cam1`` (query) and ``cam2`` (key)."""
    kind = strategy.kind
    center = (IMAGE // PATCH // 2,) * 2
    if kind == "rayrope":
        freqs = strategy.freqs(head_dim)
        e1 = posenc.reference_token_encoding(cam1, _segments(cam1, strategy, d1, sigma1), freqs, head_dim)
        e2 = posenc.reference_token_encoding(cam1, _segments(cam2, strategy, d2, sigma2), freqs, head_dim)
        return float(2.0 * np.sum(rope.relative_product(e1, e2).a))
    if kind == "rope_on_rays":
        e1 = _world_ray_encoding(cam1, strategy, head_dim)
        e2 = _world_ray_encoding(cam2, strategy, head_dim)
        return float(2.0 * np.sum(rope.relative_product(e1, e2).a))
    if kind in ("cape", "gta", "prope"):
        Eq, Ek = posenc.baseline_encoding(kind, cam1, cam2, center, center, head_dim)
        ones = np.ones(head_dim)
        return float(ones @ Eq @ Ek @ ones)
    if kind in ("none", "plucker_input"):
        return float(head_dim)
    raise ValueError(f"no pairwise similarity for encoding kind {kind!r}")


def sweep(setting: str, strategy: EncodingStrategy, head_dim: int = 72, points: int = 57, sigmas=(0.0, 0.2, 0.5)):
    """Rows of (sigma, parameter, similarity) for one setting."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown similarity setting {setting!r}; expected one of {SETTINGS}")
    cam1 = _camera()
    rows = []
    if setting == "a":
        grid = np.linspace(0.0, 2.0, points)
        for s in sigmas:
            for dx in grid:
                rows.append((s, dx, pair_similarity(strategy, cam1, _camera(center=[dx, 0, 0]), head_dim, 1.0, 1.0, s, s)))
    elif setting == "b":
        grid = np.linspace(0.0, 90.0, points)
        for s in sigmas:
            for th in grid:
                R = geo.rotation_from_axis_angle([0, 1, 0], math.radians(th))
                rows.append((s, th, pair_similarity(strategy, cam1, _camera(R=R), head_dim, 1.0, 1.0, s, s)))
    else:
        grid = np.linspace(0.2, 3.0, points)
        cam2 = geo.Camera.look_at([math.sin(math.radians(60)), 0.0, 1.0 - math.cos(math.radians(60))],
                                  [0.0, 0.0, 1.0], FOV, IMAGE, IMAGE)
        for s in sigmas:
            for d2 in grid:
                rows.append((s, d2, pair_similarity(strategy, cam1, cam2, head_dim, 1.0, d2, s, s)))
    return rows


def smooth(y, window: int) -> np.ndarray:
    """Centered moving average; the ends use the available neighbours."""
    y = np.asarray(y, dtype=np.float64)
    h = window // 2
    out = np.empty_like(y)
    for i in range(len(y)):
        out[i] = y[max(0, i - h) : i + h + 1].mean()
    return out


def oscillation_amplitude(y, window: int = 7) -> float:
    """Largest deviation of the curve from its moving average, away from the ends."""
    y = np.asarray(y, dtype=np.float64)
    h = window // 2
    dev = np.abs(y - smooth(y, window))
    return float(dev[h : len(y) - h].max())
