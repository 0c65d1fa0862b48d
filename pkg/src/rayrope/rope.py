"""Rotary blocks, their expectation over uniform intervals, and block-diagonal encodings.

A block ``(a, b)`` stands for the 2x2 matrix ``[[a, -b], [b, a]]``. Pure
rotations have ``a^2 + b^2 = 1``; expected blocks are rotations scaled by
``2|sin(w L / 2)| / (w L)`` for an interval of length ``L``.

Slot layout inside a head: slot ``c * F + f`` holds component ``c`` at
frequency ``f`` (component-major), occupying features ``2 slot`` and
``2 slot + 1``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

WIDTH_EPS = 1e-8
OMEGA_MIN = 0.05
OMEGA_MAX = 50.0

QUERY = "query"
KEY_VALUE = "key_value"
OUTPUT = "output"


class Block2(NamedTuple):
    a: float
    b: float

    def matrix(self) -> np.ndarray:
        return np.array([[self.a, -self.b], [self.b, self.a]])

    @property
    def magnitude(self) -> float:
        return float(np.hypot(self.a, self.b))

    def __matmul__(self, other: "Block2") -> "Block2":
        return Block2(self.a * other.a - self.b * other.b, self.a * other.b + self.b * other.a)

    def transpose(self) -> "Block2":
        return Block2(self.a, -self.b)


def rope_block(omega: float, x: float) -> Block2:
    return Block2(float(np.cos(omega * x)), float(np.sin(omega * x)))


def expected_block(omega: float, x_min: float, x_max: float, width_eps: float = WIDTH_EPS) -> Block2:
    """Mean of ``rope_block(omega, x)`` for x uniform on [x_min, x_max]."""
    if x_min > x_max:
        raise ValueError(f"empty interval: x_min={x_min} > x_max={x_max}")
    width = x_max - x_min
    wd = omega * width
    if abs(wd) <= width_eps:
        return rope_block(omega, 0.5 * (x_min + x_max))
    return Block2(
        float((np.sin(omega * x_max) - np.sin(omega * x_min)) / wd),
        float((np.cos(omega * x_min) - np.cos(omega * x_max)) / wd),
    )


def expected_coeffs(omega, lo, hi, width_eps: float = WIDTH_EPS):
    """Vectorized expected blocks in the midpoint form ``rope(mid) * sinc``.

    Algebraically identical to :func:`expected_block` but free of the
    cancellation in ``sin(w hi) - sin(w lo)`` for narrow intervals.
    """
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    if np.any(lo > hi):
        raise ValueError("empty interval: lo > hi")
    half = 0.5 * omega * (hi - lo)
    mid = 0.5 * omega * (lo + hi)
    wide = 2.0 * np.abs(half) > width_eps
    safe = np.where(wide, half, 1.0)
    mag = np.where(wide, np.sin(safe) / safe, 1.0)
    return np.cos(mid) * mag, np.sin(mid) * mag


def frequency_schedule(count: int, omega_min: float = OMEGA_MIN, omega_max: float = OMEGA_MAX, single: bool = False) -> np.ndarray:
    """Log-spaced frequencies from ``omega_max`` down to ``omega_min``.

    A single frequency (``count == 1`` or ``single=True``) sits at the
    geometric mean of the range.
    """
    if count < 1:
        raise ValueError(f"need at least one frequency, got {count}")
    if single or count == 1:
        return np.full(count, np.sqrt(omega_min * omega_max))
    f = np.arange(count)
    return omega_max * (omega_min / omega_max) ** (f / (count - 1))


@dataclass(frozen=True)
class BlockEncoding:
    """Block-diagonal encoding for one (or a batch of) head-dimension feature vectors.

    ``a``/``b`` have shape (..., D/2). ``components`` and ``freqs`` describe the
    component-major layout.
    """

    a: np.ndarray
    b: np.ndarray
    components: int
    freqs: int

    def __post_init__(self):
        if self.a.shape != self.b.shape:
            raise ValueError("a and b must share a shape")
        if self.a.shape[-1] != self.components * self.freqs:
            raise ValueError(f"block count {self.a.shape[-1]} != components x freqs = {self.components * self.freqs}")

    @property
    def dim(self) -> int:
        return 2 * self.a.shape[-1]

    @property
    def magnitude(self) -> np.ndarray:
        return np.hypot(self.a, self.b)

    def blocks(self) -> list:
        return [Block2(float(a), float(b)) for a, b in zip(self.a.reshape(-1), self.b.reshape(-1))]

    def conj(self) -> "BlockEncoding":
        return BlockEncoding(self.a, -self.b, self.components, self.freqs)

    def dense(self) -> np.ndarray:
        """Materialize the D x D matrix (single encoding only; for tests and oracles)."""
        if self.a.ndim != 1:
            raise ValueError("dense() needs an unbatched encoding")
        M = np.zeros((self.dim, self.dim))
        for s, (a, b) in enumerate(zip(self.a, self.b)):
            M[2 * s : 2 * s + 2, 2 * s : 2 * s + 2] = [[a, -b], [b, a]]
        return M

    def same_layout(self, other: "BlockEncoding") -> bool:
        return (self.components, self.freqs, self.a.shape[-1]) == (other.components, other.freqs, other.a.shape[-1])


def identity_encoding(dim: int, components: int = 1) -> BlockEncoding:
    n = dim // 2
    return BlockEncoding(np.ones(n), np.zeros(n), components, n // components)


def _check_layout(dim: int, components: int) -> int:
    if dim % (2 * components):
        raise ValueError(
            f"feature dim {dim} must be divisible by 2 x components = {2 * components}"
        )
    return dim // (2 * components)


def encoding_from_intervals(lo, hi, freqs, dim: int, component_scale=None) -> BlockEncoding:
    """Expected encoding from per-component bounds (..., C) and a frequency schedule."""
    lo = np.asarray(lo, dtype=np.float64)
    hi = np.asarray(hi, dtype=np.float64)
    C = lo.shape[-1]
    F = _check_layout(dim, C)
    freqs = np.asarray(freqs, dtype=np.float64)
    if freqs.shape != (F,):
        raise ValueError(f"need {F} frequencies for dim {dim} with {C} components, got {freqs.shape[0]}")
    if component_scale is not None:
        s = np.asarray(component_scale, dtype=np.float64)
        lo, hi = lo * s, hi * s
    w = freqs[None, :]
    a, b = expected_coeffs(w, lo[..., :, None], hi[..., :, None])
    return BlockEncoding(a.reshape(lo.shape[:-1] + (C * F,)), b.reshape(lo.shape[:-1] + (C * F,)), C, F)


def build_encoding(intervals: Sequence, rays_per_patch: int, freqs, dim: int, component_scale=None) -> BlockEncoding:
    """Expected encoding for one token from its per-ray projected intervals.

    ``component_scale`` (length 6) multiplies each (x, y, z, u, v, q) component
    before the frequencies are applied.
    """
    if len(intervals) != rays_per_patch:
        raise ValueError(f"expected {rays_per_patch} intervals, got {len(intervals)}")
    C = 6 * rays_per_patch
    if dim % (2 * C):
        raise ValueError(f"feature dim {dim} must be divisible by 2 x 6 x rays_per_patch = {2 * C}")
    lo = np.concatenate([iv.lo for iv in intervals])
    hi = np.concatenate([iv.hi for iv in intervals])
    if component_scale is not None:
        component_scale = np.tile(np.asarray(component_scale, dtype=np.float64), rays_per_patch)
    return encoding_from_intervals(lo, hi, freqs, dim, component_scale)


def apply_encoding(enc: BlockEncoding, vec, mode: str) -> np.ndarray:
    """Apply an encoding to feature vector(s) of length D.

    ``query`` and ``key_value`` apply the blockwise transpose (the key side
    transpose equals the expectation at the negated position); ``output``
    applies the encoding itself.
    """
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape[-1] != enc.dim:
        raise ValueError(f"vector length {vec.shape[-1]} does not match encoding dim {enc.dim}")
    if mode in (QUERY, KEY_VALUE):
        a, b = enc.a, -enc.b
    elif mode == OUTPUT:
        a, b = enc.a, enc.b
    else:
        raise ValueError(f"unknown mode {mode!r}")
    x = vec.reshape(vec.shape[:-1] + (-1, 2))
    out = np.empty(np.broadcast_shapes(x.shape, a.shape + (2,)))
    out[..., 0] = a * x[..., 0] - b * x[..., 1]
    out[..., 1] = b * x[..., 0] + a * x[..., 1]
    return out.reshape(out.shape[:-2] + (-1,))


def relative_product(enc_i: BlockEncoding, enc_j: BlockEncoding) -> BlockEncoding:
    """Blockwise ``E_i * conj(E_j)``: the expected encoding of the position difference."""
    if not enc_i.same_layout(enc_j):
        raise ValueError("encodings have different layouts")
    a = enc_i.a * enc_j.a + enc_i.b * enc_j.b
    b = enc_i.b * enc_j.a - enc_i.a * enc_j.b
    return BlockEncoding(a, b, enc_i.components, enc_i.freqs)
