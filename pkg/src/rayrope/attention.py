"""Multi-view attention layers and a small decoder-only view-synthesis model.

Tokens are laid out view-major: token ``n * HW + t`` is patch ``t`` of view
``n``. Attention is computed grouped by query view: each group's queries see
every key transformed into that group's camera frame, so the whole layer is
a handful of batched matmuls with no per-view Python loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import rope
from . import tensor as tn
from .posenc import EncodingContext, EncodingStrategy, LayerTransforms, ViewBatch, ablation_config  # noqa: F401

log = logging.getLogger(__name__)

SIGMA_INIT = 0.5


# ---------------------------------------------------------------------------
# reference attention on plain arrays
# ---------------------------------------------------------------------------


def _softmax(x, axis=-1):
    x = x - x.max(axis=axis, keepdims=True)
    e = np.exp(x)
    return e / e.sum(axis=axis, keepdims=True)


def attention(q, keys, values) -> np.ndarray:
    """Scaled dot-product attention of one query token.

    ``q`` (H, Dh); ``keys``/``values`` (M, H, Dh). Returns (H, Dh).
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if keys.ndim != 3 or keys.shape[0] == 0:
        raise ValueError("attention needs at least one key")
    if keys.shape != values.shape or keys.shape[1:] != q.shape:
        raise ValueError(f"shape mismatch: q {q.shape}, keys {keys.shape}, values {values.shape}")
    scores = np.einsum("hd,mhd->hm", q, keys) / math.sqrt(q.shape[-1])
    return np.einsum("hm,mhd->hd", _softmax(scores), values)


def encoded_attention_single_query(q, enc_q: rope.BlockEncoding, keys, values, enc_keys: rope.BlockEncoding,
                                   encode_value_output: bool = True) -> np.ndarray:
    """Attention of one query with block encodings on q, k, v and the output.

    ``enc_q`` holds the query token's blocks (D/2,), ``enc_keys`` the key
    tokens' blocks (M, D/2), all expressed in the query's camera frame. The
    query and keys take the transposed blocks; the output takes ``enc_q``.
    """
    if not enc_q.same_layout(enc_keys):
        raise ValueError("query and key encodings have different layouts")
    q = rope.apply_encoding(enc_q, q, rope.QUERY)
    keys = np.asarray(keys, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if enc_keys.a.shape[0] != keys.shape[0]:
        raise ValueError(f"{enc_keys.a.shape[0]} key encodings for {keys.shape[0]} keys")
    ek = rope.BlockEncoding(enc_keys.a[:, None], enc_keys.b[:, None], enc_keys.components, enc_keys.freqs)
    k = rope.apply_encoding(ek, keys, rope.KEY_VALUE)
    v = rope.apply_encoding(ek, values, rope.KEY_VALUE) if encode_value_output else values
    out = attention(q, k, v)
    return rope.apply_encoding(enc_q, out, rope.OUTPUT) if encode_value_output else out


def matrix_attention_single_query(q, E_q, keys, values, E_keys, encode_value_output: bool = True) -> np.ndarray:
    """Same as :func:`encoded_attention_single_query` with dense per-token matrices.

    Query uses ``E_q^T q``, keys and values ``E_k k``, output ``E_q o``.
    """
    q = np.einsum("ji,hj->hi", E_q, np.asarray(q, dtype=np.float64))
    k = np.einsum("mij,mhj->mhi", E_keys, keys)
    v = np.einsum("mij,mhj->mhi", E_keys, values) if encode_value_output else np.asarray(values, dtype=np.float64)
    out = attention(q, k, v)
    return np.einsum("ij,hj->hi", E_q, out) if encode_value_output else out


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


def _param(rng, shape, std=0.02, name=None) -> tn.Tensor:
    return tn.Tensor(rng.normal(0.0, std, size=shape), requires_grad=True, name=name)


def _const(value, shape, name=None) -> tn.Tensor:
    return tn.Tensor(np.full(shape, value), requires_grad=True, name=name)


def linear(x: tn.Tensor, W: tn.Tensor, b: tn.Tensor | None = None) -> tn.Tensor:
    """``x @ W + b`` over the last axis for any leading shape."""
    lead = x.shape[:-1]
    y = tn.matmul(tn.reshape(x, (-1, x.shape[-1])), W)
    if b is not None:
        y = tn.add(y, tn.broadcast_to(tn.reshape(b, (1, -1)), y.shape))
    return tn.reshape(y, lead + (W.shape[-1],))


def layer_norm(x: tn.Tensor, gamma: tn.Tensor, beta: tn.Tensor) -> tn.Tensor:
    lead = x.shape[:-1]
    y = tn.layer_norm(tn.reshape(x, (-1, x.shape[-1])), gamma, beta)
    return tn.reshape(y, lead + (x.shape[-1],))


def _split_heads(x: tn.Tensor, heads: int, groups: int) -> tn.Tensor:
    """(B, T, D) -> (B, G, H, T/G, Dh)."""
    B, T, D = x.shape
    x = tn.reshape(x, (B, groups, T // groups, heads, D // heads))
    return tn.transpose(x, (0, 1, 3, 2, 4))


def _merge_heads(x: tn.Tensor) -> tn.Tensor:
    B, G, H, Tg, Dh = x.shape
    return tn.reshape(tn.transpose(x, (0, 1, 3, 2, 4)), (B, G * Tg, H * Dh))


def grouped_attention(q: tn.Tensor, k: tn.Tensor, v: tn.Tensor, heads: int, transforms: LayerTransforms) -> tn.Tensor:
    """Encoded attention with queries grouped by view.

    ``q`` (B, Tq, D) and ``k``/``v`` (B, Tk, D) are projected features. Keys and
    values are shared by all groups before their group-specific transform.
    """
    G = transforms.groups
    if q.shape[1] % G:
        raise ValueError(f"{q.shape[1]} query tokens do not split into {G} view groups")
    Q = _split_heads(q, heads, G)
    K = _split_heads(k, heads, 1)
    V = _split_heads(v, heads, 1)
    if G > 1:
        K = tn.broadcast_to(K, (K.shape[0], G) + K.shape[2:])
        V = tn.broadcast_to(V, (V.shape[0], G) + V.shape[2:])
    if transforms.query is not None:
        Q = transforms.query(Q)
    if transforms.key is not None:
        K = transforms.key(K)
    if transforms.value is not None:
        V = transforms.value(V)
    Dh = Q.shape[-1]
    scores = tn.scale(tn.matmul(Q, tn.swap_last(K)), 1.0 / math.sqrt(Dh))
    out = tn.matmul(tn.softmax(scores), V)
    if transforms.output is not None:
        out = transforms.output(out)
    return _merge_heads(out)


class AttentionLayer:
    """Multi-head attention with per-layer depth and uncertainty heads.

    Depth heads exist only when the strategy consumes predicted depth; the
    uncertainty head is dropped when sigma is disabled.
    """

    def __init__(self, dim: int, heads: int, strategy: EncodingStrategy, rng: np.random.Generator):
        if dim % heads:
            raise ValueError(f"model dim {dim} not divisible by {heads} heads")
        strategy.check_head_dim(dim // heads)
        self.dim = dim
        self.heads = heads
        self.strategy = strategy
        self.params: dict[str, tn.Tensor] = {}
        for n in ("q", "k", "v", "o"):
            self.params[f"W_{n}"] = _param(rng, (dim, dim))
            self.params[f"b_{n}"] = _const(0.0, (dim,))
        if strategy.predicts_depth:
            self.params["W_d"] = _param(rng, (dim, 1))
            self.params["b_d"] = _const(0.0, (1,))
        if strategy.predicts_sigma:
            self.params["W_sigma"] = _param(rng, (dim, 1))
            self.params["b_sigma"] = _const(math.log(SIGMA_INIT), (1,))

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads

    def depth_heads(self, x: tn.Tensor):
        """Per-token (depth, sigma) tensors (B, T); None where the head is absent."""
        p = self.params
        d = s = None
        if "W_d" in p:
            d = tn.exp(tn.reshape(linear(x, p["W_d"], p["b_d"]), x.shape[:-1]))
        if "W_sigma" in p:
            s = tn.exp(tn.reshape(linear(x, p["W_sigma"], p["b_sigma"]), x.shape[:-1]))
        return d, s

    def __call__(self, x: tn.Tensor, ctx: EncodingContext | None, x_kv: tn.Tensor | None = None, record=None):
        """Self-attention over ``x`` or cross-attention from ``x`` to ``x_kv``."""
        p = self.params
        kv = x if x_kv is None else x_kv
        dq, sq = self.depth_heads(x)
        dk, sk = (dq, sq) if x_kv is None else self.depth_heads(kv)
        transforms = ctx.transforms(dq, sq, dk, sk) if ctx is not None else LayerTransforms(1)
        if record is not None:
            record.append((dq, sq))
        q = linear(x, p["W_q"], p["b_q"])
        k = linear(kv, p["W_k"], p["b_k"])
        v = linear(kv, p["W_v"], p["b_v"])
        out = grouped_attention(q, k, v, self.heads, transforms)
        return linear(out, p["W_o"], p["b_o"])


def _check_tokens(x: tn.Tensor, views: ViewBatch, what: str) -> None:
    expect = views.views * views.tokens_per_view
    if x.shape[0] != views.batch or x.shape[1] != expect:
        raise ValueError(
            f"{what}: {x.shape[1]} tokens for {views.views} cameras x {views.tokens_per_view} patches "
            f"(batch {x.shape[0]} vs {views.batch})"
        )


def multiview_self_attention(layer: AttentionLayer, x: tn.Tensor, views: ViewBatch, known_depths=None) -> tn.Tensor:
    """Self-attention over all tokens of all views. ``x`` (B, N*HW, D)."""
    _check_tokens(x, views, "self-attention")
    ctx = EncodingContext(layer.strategy, views, None, layer.head_dim, known_depths)
    return layer(x, ctx)


def multiview_cross_attention(layer: AttentionLayer, x_q: tn.Tensor, qviews: ViewBatch, x_kv: tn.Tensor,
                              kviews: ViewBatch, known_depths_q=None, known_depths_k=None) -> tn.Tensor:
    """Queries from view set A attend to keys/values from view set B."""
    _check_tokens(x_q, qviews, "cross-attention queries")
    _check_tokens(x_kv, kviews, "cross-attention keys")
    ctx = EncodingContext(layer.strategy, qviews, kviews, layer.head_dim, known_depths_q, known_depths_k)
    return layer(x_q, ctx, x_kv)


# ---------------------------------------------------------------------------
# toy model
# ---------------------------------------------------------------------------


@dataclass
class ModelConfig:
    dim: int = 144
    heads: int = 2
    layers: int = 4
    ff: int = 256
    image: int = 32
    patch: int = 4
    views: int = 3
    zero_head: bool = True

    def __post_init__(self):
        if self.image % self.patch:
            raise ValueError(f"image size {self.image} not divisible by patch {self.patch}")
        if self.views < 2:
            raise ValueError("need at least one reference view and one target view")

    @property
    def patch_pixels(self) -> int:
        return self.patch * self.patch * 3

    @property
    def tokens_per_view(self) -> int:
        return (self.image // self.patch) ** 2


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(..., H, W, C) -> (..., HW/p^2, p*p*C), patches row-major."""
    *lead, H, W, C = images.shape
    x = images.reshape(*lead, H // p, p, W // p, p, C)
    n = len(lead)
    x = x.transpose(*range(n), n, n + 2, n + 1, n + 3, n + 4)
    return x.reshape(*lead, (H // p) * (W // p), p * p * C)


def unpatchify(x: tn.Tensor, rows: int, cols: int, p: int, channels: int = 3) -> tn.Tensor:
    """(B, rows*cols, p*p*C) -> (B, rows*p, cols*p, C)."""
    B = x.shape[0]
    y = tn.reshape(x, (B, rows, cols, p, p, channels))
    y = tn.transpose(y, (0, 1, 3, 2, 4, 5))
    return tn.reshape(y, (B, rows * p, cols * p, channels))


def inverse_depth(depth: np.ndarray) -> np.ndarray:
    """1/depth with 0 for background (+inf) and invalid (<= 0, NaN) pixels."""
    depth = np.asarray(depth, dtype=np.float64)
    ok = np.isfinite(depth) & (depth > 0)
    return np.where(ok, 1.0 / np.where(ok, depth, 1.0), 0.0)


class ToyModel:
    """Decoder-only view synthesis: reference views (RGB + raymap) and one target raymap.

    Pre-norm transformer blocks with self-attention over every token; the
    target tokens are decoded to RGB patches through a sigmoid.
    """

    def __init__(self, config: ModelConfig, strategy: EncodingStrategy, seed: int = 0):
        self.config = config
        self.strategy = strategy
        self.dtype = tn.get_dtype()
        rng = np.random.default_rng(seed)
        D = config.dim
        self.known_depth = strategy.known_depth_mode
        ref_in = config.patch_pixels + 6 + (config.patch**2 if self.known_depth else 0)
        self.embed = {
            "ref.W": _param(rng, (ref_in, D)),
            "ref.b": _const(0.0, (D,)),
            "tgt.W": _param(rng, (6, D)),
            "tgt.b": _const(0.0, (D,)),
        }
        self.blocks = []
        for _ in range(config.layers):
            blk = {
                "ln1.g": _const(1.0, (D,)),
                "ln1.b": _const(0.0, (D,)),
                "ln2.g": _const(1.0, (D,)),
                "ln2.b": _const(0.0, (D,)),
                "ff.W1": _param(rng, (D, config.ff)),
                "ff.b1": _const(0.0, (config.ff,)),
                "ff.W2": _param(rng, (config.ff, D)),
                "ff.b2": _const(0.0, (D,)),
            }
            self.blocks.append((AttentionLayer(D, config.heads, strategy, rng), blk))
        head_W = np.zeros((D, config.patch_pixels)) if config.zero_head else rng.normal(0.0, 0.02, (D, config.patch_pixels))
        self.head = {
            "ln.g": _const(1.0, (D,)),
            "ln.b": _const(0.0, (D,)),
            "W": tn.Tensor(head_W, requires_grad=True),
            "b": _const(0.0, (config.patch_pixels,)),
        }

    def parameters(self) -> dict[str, tn.Tensor]:
        out = {f"embed.{k}": v for k, v in self.embed.items()}
        for i, (attn, blk) in enumerate(self.blocks):
            out.update({f"layers.{i}.attn.{k}": v for k, v in attn.params.items()})
            out.update({f"layers.{i}.{k}": v for k, v in blk.items()})
        out.update({f"head.{k}": v for k, v in self.head.items()})
        return out

    def config_dict(self) -> dict:
        return {"model": asdict(self.config), "encoding": {"kind": self.strategy.kind, **self.strategy.flags(),
                                                           "omega_min": self.strategy.omega_min,
                                                           "omega_max": self.strategy.omega_max}}

    def _tokens(self, images, views: ViewBatch, known_depths):
        cfg = self.config
        B, Nr = images.shape[:2]
        raymaps = views.raymaps(self.strategy.input_raymap)  # (B, N, HW, 6)
        feats = [patchify(np.asarray(images, dtype=np.float64), cfg.patch), raymaps[:, :Nr]]
        if self.known_depth:
            if known_depths is None:
                raise ValueError("known-depth model needs reference depth maps")
            inv = inverse_depth(known_depths)[..., None]
            feats.append(patchify(inv, cfg.patch))
        ref = np.concatenate(feats, axis=-1).reshape(B, Nr * cfg.tokens_per_view, -1)
        tgt = raymaps[:, Nr:].reshape(B, -1, 6)
        e = self.embed
        ref_tok = linear(tn.Tensor(ref), e["ref.W"], e["ref.b"])
        tgt_tok = linear(tn.Tensor(tgt), e["tgt.W"], e["tgt.b"])
        return tn.concat([ref_tok, tgt_tok], axis=1)

    def forward(self, images, views: ViewBatch, known_depths=None, record=None) -> tn.Tensor:
        """Predict the target view.

        ``images`` (B, N-1, H, W, 3) reference RGB in [0, 1]; ``views`` holds all
        N cameras with the target last; ``known_depths`` (B, N-1, H, W) reference
        depth maps, used in known-depth mode. Returns (B, H, W, 3).
        """
        with tn.using_dtype(self.dtype):
            return self._forward(images, views, known_depths, record)

    def _forward(self, images, views: ViewBatch, known_depths, record) -> tn.Tensor:
        cfg = self.config
        images = np.asarray(images)
        B, Nr = images.shape[:2]
        if views.views != Nr + 1 or views.batch != B:
            raise ValueError(f"{views.views} cameras for {Nr} reference views plus one target (batch {views.batch} vs {B})")
        if views.patch_size != cfg.patch or views.width != cfg.image or views.height != cfg.image:
            raise ValueError("camera grid does not match the model's image/patch size")
        x = self._tokens(images, views, known_depths)
        kd = None
        if self.known_depth and known_depths is not None and self.strategy.kind == "rayrope":
            kd = np.concatenate([np.asarray(known_depths, dtype=np.float64),
                                 np.full((B, 1, cfg.image, cfg.image), np.nan)], axis=1)
        ctx = EncodingContext(self.strategy, views, None, cfg.dim // cfg.heads, kd)
        for i, (attn, blk) in enumerate(self.blocks):
            h = layer_norm(x, blk["ln1.g"], blk["ln1.b"])
            x = tn.add(x, attn(h, ctx, record=record))
            h = layer_norm(x, blk["ln2.g"], blk["ln2.b"])
            h = linear(tn.relu(linear(h, blk["ff.W1"], blk["ff.b1"])), blk["ff.W2"], blk["ff.b2"])
            x = tn.add(x, h)
            if not np.isfinite(x.data).all():
                raise FloatingPointError(f"non-finite activations after layer {i}")
        HW = cfg.tokens_per_view
        tgt = tn.take(x, (slice(None), slice(Nr * HW, None)))
        hd = self.head
        y = tn.sigmoid(linear(layer_norm(tgt, hd["ln.g"], hd["ln.b"]), hd["W"], hd["b"]))
        side = cfg.image // cfg.patch
        self.last_context = ctx
        return unpatchify(y, side, side, cfg.patch)

    def loss(self, images, views: ViewBatch, target, known_depths=None) -> tn.Tensor:
        pred = self.forward(images, views, known_depths)
        with tn.using_dtype(self.dtype):
            return tn.mse_loss(pred, np.asarray(target, dtype=self.dtype))


def toy_forward(model: ToyModel, ref_images, cameras, known_depths=None) -> np.ndarray:
    """Predict a single target image from reference images and cameras (target camera last)."""
    views = ViewBatch.from_cameras([list(cameras)], model.config.patch)
    kd = None if known_depths is None else np.asarray(known_depths)[None]
    return model.forward(np.asarray(ref_images)[None], views, kd).data[0]


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

MANIFEST = "manifest.txt"
BLOB = "weights.bin"


def save_checkpoint(params: dict, path, config_hash: str = "") -> None:
    """Write ``manifest.txt`` (name, shape, byte offset) and one float32 little-endian blob."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"# config_hash {config_hash}"]
    offset = 0
    chunks = []
    for name, p in params.items():
        arr = np.ascontiguousarray(p.data if isinstance(p, tn.Tensor) else p, dtype="<f4")
        shape = "x".join(str(s) for s in arr.shape) or "scalar"
        lines.append(f"{name} {shape} {offset}")
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")


def read_checkpoint(path) -> tuple[dict, str]:
    """Return ({name: float32 array}, config hash)."""
    path = Path(path)
    blob = (path / BLOB).read_bytes()
    out = {}
    config_hash = ""
    for line in (path / MANIFEST).read_text().splitlines():
        if line.startswith("# config_hash"):
            config_hash = line.split(maxsplit=2)[2] if len(line.split()) > 2 else ""
            continue
        if not line.strip():
            continue
        name, shape, offset = line.split()
        shape = () if shape == "scalar" else tuple(int(s) for s in shape.split("x"))
        n = int(np.prod(shape)) if shape else 1
        out[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=int(offset)).reshape(shape).copy()
    return out, config_hash


def load_into(params: dict, arrays: dict) -> None:
    """Copy checkpoint arrays into model parameters, checking names and shapes."""
    missing = set(params) - set(arrays)
    extra = set(arrays) - set(params)
    if missing or extra:
        raise ValueError(f"checkpoint mismatch: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
    for name, p in params.items():
        if arrays[name].shape != p.shape:
            raise ValueError(f"checkpoint shape mismatch for {name}: {arrays[name].shape} vs {p.shape}")
        p.data = arrays[name].astype(p.data.dtype)
