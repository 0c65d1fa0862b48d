"""Slow per-token reference implementations used as oracles by the tests."""

import numpy as np

from rayrope import attention as att
from rayrope import geometry as geo
from rayrope import posenc
from rayrope import rope


def _np(t):
    return None if t is None else np.asarray(t.data, dtype=np.float64)


def _segments(strategy, cams, patch, d, s, known):
    if not strategy.predicts_depth:
        d = np.ones((len(cams), d.shape[-1] if d is not None else 1))
    return posenc.rayrope_positions(cams, patch, d, s if strategy.predicts_sigma else None, strategy, known)


def _token_encodings(strategy, query_cam, cams, segs, head_dim, patch):
    """Per-token encodings of every token of ``cams`` as seen from ``query_cam`` (rotary kinds)."""
    out_a, out_b = [], []
    for n, cam in enumerate(cams):
        rows, cols = cam.height // patch, cam.width // patch
        for t in range(rows * cols):
            if strategy.kind == "rayrope":
                enc = posenc.reference_token_encoding(query_cam, segs[n][t], strategy.freqs(head_dim), head_dim)
            else:
                dirs, c = geo.patch_rays(cam, t // cols, t % cols, patch, strategy.ray_layout)
                pos = np.concatenate([np.concatenate([c, r]) for r in dirs])
                enc = rope.encoding_from_intervals(pos, pos, strategy.freqs(head_dim), head_dim)
            out_a.append(enc.a)
            out_b.append(enc.b)
    return np.array(out_a), np.array(out_b), enc.components, enc.freqs


def loop_attention(layer, x, views, known_depths=None, x_kv=None, kviews=None):
    """Encoded attention one query token at a time, from plain numpy pieces.

    Mirrors a layer call: ``x`` (B, Tq, D) tensor; returns (B, Tq, D) array.
    """
    p = {k: np.asarray(v.data, dtype=np.float64) for k, v in layer.params.items()}
    s = layer.strategy
    H, Dh = layer.heads, layer.head_dim
    xq = _np(x)
    xk = xq if x_kv is None else _np(x_kv)
    kviews = views if kviews is None else kviews
    B = xq.shape[0]
    patch = views.patch_size

    def heads_of(z):
        dd = ss = None
        if "W_d" in p:
            dd = np.exp(z @ p["W_d"] + p["b_d"])[..., 0]
        if "W_sigma" in p:
            ss = np.exp(z @ p["W_sigma"] + p["b_sigma"])[..., 0]
        return dd, ss

    out = np.zeros_like(xq)
    for b in range(B):
        qcams = views.cameras(b)
        kcams = kviews.cameras(b)
        HWq = views.tokens_per_view
        HWk = kviews.tokens_per_view
        dq, sq = heads_of(xq[b])
        dk, sk = heads_of(xk[b])
        kd_q = kd_k = None
        if known_depths is not None and s.known_depth_mode:
            kd_k = [None if np.all(np.isnan(m)) else m for m in known_depths[b]]
            kd_q = kd_k if x_kv is None else None
        segs_k = segs_q = None
        if s.kind == "rayrope":
            shape_q = (len(qcams), HWq)
            shape_k = (len(kcams), HWk)
            segs_k = _segments(s, kcams, patch, None if dk is None else dk.reshape(shape_k),
                               None if sk is None else sk.reshape(shape_k), kd_k)
            segs_q = segs_k if x_kv is None else _segments(
                s, qcams, patch, None if dq is None else dq.reshape(shape_q), None if sq is None else sq.reshape(shape_q), kd_q)
        q = (xq[b] @ p["W_q"] + p["b_q"]).reshape(-1, H, Dh)
        k = (xk[b] @ p["W_k"] + p["b_k"]).reshape(-1, H, Dh)
        v = (xk[b] @ p["W_v"] + p["b_v"]).reshape(-1, H, Dh)
        for i in range(xq.shape[1]):
            n, t = divmod(i, HWq)
            cam = qcams[n]
            if s.kind in ("none", "plucker_input"):
                o = att.attention(q[i], k, v)
            elif s.rotary:
                ka, kb, C, F = _token_encodings(s, cam, kcams, segs_k, Dh, patch)
                qa, qb, _, _ = _token_encodings(s, cam, qcams, segs_q, Dh, patch)
                enc_q = rope.BlockEncoding(qa[i], qb[i], C, F)
                enc_k = rope.BlockEncoding(ka, kb, C, F)
                o = att.encoded_attention_single_query(q[i], enc_q, k, v, enc_k, s.encode_value_output)
            else:
                uv_i = (t % views.cols, t // views.cols)
                E_q = None
                E_keys = []
                for j in range(xk.shape[1]):
                    m, u = divmod(j, HWk)
                    uv_j = (u % kviews.cols, u // kviews.cols)
                    Eq, Ek = posenc.baseline_encoding(s.kind, cam, kcams[m], uv_i, uv_j, Dh)
                    E_q = Eq
                    E_keys.append(Ek)
                o = att.matrix_attention_single_query(q[i], E_q, k, v, np.array(E_keys), s.encode_value_output)
            out[b, i] = o.reshape(-1) @ p["W_o"] + p["b_o"]
    return out
