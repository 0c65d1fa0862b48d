import math

import numpy as np
import pytest

from oracles import loop_attention
from rayrope import attention as att
from rayrope import geometry as geo
from rayrope import posenc, rope
from rayrope import tensor as tn


def _cameras(rng, n, size=8, fov=60.0):
    cams = []
    for _ in range(n):
        eye = rng.normal(size=3)
        eye = 2.5 * eye / np.linalg.norm(eye)
        cams.append(geo.Camera.look_at(eye, rng.normal(scale=0.2, size=3), fov + rng.uniform(-10, 10), size, size))
    return cams


def _views(rng, batch, n, size=8, patch=4):
    return posenc.ViewBatch.from_cameras([_cameras(rng, n, size) for _ in range(batch)], patch)


def _strategy(kind, **flags):
    return posenc.EncodingStrategy.create(kind, **flags)


# -- reference attention -----------------------------------------------------


def test_attention_single_key_returns_its_value():
    rng = np.random.default_rng(0)
    q = rng.normal(size=(2, 4))
    k = rng.normal(size=(1, 2, 4))
    v = rng.normal(size=(1, 2, 4))
    np.testing.assert_allclose(att.attention(q, k, v), v[0], atol=0)


def test_attention_identical_keys_average_values():
    rng = np.random.default_rng(1)
    q = rng.normal(size=(1, 4))
    k = np.repeat(rng.normal(size=(1, 1, 4)), 5, axis=0)
    v = rng.normal(size=(5, 1, 4))
    np.testing.assert_allclose(att.attention(q, k, v), v.mean(axis=0), atol=1e-12)


def test_attention_matches_scalar_loop():
    rng = np.random.default_rng(2)
    H, Dh, M = 2, 3, 6
    q = rng.normal(size=(H, Dh))
    k = rng.normal(size=(M, H, Dh))
    v = rng.normal(size=(M, H, Dh))
    out = np.zeros((H, Dh))
    for h in range(H):
        s = [sum(q[h, i] * k[m, h, i] for i in range(Dh)) / math.sqrt(Dh) for m in range(M)]
        e = [math.exp(x - max(s)) for x in s]
        for m in range(M):
            out[h] += e[m] / sum(e) * v[m, h]
    np.testing.assert_allclose(att.attention(q, k, v), out, atol=1e-12)


def test_attention_rejects_bad_shapes():
    with pytest.raises(ValueError):
        att.attention(np.zeros((1, 4)), np.zeros((0, 1, 4)), np.zeros((0, 1, 4)))
    with pytest.raises(ValueError):
        att.attention(np.zeros((1, 4)), np.zeros((2, 1, 4)), np.zeros((3, 1, 4)))


# -- encoded single-query attention ------------------------------------------


def _relative_form(q, keys, values, rel, vo=True):
    """sum_j softmax(q^T M_j k_j / sqrt(Dh)) M_j v_j with dense relative matrices M_j."""
    H, Dh = q.shape
    out = np.zeros_like(q)
    for h in range(H):
        s = np.array([q[h] @ M @ keys[j, h] for j, M in enumerate(rel)]) / math.sqrt(Dh)
        w = np.exp(s - s.max())
        w /= w.sum()
        for j, M in enumerate(rel):
            out[h] += w[j] * (M @ values[j, h] if vo else values[j, h])
    return out


def test_equal_positions_reduce_to_plain_attention():
    rng = np.random.default_rng(3)
    x = rng.normal(size=6)
    enc = rope.encoding_from_intervals(x, x, [1.5, 0.2], 24)
    keys = rope.BlockEncoding(np.tile(enc.a, (4, 1)), np.tile(enc.b, (4, 1)), enc.components, enc.freqs)
    q, k, v = rng.normal(size=(2, 24)), rng.normal(size=(4, 2, 24)), rng.normal(size=(4, 2, 24))
    got = att.encoded_attention_single_query(q, enc, k, v, keys)
    np.testing.assert_allclose(got, att.attention(q, k, v), atol=1e-12)


@pytest.mark.parametrize("vo", [True, False])
def test_deterministic_encoding_matches_relative_matrices(vo):
    rng = np.random.default_rng(4)
    fr = [2.0, 0.3]
    for _ in range(10):
        M = rng.integers(1, 8)
        xi = rng.normal(size=6)
        xj = rng.normal(size=(M, 6))
        enc_q = rope.encoding_from_intervals(xi, xi, fr, 24)
        enc_k = rope.encoding_from_intervals(xj, xj, fr, 24)
        rel = [rope.encoding_from_intervals(xi - x, xi - x, fr, 24).dense() for x in xj]
        q, k, v = rng.normal(size=(2, 24)), rng.normal(size=(M, 2, 24)), rng.normal(size=(M, 2, 24))
        got = att.encoded_attention_single_query(q, enc_q, k, v, enc_k, vo)
        np.testing.assert_allclose(got, _relative_form(q, k, v, rel, vo), atol=1e-9)


def test_uncertain_encoding_matches_expected_relative_matrices():
    rng = np.random.default_rng(5)
    fr = [2.0, 0.3]
    lo_i = rng.normal(size=6)
    enc_q = rope.encoding_from_intervals(lo_i, lo_i + rng.uniform(0, 1, 6), fr, 24)
    lo_j = rng.normal(size=(5, 6))
    enc_k = rope.encoding_from_intervals(lo_j, lo_j + rng.uniform(0, 1, (5, 6)), fr, 24)
    rel = []
    for j in range(5):
        ej = rope.BlockEncoding(enc_k.a[j], enc_k.b[j], enc_k.components, enc_k.freqs)
        rel.append(rope.relative_product(enc_q, ej).dense())
    q, k, v = rng.normal(size=(1, 24)), rng.normal(size=(5, 1, 24)), rng.normal(size=(5, 1, 24))
    got = att.encoded_attention_single_query(q, enc_q, k, v, enc_k)
    np.testing.assert_allclose(got, _relative_form(q, k, v, rel), atol=1e-9)


def test_matrix_attention_matches_block_attention():
    rng = np.random.default_rng(6)
    x = rng.normal(size=(4, 6))
    enc = rope.encoding_from_intervals(x, x + 0.3, [1.0, 0.1], 24)
    one = rope.BlockEncoding(enc.a[0], enc.b[0], enc.components, enc.freqs)
    q, k, v = rng.normal(size=(1, 24)), rng.normal(size=(4, 1, 24)), rng.normal(size=(4, 1, 24))
    dense_k = np.array([rope.BlockEncoding(enc.a[j], enc.b[j], 6, 2).dense().T for j in range(4)])
    got = att.matrix_attention_single_query(q, one.dense(), k, v, dense_k)
    np.testing.assert_allclose(got, att.encoded_attention_single_query(q, one, k, v, enc), atol=1e-12)


# -- batched layers vs the per-token loop ------------------------------------

LOOP_CASES = [
    ("rayrope", {}),
    ("rayrope", {"rays_per_patch": 1}),
    ("rayrope", {"use_sigma": False}),
    ("rayrope", {"point_at_infinity": True}),
    ("rayrope", {"encode_value_output": False}),
    ("rope_on_rays", {}),
    ("cape", {}),
    ("gta", {}),
    ("prope", {}),
    ("plucker_input", {}),
    ("none", {}),
]


@pytest.mark.parametrize("kind,flags", LOOP_CASES)
def test_self_attention_matches_token_loop(kind, flags):
    rng = np.random.default_rng(7)
    s = _strategy(kind, **flags)
    layer = att.AttentionLayer(144, 2, s, rng)
    for p in layer.params.values():
        p.data = rng.normal(0, 0.1, p.shape)
    views = _views(rng, 2, 2)
    x = tn.Tensor(rng.normal(size=(2, 2 * views.tokens_per_view, 144)))
    got = att.multiview_self_attention(layer, x, views).data
    ref = loop_attention(layer, x, views)
    # rays nearly parallel to a query image plane project to pixels ~1e4 wide,
    # so rounding is compared against the output scale
    assert np.abs(got - ref).max() <= 1e-9 * max(1.0, np.abs(ref).max())


@pytest.mark.parametrize("kind", ["rayrope", "rope_on_rays", "prope", "cape"])
def test_cross_attention_matches_token_loop(kind):
    rng = np.random.default_rng(8)
    layer = att.AttentionLayer(72, 1, _strategy(kind), rng)
    for p in layer.params.values():
        p.data = rng.normal(0, 0.3, p.shape)
    qv, kv = _views(rng, 1, 2), _views(rng, 1, 3)
    xq = tn.Tensor(rng.normal(size=(1, 2 * qv.tokens_per_view, 72)))
    xk = tn.Tensor(rng.normal(size=(1, 3 * kv.tokens_per_view, 72)))
    got = att.multiview_cross_attention(layer, xq, qv, xk, kv).data
    np.testing.assert_allclose(got, loop_attention(layer, xq, qv, x_kv=xk, kviews=kv), atol=1e-9)


def test_known_depth_self_attention_matches_token_loop():
    rng = np.random.default_rng(9)
    layer = att.AttentionLayer(72, 1, _strategy("rayrope", known_depth_mode=True), rng)
    for p in layer.params.values():
        p.data = rng.normal(0, 0.3, p.shape)
    views = _views(rng, 1, 3)
    depths = rng.uniform(1.0, 4.0, (1, 3, 8, 8))
    depths[0, 0, 0, 0] = np.inf  # background pixel at a ray corner
    depths[0, 1, 4, 4] = -1.0  # invalid: that token falls back to the prediction
    depths[0, 2] = np.nan  # view without depth
    x = tn.Tensor(rng.normal(size=(1, 3 * views.tokens_per_view, 72)))
    got = att.multiview_self_attention(layer, x, views, depths).data
    np.testing.assert_allclose(got, loop_attention(layer, x, views, depths), atol=1e-9)


def test_token_count_mismatch_raises():
    rng = np.random.default_rng(10)
    layer = att.AttentionLayer(36, 1, _strategy("rayrope"), rng)
    views = _views(rng, 1, 2)
    with pytest.raises(ValueError, match="tokens"):
        att.multiview_self_attention(layer, tn.Tensor(np.zeros((1, 5, 36))), views)


def test_layer_rejects_bad_head_dim():
    rng = np.random.default_rng(11)
    with pytest.raises(ValueError, match="divisible by 36"):
        att.AttentionLayer(48, 1, _strategy("rayrope"), rng)
    with pytest.raises(ValueError):
        att.AttentionLayer(72, 5, _strategy("none"), rng)


# -- toy model ---------------------------------------------------------------


def _model(kind="rayrope", seed=0, dim=72, zero_head=False, **flags):
    cfg = att.ModelConfig(dim=dim, heads=1, layers=2, ff=32, image=8, patch=4, views=3, zero_head=zero_head)
    return att.ToyModel(cfg, _strategy(kind, **flags), seed)


def _inputs(rng, batch=1):
    views = _views(rng, batch, 3)
    return rng.uniform(0, 1, (batch, 2, 8, 8, 3)), views


@pytest.mark.parametrize("kind", ["rayrope", "gta", "prope", "cape"])
def test_model_is_invariant_to_world_frame(kind):
    rng = np.random.default_rng(12)
    model = _model(kind)
    images, views = _inputs(rng)
    base = model.forward(images, views).data
    for _ in range(3):
        G = geo.random_rigid(rng, 2.0)[None]
        moved = model.forward(images, views.transformed(G)).data
        assert np.abs(moved - base).max() < 1e-9


@pytest.mark.parametrize("kind", ["rope_on_rays", "plucker_input"])
def test_absolute_encodings_are_not_invariant(kind):
    rng = np.random.default_rng(13)
    model = _model(kind, zero_head=False)
    images, views = _inputs(rng)
    base = model.forward(images, views).data
    G = geo.rigid(geo.rotation_from_axis_angle([0, 0, 1], 0.8), np.zeros(3))[None]
    moved = model.forward(images, views.transformed(G)).data
    assert np.abs(moved - base).max() >= 1e-3


def test_reference_view_order_does_not_matter():
    rng = np.random.default_rng(14)
    model = _model("rayrope")
    images, views = _inputs(rng)
    base = model.forward(images, views).data
    swapped = model.forward(images[:, ::-1], views.select([1, 0, 2])).data
    np.testing.assert_allclose(swapped, base, atol=1e-10)


def test_depth_heads_are_positive():
    rng = np.random.default_rng(15)
    model = _model("rayrope")
    images, views = _inputs(rng)
    rec = []
    model.forward(images, views, record=rec)
    assert len(rec) == 2
    for d, s in rec:
        assert (d.data > 0).all() and (s.data > 0).all()


def test_zero_head_predicts_mid_gray():
    rng = np.random.default_rng(16)
    model = _model("rayrope", zero_head=True)
    images, views = _inputs(rng)
    np.testing.assert_array_equal(model.forward(images, views).data, 0.5)


def test_unencoded_model_has_no_depth_heads():
    names = set(_model("none").parameters())
    assert not any("W_d" in n or "W_sigma" in n for n in names)
    names = set(_model("rayrope", use_sigma=False).parameters())
    assert any("W_d" in n for n in names) and not any("W_sigma" in n for n in names)


def test_model_gradients_reach_every_parameter():
    rng = np.random.default_rng(17)
    model = _model("rayrope")
    images, views = _inputs(rng)
    loss = model.loss(images, views, rng.uniform(0, 1, (1, 8, 8, 3)))
    loss.backward()
    for name, p in model.parameters().items():
        assert p.grad is not None and np.abs(p.grad).max() > 0, name


def test_model_rejects_mismatched_cameras():
    rng = np.random.default_rng(18)
    model = _model("rayrope")
    images, views = _inputs(rng)
    with pytest.raises(ValueError):
        model.forward(images[:, :1], views)
    with pytest.raises(ValueError):
        _model("rayrope", known_depth_mode=True).forward(images, views)


def test_checkpoint_round_trip_is_exact(tmp_path):
    model = _model("rayrope", seed=3)
    params = model.parameters()
    for p in params.values():
        p.data = p.data.astype(np.float32).astype(np.float64)
    att.save_checkpoint(params, tmp_path / "ckpt", "abc123")
    arrays, h = att.read_checkpoint(tmp_path / "ckpt")
    assert h == "abc123"
    other = _model("rayrope", seed=4)
    att.load_into(other.parameters(), arrays)
    for name, p in other.parameters().items():
        np.testing.assert_array_equal(p.data, params[name].data)
    with pytest.raises(ValueError, match="mismatch"):
        att.load_into(_model("prope").parameters(), arrays)
