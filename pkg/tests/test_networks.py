import numpy as np
import pytest
from scipy.special import erf

from vjepa import tensor as T
from vjepa.networks import (
    AttentiveProbe, AveragePoolProbe, ModelState, PixelHead, PredictorConfig, ProbeConfig, ViTConfig, ViTEncoder,
    normalize_patches,
)
from vjepa.tokenizer import PatchGeometry, extract_patches, sincos_3d

PATCH = PatchGeometry(tubelet=2, ph=4, pw=4, channels=3)
SMALL = ViTConfig(depth=2, dim=24, heads=4, patch=PATCH)


def clips(b=2, seed=0):
    return np.random.default_rng(seed).random((b, 4, 8, 8, 3))


def ln(x, g, b, eps=1e-6):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + eps) * g + b


def ref_block(blk, x, heads):
    p = {k: v.data for k, v in blk.named_parameters().items()}
    h = ln(x, p["ln1.g"], p["ln1.b"])
    qkv = h @ p["attn.qkv.w"] + p["attn.qkv.b"]
    d = x.shape[-1]
    q, k, v = qkv[..., :d], qkv[..., d:2 * d], qkv[..., 2 * d:]
    split = lambda t: t.reshape(t.shape[0], t.shape[1], heads, d // heads).transpose(0, 2, 1, 3)
    q, k, v = split(q), split(k), split(v)
    s = q @ k.transpose(0, 1, 3, 2) / np.sqrt(d // heads)
    a = np.exp(s - s.max(-1, keepdims=True))
    a /= a.sum(-1, keepdims=True)
    o = (a @ v).transpose(0, 2, 1, 3).reshape(x.shape)
    x = x + o @ p["attn.proj.w"] + p["attn.proj.b"]
    h = ln(x, p["ln2.g"], p["ln2.b"]) @ p["mlp.fc1.w"] + p["mlp.fc1.b"]
    h = h * 0.5 * (1 + erf(h / np.sqrt(2)))
    return x + h @ p["mlp.fc2.w"] + p["mlp.fc2.b"]


def test_encoder_matches_numpy_reference():
    with T.precision(np.float64):
        enc = ViTEncoder(SMALL, np.random.default_rng(1))
        c = clips()
        out = enc(c).data
    x = extract_patches(c, PATCH) @ enc.patch_embed.w.data + enc.patch_embed.b.data
    x = x + sincos_3d((2, 2, 2), 24)
    for blk in enc.blocks:
        x = ref_block(blk, x, 4)
    x = ln(x, enc.norm.g.data, enc.norm.b.data)
    np.testing.assert_allclose(out, x, rtol=1e-10, atol=1e-12)


def test_depth_zero_encoder_is_embedding_plus_positions():
    cfg = ViTConfig(depth=0, dim=24, heads=4, patch=PATCH)
    with T.precision(np.float64):
        enc = ViTEncoder(cfg, np.random.default_rng(0))
        c = clips()
        x = enc.embed(extract_patches(c, PATCH), (2, 2, 2)).data
        out = enc(c).data
    ref = extract_patches(c, PATCH) @ enc.patch_embed.w.data + enc.patch_embed.b.data + sincos_3d((2, 2, 2), 24)
    np.testing.assert_allclose(x, ref, rtol=1e-12)
    np.testing.assert_allclose(out, ln(ref, 1.0, 0.0), rtol=1e-9, atol=1e-12)


def test_keep_shape_and_permutation_equivariance():
    with T.precision(np.float64):
        enc = ViTEncoder(SMALL, np.random.default_rng(2))
        c = clips()
        keep = np.array([[0, 3, 5], [7, 1, 2]])
        out = enc(c, keep=keep).data
        perm = np.array([2, 0, 1])
        out_p = enc(c, keep=keep[:, perm]).data
    assert out.shape == (2, 3, 24)
    np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-10, atol=1e-12)


def test_padding_with_key_mask_matches_unpadded():
    with T.precision(np.float64):
        enc = ViTEncoder(SMALL, np.random.default_rng(3))
        c = clips(1)
        short = enc(c, keep=np.array([[1, 4, 6]])).data
        padded = enc(c, keep=np.array([[1, 4, 6, 0, 0]]),
                     key_valid=np.array([[True, True, True, False, False]])).data
    np.testing.assert_allclose(padded[:, :3], short, rtol=1e-10, atol=1e-12)


def test_predictor_shapes_positions_and_equivariance():
    with T.precision(np.float64):
        st = ModelState(SMALL, PredictorConfig(depth=1, dim=12), seed=0)
        c = clips()
        ctx = np.array([[0, 1, 2], [3, 4, 5]])
        z = st.encoder(c, keep=ctx)
        one = st.predictor(z, (2, 2, 2), np.array([[6], [7]]), ctx)
        assert one.shape == (2, 1, 24)
        a = st.predictor(z, (2, 2, 2), np.array([[6, 7], [6, 7]]), ctx).data
        b = st.predictor(z, (2, 2, 2), np.array([[7, 6], [7, 6]]), ctx).data
    np.testing.assert_allclose(b, a[:, ::-1], rtol=1e-10, atol=1e-12)
    assert np.abs(a[:, 0] - a[:, 1]).max() > 0


def test_predictor_rejects_overlap_and_bad_indices():
    with T.precision(np.float64):
        st = ModelState(SMALL, PredictorConfig(depth=1, dim=12), seed=0)
        ctx = np.array([[0, 1], [2, 3]])
        z = st.encoder(clips(), keep=ctx)
        with pytest.raises(ValueError, match="overlap"):
            st.predictor(z, (2, 2, 2), np.array([[1], [5]]), ctx)
        with pytest.raises(IndexError):
            st.predictor(z, (2, 2, 2), np.array([[8], [5]]), ctx)
    with pytest.raises(ValueError):
        ModelState(SMALL, PredictorConfig(dim=48))


def test_target_encoder_is_exact_frozen_copy():
    st = ModelState(SMALL, PredictorConfig(depth=1, dim=12), seed=4)
    on, tg = st.encoder.named_parameters(), st.target_encoder.named_parameters()
    assert on.keys() == tg.keys()
    for k in on:
        np.testing.assert_array_equal(on[k].data, tg[k].data)
        assert on[k].data is not tg[k].data
        assert not tg[k].requires_grad
    assert not any(k.startswith("ema.") for k in st.trainable())


def test_attentive_probe_singleton_and_duplication():
    rng = np.random.default_rng(0)
    with T.precision(np.float64):
        probe = AttentiveProbe(rng, 24, 5, ProbeConfig(heads=2, head_dim=6))
        f = rng.standard_normal((3, 1, 24))
        probe(T.tensor(f))
        assert np.all(probe.layers[0].last_attention == 1.0)
        g = rng.standard_normal((3, 4, 24))
        once = probe.pool(T.tensor(g)).data
        twice = probe.pool(T.tensor(np.concatenate([g, g], axis=1))).data
    np.testing.assert_allclose(twice, once, rtol=1e-10, atol=1e-12)


def test_attentive_probe_ignores_padded_tokens():
    rng = np.random.default_rng(1)
    with T.precision(np.float64):
        probe = AttentiveProbe(rng, 24, 5)
        g = rng.standard_normal((2, 3, 24))
        pad = np.concatenate([g, rng.standard_normal((2, 2, 24))], axis=1)
        valid = np.array([[True] * 3 + [False] * 2] * 2)
        np.testing.assert_allclose(probe(T.tensor(pad), valid).data, probe(T.tensor(g)).data, rtol=1e-10)


def test_probe_full_scale_geometry():
    cfg = ProbeConfig.full_scale()
    assert (cfg.heads, cfg.head_dim, cfg.width) == (12, 12, 144)


def test_average_pool_probe_properties():
    rng = np.random.default_rng(2)
    with T.precision(np.float64):
        c = np.tile(rng.standard_normal(24), (2, 5, 1))
        np.testing.assert_allclose(AveragePoolProbe.pool(T.tensor(c)).data, c[:, 0])
        g = rng.standard_normal((2, 5, 24))
        perm = rng.permutation(5)
        np.testing.assert_allclose(AveragePoolProbe.pool(T.tensor(g[:, perm])).data,
                                   AveragePoolProbe.pool(T.tensor(g)).data, rtol=1e-12)
        np.testing.assert_array_equal(AveragePoolProbe.pool(T.tensor(g[:, :1])).data, g[:, 0])


def test_pixel_head_and_normalisation():
    rng = np.random.default_rng(3)
    with T.precision(np.float64):
        head = PixelHead(rng, 24, PATCH)
        assert head(T.tensor(np.ones((2, 7, 24)))).shape == (2, 7, PATCH.volume)
    assert not normalize_patches(np.full((1, 2, 10), 0.3)).any()
    x = rng.random((3, 4, 10))
    n = normalize_patches(x)
    np.testing.assert_allclose(n.mean(-1), 0, atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        ViTConfig(dim=100, heads=4)
    with pytest.raises(ValueError):
        ViTConfig(dim=20, heads=4)
