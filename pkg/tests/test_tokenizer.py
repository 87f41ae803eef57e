import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vjepa import tensor as T
from vjepa.tokenizer import PatchGeometry, extract_patches, patchify, sincos_3d, unpatchify


def test_full_scale_geometry_gives_1568_tokens():
    patch = PatchGeometry(tubelet=2, ph=16, pw=16)
    assert patch.grid(16, 224, 224) == (8, 14, 14)
    assert 8 * 14 * 14 == 1568


def test_default_geometries():
    patch = PatchGeometry()
    assert patch.grid(16, 64, 64) == (8, 8, 8)
    assert patch.grid(16, 32, 32) == (8, 4, 4)
    assert patch.volume == 2 * 8 * 8 * 3


def test_indivisible_geometry_is_rejected():
    with pytest.raises(ValueError, match="not divisible"):
        PatchGeometry().grid(15, 32, 32)


def test_identity_embedding_round_trip():
    patch = PatchGeometry(tubelet=2, ph=4, pw=4, channels=3)
    rng = np.random.default_rng(0)
    clips = rng.random((2, 4, 8, 12, 3))
    with T.precision(np.float64):
        tg = patchify(clips, T.tensor(np.eye(patch.volume)), T.tensor(np.zeros(patch.volume)), patch)
    assert tg.grid == (2, 2, 3) and tg.length == 12
    np.testing.assert_array_equal(unpatchify(tg.tokens.data, tg.grid, patch), clips)


def test_token_order_is_t_h_w_row_major():
    patch = PatchGeometry(tubelet=1, ph=1, pw=1, channels=1)
    clip = np.arange(2 * 3 * 4, dtype=float).reshape(1, 2, 3, 4, 1)
    tokens = extract_patches(clip, patch)
    np.testing.assert_array_equal(tokens[0, :, 0], np.arange(24))


def test_zero_tokens_give_zero_clip():
    patch = PatchGeometry()
    out = unpatchify(np.zeros((1, 8 * 4 * 4, patch.volume)), (8, 4, 4), patch)
    assert out.shape == (1, 16, 32, 32, 3) and not out.any()


def test_single_token_is_confined_to_one_tubelet_block():
    patch = PatchGeometry()
    grid = (8, 4, 4)
    tokens = np.zeros((1, 128, patch.volume))
    t, h, w = 3, 1, 2
    tokens[0, (t * 4 + h) * 4 + w] = 1.0
    clip = unpatchify(tokens, grid, patch)[0]
    nz = np.argwhere(clip != 0)
    assert len(nz) == patch.volume
    assert set(nz[:, 0]) == {6, 7}
    assert nz[:, 1].min() == 8 and nz[:, 1].max() == 15
    assert nz[:, 2].min() == 16 and nz[:, 2].max() == 23


@settings(max_examples=25, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.sampled_from([1, 2]),
       st.sampled_from([1, 2, 4]), st.integers(1, 3))
def test_unpatchify_inverts_extract(gt, gh, gw, tub, p, c):
    patch = PatchGeometry(tubelet=tub, ph=p, pw=p, channels=c)
    rng = np.random.default_rng(gt * 100 + gh * 10 + gw)
    clips = rng.random((2, gt * tub, gh * p, gw * p, c))
    tokens = extract_patches(clips, patch)
    assert tokens.shape == (2, gt * gh * gw, patch.volume)
    np.testing.assert_array_equal(unpatchify(tokens, (gt, gh, gw), patch), clips)


def test_sincos_origin_row():
    table = sincos_3d((8, 8, 8), 96)
    band = 32
    for b in range(3):
        sin = table[0, b * band: b * band + band // 2]
        cos = table[0, b * band + band // 2: (b + 1) * band]
        assert np.all(sin == 0.0) and np.all(cos == 1.0)


def test_sincos_axis_separability_and_values():
    grid, dim = (4, 3, 5), 48
    table = sincos_3d(grid, dim).reshape(4, 3, 5, dim)
    band = dim // 3
    # tokens differing only in t share their h and w bands
    np.testing.assert_array_equal(table[0, 1, 2, band:], table[3, 1, 2, band:])
    # explicit oracle for the t band at t=2
    k = np.arange(band // 2)
    omega = 1.0 / 10000 ** (2 * k / band)
    np.testing.assert_allclose(table[2, 0, 0, :band], np.concatenate([np.sin(2 * omega), np.cos(2 * omega)]))


def test_sincos_rows_pairwise_distinct():
    table = sincos_3d((8, 8, 8), 96)
    d = ((table[:, None, :] - table[None, :, :]) ** 2).sum(-1)
    np.fill_diagonal(d, np.inf)
    assert d.min() > 1e-6


def test_sincos_requires_dim_divisible_by_six():
    with pytest.raises(ValueError):
        sincos_3d((2, 2, 2), 32)
