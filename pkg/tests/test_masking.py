import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from oracles import block_coverage_oracle

from vjepa.masking import (
    CAUSAL, LONG_RANGE, RANDOM_TUBE, SHORT_RANGE, MaskConfig, MaskError, batch_masksets, clip_rngs,
    mask_stats, sample_causal_multiblock, sample_mask, sample_maskset, sample_multiblock, sample_random_tube,
)

GRID = (8, 14, 14)


def check_partition(mask, grid):
    n = int(np.prod(grid))
    assert len(mask.target) > 0 and len(mask.context) > 0
    assert len(np.intersect1d(mask.target, mask.context)) == 0
    np.testing.assert_array_equal(np.union1d(mask.target, mask.context), np.arange(n))


def spatial_layers(mask, grid):
    m = np.zeros(int(np.prod(grid)), dtype=bool)
    m[mask.target] = True
    return m.reshape(grid)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([SHORT_RANGE, LONG_RANGE, MaskConfig(kind=RANDOM_TUBE)]),
       st.sampled_from([(8, 14, 14), (8, 4, 4), (3, 5, 7)]))
def test_partition_and_temporal_extension(seed, cfg, grid):
    mask = sample_mask(cfg, grid, np.random.default_rng(seed))
    check_partition(mask, grid)
    layers = spatial_layers(mask, grid)
    assert (layers == layers[0]).all()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_blocks_respect_configured_size_and_aspect(seed):
    mask = sample_multiblock(SHORT_RANGE, GRID, np.random.default_rng(seed))
    assert len(mask.blocks) == 8
    area = 29  # 0.15 * 196 = 29.4, rounded
    for b in mask.blocks:
        assert 0.75 <= b.aspect <= 1.5
        assert 0 <= b.top <= 14 - b.height and 0 <= b.left <= 14 - b.width
        assert abs(b.height * b.width - area) <= b.height + b.width


def test_long_mask_covers_at_least_each_block():
    rng = np.random.default_rng(1)
    for _ in range(50):
        m = sample_multiblock(LONG_RANGE, GRID, rng)
        for b in m.blocks:
            assert m.coverage >= b.height * b.width / 196


def test_full_cover_block_exhausts_resamples():
    cfg = MaskConfig(num_blocks=1, spatial_scale=1.0, aspect_ratio=(1.0, 1.0))
    with pytest.raises(MaskError, match="no context"):
        sample_multiblock(cfg, GRID, np.random.default_rng(0))


def test_random_tube_count_and_determinism():
    m = sample_random_tube(0.9, (8, 14, 14), np.random.default_rng(3))
    assert len(m.target) == 176 * 8
    m2 = sample_random_tube(0.9, (8, 14, 14), np.random.default_rng(3))
    np.testing.assert_array_equal(m.target, m2.target)


def test_random_tube_cell_frequency():
    rng = np.random.default_rng(11)
    counts = np.zeros(196)
    n = 4000
    for _ in range(n):
        m = sample_random_tube(0.9, (1, 14, 14), rng)
        counts[m.target] += 1
    freq = counts / n
    assert abs(freq.mean() - 176 / 196) < 1e-12
    assert np.abs(freq - 0.9).max() < 0.03


def test_random_tube_degenerate_ratio_rejected():
    with pytest.raises(MaskError):
        sample_random_tube(0.001, (2, 4, 4), np.random.default_rng(0))


@pytest.mark.parametrize("frames,slots", [(6, 3), (12, 6), (5, 3)])
def test_causal_context_confined_to_prefix(frames, slots):
    cfg = MaskConfig(kind=CAUSAL, num_blocks=8, spatial_scale=0.15, causal_frames=frames)
    rng = np.random.default_rng(frames)
    for _ in range(20):
        m = sample_causal_multiblock(frames, cfg, GRID, rng)
        check_partition(m, GRID)
        layers = spatial_layers(m, GRID)
        assert layers[slots:].all()
        ctx_t = np.unique(m.context // (14 * 14))
        assert ctx_t.max() < slots
        assert (layers[:slots] == layers[0]).all()


def test_causal_with_whole_clip_prefix_is_plain_multiblock():
    cfg = MaskConfig(kind=CAUSAL, num_blocks=8, spatial_scale=0.15, causal_frames=16)
    a = sample_causal_multiblock(16, cfg, GRID, np.random.default_rng(5))
    b = sample_multiblock(SHORT_RANGE, GRID, np.random.default_rng(5))
    np.testing.assert_array_equal(a.target, b.target)


def test_maskset_defaults_and_per_clip_seeds():
    ms = sample_maskset((SHORT_RANGE, LONG_RANGE), GRID, np.random.default_rng(0))
    assert len(ms) == 2
    assert (SHORT_RANGE.num_blocks, SHORT_RANGE.spatial_scale) == (8, 0.15)
    assert (LONG_RANGE.num_blocks, LONG_RANGE.spatial_scale) == (2, 0.7)
    assert SHORT_RANGE.aspect_ratio == LONG_RANGE.aspect_ratio == (0.75, 1.5)
    sets = batch_masksets((SHORT_RANGE, LONG_RANGE), GRID, seed=4, step=2, batch=4)
    targets = {tuple(s[1].target[:20]) for s in sets}
    assert len(targets) > 1
    again = batch_masksets((SHORT_RANGE, LONG_RANGE), GRID, seed=4, step=2, batch=4)
    for a, b in zip(sets, again):
        np.testing.assert_array_equal(a[0].target, b[0].target)
    assert len(clip_rngs(0, 0, 3)) == 3


def test_mask_stats_deterministic_and_shrinking_error():
    a = mask_stats(LONG_RANGE, (1, 14, 14), 300, seed=2)
    b = mask_stats(LONG_RANGE, (1, 14, 14), 300, seed=2)
    assert a == b
    c = mask_stats(LONG_RANGE, (1, 14, 14), 2400, seed=2)
    assert c["std_coverage"] < a["std_coverage"]
    assert sum(a["block_sizes"].values()) == 600


def test_long_masks_cover_more_than_short():
    lo = mask_stats(SHORT_RANGE, (1, 14, 14), 500, seed=0)
    hi = mask_stats(LONG_RANGE, (1, 14, 14), 500, seed=0)
    assert hi["mean_coverage"] > lo["mean_coverage"]


@pytest.mark.parametrize("cfg", [SHORT_RANGE, LONG_RANGE], ids=["short", "long"])
def test_coverage_matches_independent_oracle(cfg):
    stats = mask_stats(cfg, (1, 14, 14), 3000, seed=1)
    ref = block_coverage_oracle(cfg.num_blocks, cfg.spatial_scale, 14, 14, 3000, seed=99)
    assert abs(stats["mean_coverage"] - ref) < 0.02


def test_mask_config_validation():
    with pytest.raises(MaskError):
        MaskConfig(kind="checkerboard")
    with pytest.raises(MaskError):
        MaskConfig(kind=CAUSAL)
    with pytest.raises(MaskError):
        MaskConfig(spatial_scale=0.0)
    assert MaskConfig(kind=RANDOM_TUBE).label == "random-tube[0.9]"
    assert MaskConfig(kind=CAUSAL, causal_frames=6).label == "causal multi-block[6]"
