import numpy as np
import pytest

from vjepa import tensor as T
from vjepa.masking import LONG_RANGE, SHORT_RANGE, MaskSet, batch_masksets
from vjepa.networks import ModelState, PredictorConfig, ViTConfig
from vjepa.objective import (
    ObjectiveConfig, collapse_report, combine_mask_losses, ema_update, median_oracle_check, pad_indices,
    pixel_loss, skewed_conditional, train_tabular_l1, vjepa_loss,
)
from vjepa.tokenizer import PatchGeometry

PATCH = PatchGeometry(tubelet=2, ph=4, pw=4, channels=3)
ENC = ViTConfig(depth=1, dim=24, heads=4, patch=PATCH)
PRED = PredictorConfig(depth=1, dim=12)
GRID = (2, 4, 4)


def setup(seed=0, b=2, dtype=np.float64, pixel=False):
    rng = np.random.default_rng(seed)
    with T.precision(dtype):
        st = ModelState(ENC, PRED, seed=seed, pixel_head=pixel)
    clips = rng.random((b, 4, 16, 16, 3)).astype(dtype)
    ms = batch_masksets((SHORT_RANGE, LONG_RANGE), GRID, seed, 0, b)
    return st, clips, ms


def test_loss_matches_per_mask_oracle():
    st, clips, ms = setup()
    with T.precision(np.float64):
        loss, rep = vjepa_loss(st, clips, ms)
        with T.no_grad():
            s = st.target_encoder(clips).data
            per, counts = [], []
            for k in range(2):
                num, n = 0.0, 0
                for i in range(2):
                    m = ms[i][k]
                    z = st.encoder(clips[i:i + 1], keep=m.context[None])
                    p = st.predictor(z, GRID, m.target[None], m.context[None]).data[0]
                    num += np.abs(p - s[i, m.target]).sum()
                    n += len(m.target)
                per.append(num / (n * 24))
                counts.append(n)
    np.testing.assert_allclose(rep.per_mask, per, rtol=1e-10)
    assert rep.target_counts == counts
    assert loss.item() == pytest.approx(sum(c * l for c, l in zip(counts, per)) / sum(counts), rel=1e-10)
    assert set(rep.as_dict()) >= {"loss", "loss_short", "loss_long", "target_std"}


def test_forward_counts_one_target_pass_per_step():
    st, clips, ms = setup()
    with T.precision(np.float64):
        vjepa_loss(st, clips, ms)
    assert st.target_encoder.forward_calls == 1
    assert st.encoder.forward_calls == 2
    assert st.predictor.forward_calls == 2


def test_no_gradient_reaches_target_encoder():
    st, clips, ms = setup()
    with T.precision(np.float64):
        loss, _ = vjepa_loss(st, clips, ms)
        tape = T.Tape.from_output(loss)
        loss.backward()
    ema_ids = {p._id for p in st.target_encoder.parameters()}
    assert not ema_ids & {n._id for n in tape.nodes}
    assert all(p.grad is None for p in st.target_encoder.parameters())
    assert all(p.grad is not None for p in st.encoder.parameters())


def test_combined_loss_is_count_weighted_mean_bit_exact():
    st, clips, ms = setup(dtype=np.float32)
    with T.deterministic(), T.precision(np.float32):
        both, rep = vjepa_loss(st, clips, ms)
        singles = [vjepa_loss(st, clips, [MaskSet([m[k]]) for m in ms])[0] for k in range(2)]
    n = rep.target_counts
    total = float(sum(n))
    ref = singles[0].data * np.float32(n[0] / total) + singles[1].data * np.float32(n[1] / total)
    assert both.data.tobytes() == np.float32(ref).tobytes()
    assert [s.data.tobytes() for s in singles] == [np.float32(v).tobytes() for v in rep.per_mask]


def test_perfect_prediction_gives_zero_loss_and_gradients():
    st, clips, ms = setup()
    c = np.linspace(-1, 1, 24)
    st.target_encoder.norm.g.data[:] = 0.0
    st.target_encoder.norm.b.data[:] = c
    st.predictor.proj.w.data[:] = 0.0
    st.predictor.proj.b.data[:] = c
    with T.precision(np.float64):
        loss, _ = vjepa_loss(st, clips, ms)
        loss.backward()
    assert loss.item() == 0.0
    for p in st.trainable().values():
        assert p.grad is None or not p.grad.any()


def test_without_stop_gradient_targets_carry_gradient():
    st, clips, ms = setup()
    cfg = ObjectiveConfig(stop_gradient=False)
    with T.precision(np.float64):
        loss_sg, _ = vjepa_loss(st, clips, ms)
        loss_sg.backward()
        g_sg = st.encoder.norm.b.grad.copy()
        st.encoder.zero_grad()
        st.predictor.zero_grad()
        loss_ng, _ = vjepa_loss(st, clips, ms, cfg)
        loss_ng.backward()
    assert st.target_encoder.forward_calls == 1
    assert st.encoder.forward_calls == 2 + 3
    assert not np.allclose(g_sg, st.encoder.norm.b.grad)


@pytest.mark.parametrize("m", [0.0, 0.5, 1.0])
def test_ema_closed_form_bit_exact(m):
    st, _, _ = setup(dtype=np.float32)
    rng = np.random.default_rng(1)
    for p in st.encoder.parameters():
        p.data = rng.standard_normal(p.shape).astype(np.float32)
    before = {k: p.data.copy() for k, p in st.target_encoder.named_parameters().items()}
    online = st.encoder.named_parameters()
    ema_update(st, m)
    for k, p in st.target_encoder.named_parameters().items():
        ref = before[k] * np.float32(m) + np.float32(1 - m) * online[k].data
        assert p.data.tobytes() == ref.tobytes()
        if m == 0.0:
            np.testing.assert_array_equal(p.data, online[k].data)
        if m == 1.0:
            np.testing.assert_array_equal(p.data, before[k])


def test_ema_arithmetic_example_and_validation():
    st, _, _ = setup(dtype=np.float32)
    for p in st.target_encoder.parameters():
        p.data[...] = 0.0
    for p in st.encoder.parameters():
        p.data[...] = 2.0
    ema_update(st, 0.5)
    assert all(np.all(p.data == 1.0) for p in st.target_encoder.parameters())
    with pytest.raises(ValueError):
        ema_update(st, 1.5)


def test_pixel_loss_properties():
    st, clips, ms = setup(pixel=True)
    const = np.full_like(clips, 0.4)
    st.pixel_head.out.w.data[:] = 0.0
    st.pixel_head.out.b.data[:] = 0.0
    with T.precision(np.float64):
        assert pixel_loss(st, const, ms)[0].item() == 0.0
        st.pixel_head.out.b.data[:] = 0.5
        assert pixel_loss(st, const, ms)[0].item() == pytest.approx(0.25, rel=1e-12)
        base = pixel_loss(st, clips, ms)[0].item()
        shifted = clips.copy()
        shifted[:, 0:2, 0:4, 0:4, :] += 0.3
        assert pixel_loss(st, shifted, ms)[0].item() == pytest.approx(base, rel=1e-6)
    assert st.target_encoder.forward_calls == 0


def test_collapse_report_constant_and_random():
    st, clips, _ = setup()
    with T.precision(np.float64):
        rep = collapse_report(st, clips)
        assert rep["per_dim_std"] > 1e-3
        assert collapse_report(st, clips) == rep
        st.target_encoder.norm.g.data[:] = 0.0
        st.target_encoder.norm.b.data[:] = np.arange(24.0) + 1
        flat = collapse_report(st, clips)
    assert flat["per_dim_std"] == 0.0
    assert flat["mean_pairwise_cosine"] == pytest.approx(1.0, abs=1e-12)


def test_pad_indices_and_combine():
    idx, valid = pad_indices([np.array([3, 1]), np.array([5])])
    np.testing.assert_array_equal(idx, [[3, 1], [5, 0]])
    np.testing.assert_array_equal(valid, [[True, True], [True, False]])
    with T.precision(np.float64):
        out = combine_mask_losses([T.tensor(2.0), T.tensor(5.0)], [1, 3])
    assert out.item() == pytest.approx(4.25)


def test_mask_set_validation():
    st, clips, ms = setup()
    with pytest.raises(ValueError):
        vjepa_loss(st, clips, ms[:1])


def test_median_not_mean_for_three_point_distribution():
    x = np.zeros(3000, dtype=int)
    y = np.tile([1.0, 2.0, 100.0], 1000)
    table = train_tabular_l1(x, y, iters=3000)
    assert table[0] == pytest.approx(2.0, abs=0.01 * 99)
    assert abs(table[0] - y.mean()) > 30
    assert median_oracle_check(x, y, table) < 0.01 * 99


def test_symmetric_distribution_median_equals_mean():
    x = np.zeros(999, dtype=int)
    y = np.tile([1.0, 2.0, 3.0], 333)
    table = train_tabular_l1(x, y, iters=3000)
    assert table[0] == pytest.approx(2.0, abs=0.02)
    assert np.median(y) == y.mean()


def test_tabular_predictor_lands_on_conditional_median():
    x, y = skewed_conditional(1000, seed=3)
    table = train_tabular_l1(x, y, seed=3)
    spread = y.max() - y.min()
    assert median_oracle_check(x, y, table) < 0.01 * spread
    assert median_oracle_check(x, y, lambda v: table[v]) < 0.01 * spread
