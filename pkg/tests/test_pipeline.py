import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvst import training, video
from cvst.errors import ContractViolation, InvalidInput, ShapeMismatch
from cvst.latent import round_half_away
from cvst.mimo import ChannelSpec
from cvst.numerics import SeededRng, Tensor, no_grad
from cvst.pipeline import (CvstModel, GopConfig, ModelConfig, _compensate_positions, _estimate_positions,
                           candidate_shifts, channel_state, generate_context, motion_compensate, motion_estimate,
                           noiseless, reconstruct_frame, run_gop, semantic_codec)

# -- semantic codec -------------------------------------------------------------------


def test_codec_shapes():
    model = CvstModel()
    x = SeededRng(0).uniform(size=(3, 32, 32))
    f = semantic_codec(x, "encode", model)
    assert f.shape == (8, 8, 8)
    back = semantic_codec(f, "decode", model)
    assert back.shape == (3, 32, 32)
    assert back.min() >= 0.0 and back.max() <= 1.0


def test_codec_wide_latent_config():
    model = CvstModel(ModelConfig(channels=64, m=4, n_tx=8, n_rx=8))
    f = semantic_codec(SeededRng(1).uniform(size=(3, 32, 32)), "encode", model)
    assert f.shape == (64, 8, 8)


def test_codec_errors():
    model = CvstModel()
    with pytest.raises(ShapeMismatch):
        semantic_codec(np.zeros((3, 30, 32)), "encode", model)
    with pytest.raises(InvalidInput):
        semantic_codec(np.zeros((3, 32, 32)), "sideways", model)
    with pytest.raises(ShapeMismatch):
        ModelConfig(height=30)
    with pytest.raises(InvalidInput):
        GopConfig(frames=1)
    with pytest.raises(InvalidInput):
        GopConfig(s=3)


@pytest.fixture(scope="module")
def stage1_model():
    model, _ = training.train_model(schedule=training.Schedule(stage2_steps=0))
    return model


def test_stage1_round_trip_beats_mean_colour(stage1_model):
    corpus = training.default_corpus(stage1_model.cfg, seed=0)
    mse, base = [], []
    for clip in corpus:
        for x in clip:
            r = semantic_codec(semantic_codec(x, "encode", stage1_model), "decode", stage1_model)
            mse.append(np.mean((r - x) ** 2))
            base.append(np.mean((x - x.mean(axis=(1, 2), keepdims=True)) ** 2))
    assert np.mean(mse) < np.mean(base)


# -- motion -------------------------------------------------------------------------


def _oracle_motion(cur, ref, radius, bias=0.0):
    """Direct loops: replicate padding, 3x3 window of existing positions, explicit tie-break."""
    L, h, w = cur.shape
    out = np.zeros((2, h, w), dtype=int)
    order = [(0, 0)] + sorted(d for d in itertools.product(range(-radius, radius + 1), repeat=2) if d != (0, 0))
    for y in range(h):
        for x in range(w):
            best, best_d = np.inf, None
            for dy, dx in order:
                cost = 0.0
                for py in range(max(y - 1, 0), min(y + 2, h)):
                    for px in range(max(x - 1, 0), min(x + 2, w)):
                        ry = min(max(py + dy, 0), h - 1)
                        rx = min(max(px + dx, 0), w - 1)
                        cost += float(np.sum((cur[:, py, px] - ref[:, ry, rx]) ** 2))
                cost *= 1.0 + bias * (abs(dy) + abs(dx))
                if cost < best:
                    best, best_d = cost, (dy, dx)
            out[:, y, x] = best_d
    return out


def test_identical_inputs_give_zero_field():
    f = SeededRng(0).normal(size=(8, 8, 8))
    assert np.all(motion_estimate(f, f, radius=2) == 0)


@pytest.mark.parametrize("shift", [(1, 0), (0, 1), (-2, 1)])
def test_global_shift_recovered_on_interior(shift):
    dy, dx = shift
    ref = SeededRng(1).normal(size=(4, 10, 10))
    cur = np.roll(ref, (-dy, -dx), axis=(1, 2))  # cur(p) = ref(p + shift)
    v = motion_estimate(cur, ref, radius=2)
    inner = v[:, 3:-3, 3:-3]
    assert np.all(inner[0] == dy) and np.all(inner[1] == dx)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 2**32), radius=st.integers(1, 2), bias=st.sampled_from([0.0, 0.2]),
       integer=st.booleans())
def test_motion_matches_exhaustive_oracle(seed, radius, bias, integer):
    rng = SeededRng(seed)
    ref = rng.normal(size=(3, 8, 8))
    cur = rng.normal(size=(3, 8, 8))
    if integer:  # small integer values produce many exact cost ties
        ref, cur = np.round(ref), np.round(cur)
    assert np.array_equal(motion_estimate(cur, ref, radius, bias), _oracle_motion(cur, ref, radius, bias))


def test_candidate_order_and_bounds():
    c = candidate_shifts(1)
    assert c[0] == (0, 0) and c[1:] == sorted(c[1:]) and len(c) == 9
    v = motion_estimate(*SeededRng(2).normal(size=(2, 2, 6, 6)), radius=1)
    assert np.abs(v).max() <= 1


def test_motion_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        motion_estimate(np.zeros((2, 4, 4)), np.zeros((2, 4, 5)))


def test_compensate_zero_field_is_identity():
    f = SeededRng(3).normal(size=(4, 5, 6))
    assert np.array_equal(motion_compensate(f, np.zeros((2, 5, 6), dtype=int)), f)


def test_compensate_composition_on_interior():
    f = SeededRng(4).normal(size=(4, 10, 10))
    shifted = np.roll(f, (1, -1), axis=(1, 2))
    v = motion_estimate(f, shifted, radius=2)
    back = motion_compensate(shifted, v)
    np.testing.assert_allclose(back[:, 3:-3, 3:-3], f[:, 3:-3, 3:-3], atol=1e-9)


def test_compensate_replicates_edges():
    f = np.arange(12.0).reshape(1, 3, 4)
    v = np.zeros((2, 3, 4), dtype=int)
    v[0] = -2  # read two rows up
    v[1] = 3  # and three columns right
    out = motion_compensate(f, v)
    assert np.array_equal(out[0], np.tile(f[0, 0, 3], (3, 4)))


# -- context and reconstruction --------------------------------------------------------


def test_context_without_current_weight_ignores_current():
    model = CvstModel()
    model.ctx_w1.data[...] = 0.0
    rng = SeededRng(5)
    pred, cur = rng.normal(size=(2, 8, 8, 8))
    a = generate_context(pred, cur, model)
    b = generate_context(pred, cur + rng.normal(size=cur.shape), model)
    assert a.shape == (8, 8, 8) and a.tobytes() == b.tobytes()


def test_decoder_context_never_reads_current():
    model = CvstModel()
    pred, cur = SeededRng(6).normal(size=(2, 8, 8, 8))
    with pytest.raises(ContractViolation):
        generate_context(pred, cur, model, side="decoder", received=cur)
    out = generate_context(pred, None, model, side="decoder", received=cur)
    assert out.shape == pred.shape
    with pytest.raises(InvalidInput):
        generate_context(pred, None, model)


def test_reconstruct_is_linear_without_refinement():
    model = CvstModel()
    rng = SeededRng(7)
    model.rec_w3.data[...] = rng.normal(size=(8, 8))
    model.rec_w4.data[...] = rng.normal(size=(8, 8))
    c, pred = rng.normal(size=(2, 8, 4, 4))
    out = reconstruct_frame(c, pred, model)  # rec_r2 starts at zero
    expect = np.einsum("lhw,lk->khw", c, model.rec_w3.data) + np.einsum("lhw,lk->khw", pred, model.rec_w4.data)
    np.testing.assert_allclose(out, expect, atol=1e-12)
    assert out.tobytes() == reconstruct_frame(c, pred, model).tobytes()


def test_noiseless_full_rate_not_worse_than_quantized_path(trained):
    model, _ = trained
    li = model.lam_index(0.12)
    gaps = []
    for sd in range(10):
        x = video.synth_video(video.ClipSpec(32, 32, 2, (4, 0), pattern_seed=sd))
        r = SeededRng(sd, 3)
        state = noiseless(channel_state(r.spawn("s"), ChannelSpec(2, 2, 10.0)))
        f, _, _ = model.i_frame(x[:1], [state], [r.spawn("i")])
        with no_grad():
            o = model.p_frame(x[1:2], f, li, 10.0, [state], [r.spawn("p")], full_rate=True, with_ntc=True)
        gaps.append(video.psnr(x[1], o.x_hat.data[0]) - video.psnr(x[1], o.x_ntc.data[0]))
    assert min(gaps) >= -0.1


# -- GoP loop ---------------------------------------------------------------------------


def _clip(seed=0, frames=4, speed=(4, 0)):
    return video.synth_video(video.ClipSpec(32, 32, frames, speed, pattern_seed=seed))


def test_two_frames_give_one_p_frame():
    res = run_gop(_clip(frames=2), CvstModel(), 0.12, 8.0, SeededRng(0))
    assert len(res.outputs) == 1 and len(res.ledgers) == 2 and res.frames.shape == (2, 3, 32, 32)


def test_test_gop_length_supported():
    res = run_gop(_clip(frames=12), CvstModel(), 0.12, 8.0, SeededRng(0), gop=GopConfig(frames=12))
    assert len(res.ledgers) == 12 and len(res.outputs) == 11
    assert all(led.cbr > 0 for led in res.ledgers)
    with pytest.raises(InvalidInput):
        run_gop(_clip(frames=3), CvstModel(), 0.12, 8.0, SeededRng(0), gop=GopConfig(frames=12))
    with pytest.raises(InvalidInput):
        run_gop(_clip(frames=1), CvstModel(), 0.12, 8.0, SeededRng(0))


def test_encoder_reference_is_decoded_latent(monkeypatch):
    model = CvstModel()
    seen = []
    original = CvstModel.p_frame

    def spy(self, x_cur, f_ref, *args, **kwargs):
        seen.append(np.array(f_ref, copy=True))
        return original(self, x_cur, f_ref, *args, **kwargs)

    monkeypatch.setattr(CvstModel, "p_frame", spy)
    x = _clip(frames=4)
    res = run_gop(x, model, 0.12, 4.0, SeededRng(1))
    assert len(seen) == 3
    for t, ref in enumerate(seen, start=1):
        assert ref[0].tobytes() == res.decoded_latents[t - 1].tobytes()
        with no_grad():
            pristine = model.encode(x[t - 1:t]).data[0]
        assert not np.allclose(ref[0], pristine)


def test_gop_deterministic():
    model = CvstModel()
    a = run_gop(_clip(frames=3), model, 0.06, 6.0, SeededRng(9))
    b = run_gop(_clip(frames=3), model, 0.06, 6.0, SeededRng(9))
    assert a.frames.tobytes() == b.frames.tobytes()
    assert [led.k_total for led in a.ledgers] == [led.k_total for led in b.ledgers]


def test_unknown_lambda_rejected():
    with pytest.raises(InvalidInput):
        run_gop(_clip(frames=2), CvstModel(), 0.5, 8.0, SeededRng(0))


# -- statistical properties of the trained model ---------------------------------------------


def _first_p(model, frames, seed, snr=14.0):
    res = run_gop(frames, model, 0.12, snr, SeededRng(seed, 1))
    return res, video.psnr(frames[1], res.frames[1])


@pytest.fixture(scope="module")
def static_vs_moving(trained):
    model, _ = trained
    rows = []
    for sd in range(20):
        still = video.synth_video(video.ClipSpec(32, 32, 1, (0, 0), noise=0.0, pattern_seed=sd))
        static = np.concatenate([still, still])
        moving = video.synth_video(video.ClipSpec(32, 32, 2, (4, 0), pattern_seed=sd))
        rs, ps = _first_p(model, static, sd)
        rm, pm = _first_p(model, moving, sd)
        rows.append(dict(ps=ps, pm=pm, cs=rs.ledgers[1].cbr, cm=rm.ledgers[1].cbr,
                         kvs=int(rs.outputs[0].k_v.sum()), kvm=int(rm.outputs[0].k_v.sum()),
                         groups=rs.outputs[0].k_v.size))
    return rows


def test_static_clip_beats_moving_clip(static_vs_moving):
    rows = static_vs_moving
    d = np.array([r["ps"] - r["pm"] for r in rows])
    lower = d.mean() - 1.6449 * d.std(ddof=1) / np.sqrt(d.size)
    assert lower > 0
    # the static clip gets there without spending more bandwidth
    assert np.mean([r["cs"] for r in rows]) <= np.mean([r["cm"] for r in rows])


def test_static_clip_motion_rate_below_moving(static_vs_moving):
    rows = static_vs_moving
    assert np.mean([r["kvs"] for r in rows]) < np.mean([r["kvm"] for r in rows])


@pytest.mark.xfail(strict=True, reason="the learned motion entropy model keeps some mass away from an exact "
                                       "zero field; k_v stays above one symbol per group (see the decisions ledger)")
def test_static_clip_motion_rate_at_floor(static_vs_moving):
    assert all(r["kvs"] == r["groups"] for r in static_vs_moving)


def test_reference_ablation_raises_rate(trained):
    model, _ = trained
    li = model.lam_index(0.12)
    on, off = [], []
    for sd in range(20):
        x = _clip(sd, frames=2)
        r = SeededRng(sd, 5)
        state = channel_state(r.spawn("s"), ChannelSpec(2, 2, 10.0))
        f, _, _ = model.i_frame(x[:1], [state], [r.spawn("i")])
        with no_grad():
            for disable, acc in (((), on), (("ch", "lc"), off)):
                o = model.p_frame(x[1:2], f, li, 10.0, [state], [r.spawn("p")], disable=disable)
                acc.append(o.rate_c.data.sum())
    assert np.mean(on) < np.mean(off)


def _empirical_bits(a):
    _, counts = np.unique(a, return_counts=True)
    p = counts / counts.sum()
    return float(-(p * np.log2(p)).sum() * a.size)


def test_context_lowers_rate(trained):
    """First-order empirical entropy of the quantized context vs the quantized current latent."""
    model, _ = trained
    cfg = model.cfg
    q_a, q_na = (t.data for t in model.q_tensors(model.lam_index(0.12)))
    div = np.where(model._anchor_col, q_a, q_na)
    cond, uncond = [], []
    for sd in range(20):
        x = _clip(sd, frames=2)
        with no_grad():
            f_ref = model.encode(x[:1]).data
            f_cur = model.encode(x[1:2])
            v = _estimate_positions(f_cur.data, f_ref, cfg.hp, cfg.wp, cfg.radius, cfg.motion_bias)
            c = model.context(f_cur, Tensor(_compensate_positions(f_ref, v, cfg.hp, cfg.wp))).data[0]
        cond.append(sum(_empirical_bits(round_half_away(c[:, l] / div[:, l])) for l in range(cfg.channels)))
        uncond.append(sum(_empirical_bits(round_half_away(f_cur.data[0, :, l] / div[:, l]))
                          for l in range(cfg.channels)))
    assert np.mean(cond) < np.mean(uncond)
