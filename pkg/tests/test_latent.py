import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvst.errors import GatherMismatch, InvalidModulation, NotDivisible, ShapeMismatch
from cvst.latent import (GroupPartition, ModulationTerm, anchor_mask, checkerboard_merge, checkerboard_split,
                         demodulate, modulate, quantize_or_noise, round_half_away, split_groups)
from cvst.numerics import SeededRng


def test_split_groups_counts():
    assert GroupPartition(64, 4).groups == 16
    assert GroupPartition(64, 4, 8).gathers == 2
    f = SeededRng(0).normal(size=(8, 3, 3))
    groups = split_groups(f, GroupPartition(8, 8))
    assert len(groups) == 1 and np.array_equal(groups[0], f)


def test_split_groups_concatenation_reproduces_map():
    f = SeededRng(1).normal(size=(2, 12, 4, 5))
    groups = split_groups(f, GroupPartition(12, 3))
    assert np.array_equal(np.concatenate(groups, axis=-3), f)
    assert np.array_equal(groups[2], f[:, 6:9])


def test_split_groups_errors():
    with pytest.raises(NotDivisible):
        GroupPartition(8, 3)
    with pytest.raises(GatherMismatch):
        GroupPartition(12, 4, 2)  # 3 groups over 2 subchannels
    with pytest.raises(ShapeMismatch):
        split_groups(np.zeros((4, 2, 2)), GroupPartition(8, 4))


def test_checkerboard_2x2():
    assert np.array_equal(anchor_mask(2, 2), [[True, False], [False, True]])
    f = np.arange(4.0).reshape(1, 2, 2)
    a, na = checkerboard_split(f)
    assert a.tolist() == [[0.0, 3.0]] and na.tolist() == [[1.0, 2.0]]


def test_checkerboard_4x4_counts_and_roundtrip():
    f = SeededRng(2).normal(size=(4, 4, 4))
    a, na = checkerboard_split(f)
    assert a.shape == (4, 8) and na.shape == (4, 8)
    assert np.array_equal(checkerboard_merge(a, na, 4, 4), f)


@settings(max_examples=50, deadline=None)
@given(h=st.integers(1, 9), w=st.integers(1, 9), seed=st.integers(0, 2**32))
def test_checkerboard_partition_property(h, w, seed):
    m = anchor_mask(h, w)
    assert m.sum() + (~m).sum() == h * w
    assert abs(int(m.sum()) - int((~m).sum())) <= 1
    f = SeededRng(seed).normal(size=(3, h, w))
    assert checkerboard_merge(*checkerboard_split(f), h, w).tobytes() == f.tobytes()


def test_checkerboard_merge_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        checkerboard_merge(np.zeros((2, 3)), np.zeros((2, 2)), 2, 2)


def test_round_ties_away_from_zero():
    assert round_half_away(0.5) == 1.0 and round_half_away(-0.5) == -1.0
    assert np.array_equal(round_half_away([1.5, -2.5, 0.49, -0.49]), [2.0, -3.0, 0.0, -0.0])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=20))
def test_round_error_at_most_half(xs):
    x = np.array(xs)
    assert np.all(np.abs(quantize_or_noise(x, "round") - x) <= 0.5)


def test_noise_mode_bounds_and_mean():
    x = SeededRng(3).normal(0, 5, 100_000)
    y = quantize_or_noise(x, "noise", SeededRng(4))
    d = y - x
    assert np.all((d >= -0.5) & (d < 0.5))
    assert abs(d.mean()) <= 0.01


def test_quantize_unknown_mode():
    with pytest.raises(ValueError):
        quantize_or_noise(np.zeros(2), "floor")


def test_modulation_identity_and_arithmetic():
    f = SeededRng(5).normal(size=(3, 4, 4))
    assert np.array_equal(modulate(f, ModulationTerm.identity(3)), f)
    q = ModulationTerm(2.0, np.full(3, 0.5), np.full(3, 4.0))
    np.testing.assert_array_equal(q.q_a, np.ones(3))
    out = modulate(f, q)
    mask = anchor_mask(4, 4)
    assert np.array_equal(out[:, mask], f[:, mask])
    np.testing.assert_allclose(out[:, ~mask], f[:, ~mask] / 8.0)


def test_modulation_round_trip_exact():
    rng = SeededRng(6)
    f = rng.normal(size=(5, 6, 7))
    q = ModulationTerm(1.0, rng.uniform(0.5, 2.0, 5), rng.uniform(0.5, 2.0, 5))
    back = demodulate(modulate(f, q), q)
    np.testing.assert_allclose(back, f, rtol=1e-15, atol=0)


def test_power_of_two_modulation_is_bit_exact():
    f = SeededRng(7).normal(size=(2, 3, 3))
    q = ModulationTerm(0.5, np.array([2.0, 4.0]), np.array([0.25, 8.0]))
    assert demodulate(modulate(f, q), q).tobytes() == f.tobytes()


@pytest.mark.parametrize("args", [(0.0, [1.0], [1.0]), (1.0, [-1.0], [1.0]), (1.0, [1.0, 1.0], [1.0])])
def test_invalid_modulation(args):
    with pytest.raises(InvalidModulation):
        ModulationTerm(args[0], np.array(args[1]), np.array(args[2]))


def test_modulation_channel_mismatch():
    with pytest.raises(ShapeMismatch):
        modulate(np.zeros((3, 2, 2)), ModulationTerm.identity(2))
