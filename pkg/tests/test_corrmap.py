import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvst.corrmap import EmbeddingHead, build_map, canonical_csi_features
from cvst.errors import GatherMismatch
from cvst.latent import GroupPartition
from cvst.mimo import ChannelSpec, SvdPrecoder, sample_rayleigh
from cvst.numerics import ParamStore, SeededRng, Tensor, no_grad, softmax


def _setup(L=64, m=4, n_tx=8, seed=0):
    rng = SeededRng(seed)
    heads = EmbeddingHead(ParamStore(), GroupPartition(L, m), n_tx, rng=rng.spawn("heads"))
    H = sample_rayleigh(rng.spawn("H"), ChannelSpec(n_tx, n_tx))
    c = rng.normal(size=(L, 4, 4))
    return heads, H, SvdPrecoder.from_channel(H), c


def test_full_size_shape_two_gathers():
    heads, H, pre, c = _setup()
    cmap = build_map(c, H, pre, heads)
    assert cmap.scores.shape == (16, 8)
    assert cmap.gathers.shape == (2, 8, 8)
    assert cmap.tau == pytest.approx(0.07)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**32))
def test_column_stochastic_within_gathers(seed):
    heads, H, pre, c = _setup(seed=seed)
    g = build_map(c, H, pre, heads).gathers
    np.testing.assert_allclose(g.sum(axis=1), 1.0, atol=1e-9)
    assert np.all((g > 0) & (g < 1))


def test_identical_group_embeddings_give_uniform_map():
    heads, H, pre, _ = _setup(L=16, m=2, n_tx=4)
    c = np.ones((16, 3, 3))  # every group pools to the same vector
    cmap = build_map(c, H, pre, heads)
    np.testing.assert_allclose(cmap.scores, 1.0 / 4, atol=1e-12)


def test_lower_temperature_is_sharper():
    logits = Tensor(SeededRng(1).normal(size=(8, 8)))
    with no_grad():
        sharp = softmax(logits / 0.07, axis=0).data
        soft = softmax(logits / 1.0, axis=0).data
    assert np.all(sharp.max(axis=0) > soft.max(axis=0))
    heads, H, pre, c = _setup()
    assert build_map(c, H, pre, heads, tau=0.07).scores.max() > build_map(c, H, pre, heads, tau=1.0).scores.max()


def test_temperature_clamped():
    heads, H, pre, c = _setup()
    assert build_map(c, H, pre, heads, tau=1e-5).tau == 0.01
    assert build_map(c, H, pre, heads, tau=5.0).tau == 1.0
    assert float(heads.tau.data) == pytest.approx(0.07)  # override does not leak


def test_deterministic():
    heads, H, pre, c = _setup()
    assert build_map(c, H, pre, heads).scores.tobytes() == build_map(c, H, pre, heads).scores.tobytes()


def test_permutation_equivariance():
    heads, H, pre, c = _setup(L=16, m=2, n_tx=4, seed=3)
    perm = np.array([2, 0, 3, 1])
    csi = canonical_csi_features(pre)
    ct = Tensor(c.reshape(16, -1).T[None])
    with no_grad():
        e_h = heads.csi_embeddings(csi[None])
        base = heads.scores(ct, csi[None], e_h).data[0]
        permuted = heads.scores(ct, csi[None], Tensor(e_h.data[:, perm])).data[0]
    np.testing.assert_allclose(permuted, base[:, perm], atol=1e-15)


def test_canonical_features_remove_phase_freedom():
    _, H, pre, _ = _setup(L=16, m=2, n_tx=4)
    phases = np.exp(1j * SeededRng(4).uniform(0, 2 * np.pi, 4))
    rotated = SvdPrecoder(pre.U * phases, pre.lam, pre.V * phases)
    np.testing.assert_allclose(canonical_csi_features(rotated), canonical_csi_features(pre), atol=1e-12)


def test_gather_mismatch():
    with pytest.raises(GatherMismatch):
        EmbeddingHead(ParamStore(), GroupPartition(12, 4), 2)
