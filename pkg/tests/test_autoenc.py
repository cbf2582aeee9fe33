import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given, settings, strategies as st

from flow4d.autoenc import (AeConfig, AutoencoderModel, from_patches, linear_upsample_matrix, one_hot,
                            reconstruction_loss, stack_labels, to_patches, train_autoencoder, upsample)
from flow4d.diffnet import DimensionError
from flow4d.phantom import LabelGrid

from conftest import SMALL_DIMS
from gradcheck import check_gradients

TINY = AeConfig(latent_channels=2, hidden=32, epochs=3, batch_size=4)
D = 2 * 2 * 2 * 3   # channels x blocks on the small grid


def zero_model(dims=SMALL_DIMS, config=TINY):
    m = AutoencoderModel(dims, config, seed=0)
    with torch.no_grad():
        for _, p in m.params.items():
            p.zero_()
    return m


def test_patch_layout_roundtrip(rng):
    x = torch.as_tensor(rng.normal(size=(2, 8, 12, 16, 3)))
    p = to_patches(x, 4)
    assert p.shape == (2, 2 * 3 * 4, 64, 3)
    # first patch is the corner block
    assert torch.equal(p[0, 0].reshape(4, 4, 4, 3), x[0, :4, :4, :4])
    assert torch.equal(from_patches(p, (8, 12, 16), 4), x)


def test_separable_upsampling_matches_trilinear(rng):
    x = torch.as_tensor(rng.normal(size=(2, 3, 4, 5, 6)))
    mats = [linear_upsample_matrix(2 * n, n) for n in (4, 5, 6)]
    ref = F.interpolate(x, scale_factor=2, mode="trilinear", align_corners=False)
    assert torch.allclose(upsample(x, mats), ref, atol=1e-12)


def test_upsample_rows_are_convex_weights():
    m = linear_upsample_matrix(40, 10).numpy()
    assert np.allclose(m.sum(axis=1), 1.0) and m.min() >= 0


def test_zero_weight_encoder_gives_zero_latent(small_grids):
    z = zero_model().encode(small_grids[0])
    assert z.shape == (D,)
    assert np.all(z == 0)


def test_zero_weight_decoder_is_uniform():
    probs, grid = zero_model().decode(np.ones(D))
    assert probs.shape == (*SMALL_DIMS, 6)
    assert np.allclose(probs, 1 / 6, atol=1e-15)
    # ties break to the lowest class id
    assert np.all(grid.labels == 0)


def test_untrained_zero_loss_is_ln6(small_grids):
    loss = reconstruction_loss(zero_model(), stack_labels(small_grids[:3])).item()
    assert loss == pytest.approx(np.log(6), abs=1e-12)


def test_encode_is_deterministic_and_checks_dims(small_grids):
    m = AutoencoderModel(SMALL_DIMS, TINY, seed=3)
    assert np.array_equal(m.encode(small_grids[0]), m.encode(small_grids[0]))
    assert m.encode(small_grids[:5]).shape == (5, D)
    with pytest.raises(DimensionError, match="16, 16, 24"):
        m.encode(LabelGrid(np.zeros((16, 16, 16), np.uint8)))


def test_decode_rejects_bad_latents():
    m = AutoencoderModel(SMALL_DIMS, TINY, seed=3)
    with pytest.raises(ValueError):
        m.decode(np.full(D, np.nan))
    with pytest.raises(DimensionError):
        m.decode(np.zeros(D + 1))


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2 ** 31), st.floats(0.1, 30))
def test_decode_is_a_probability_simplex(seed, scale):
    m = AutoencoderModel(SMALL_DIMS, TINY, seed=seed % 97)
    z = np.random.default_rng(seed).normal(size=D) * scale
    probs, grid = m.decode(z)
    assert probs.min() >= 0
    assert np.abs(probs.sum(axis=-1) - 1).max() < 1e-9
    assert np.array_equal(grid.labels, np.argmax(probs, axis=-1))
    # dimensional closure
    assert m.encode(grid).shape == (D,)


@pytest.mark.parametrize("seed", range(5))
def test_gradients_match_finite_differences(small_grids, seed):
    m = AutoencoderModel(SMALL_DIMS, TINY, seed=seed)
    labels = stack_labels(small_grids[seed:seed + 2])
    assert check_gradients(m.params, lambda: reconstruction_loss(m, labels), max_entries=8,
                           rng=np.random.default_rng(seed)) < 1e-4


def test_overfits_a_single_grid(small_grids):
    cfg = AeConfig(latent_channels=2, hidden=64, epochs=150, batch_size=1, lr=2e-3)
    hist = []
    m = train_autoencoder(small_grids[:1], cfg, seed=0, history=hist)
    assert hist[-1] < 0.1 * np.log(6)
    assert reconstruction_loss(m, stack_labels(small_grids[:1])).item() < 0.1 * np.log(6)


def test_training_loss_trend_and_determinism(small_grids, tmp_path):
    cfg = AeConfig(latent_channels=2, hidden=32, epochs=25, batch_size=4, lr=2e-3)
    h1, h2 = [], []
    a = train_autoencoder(small_grids, cfg, seed=5, history=h1)
    b = train_autoencoder(small_grids, cfg, seed=5, history=h2)
    assert h1 == h2 and len(h1) == cfg.epochs
    avg = np.convolve(h1, np.ones(10) / 10, mode="valid")
    assert np.all(np.diff(avg) <= 1e-12)
    a.save(tmp_path / "a.ckpt")
    b.save(tmp_path / "b.ckpt")
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_roundtrip(small_grids, tmp_path):
    m = train_autoencoder(small_grids[:4], AeConfig(latent_channels=2, hidden=32, epochs=2), seed=1)
    m.save(tmp_path / "ae.ckpt")
    back = AutoencoderModel.load(tmp_path / "ae.ckpt")
    assert back.dims == m.dims
    for key in ("latent_channels", "hidden", "patch", "block", "field_stride", "activation"):
        assert getattr(back.config, key) == getattr(m.config, key)
    z = m.encode(small_grids[:4])
    assert np.array_equal(back.encode(small_grids[:4]), z)
    assert np.array_equal(back.standardize(z), m.standardize(z))
    assert np.allclose(m.destandardize(m.standardize(z)), z)


def test_standardized_training_latents_are_unit_scale(small_grids):
    m = train_autoencoder(small_grids, AeConfig(latent_channels=2, hidden=32, epochs=2), seed=1)
    s = m.standardize(m.encode(small_grids))
    assert np.allclose(s.mean(axis=0), 0, atol=1e-9)
    assert np.allclose(s.std(axis=0), 1, atol=1e-6)


def test_empty_dataset_rejected():
    with pytest.raises(ValueError):
        train_autoencoder([], TINY)


def test_latent_layout_is_channel_major():
    m = AutoencoderModel(SMALL_DIMS, TINY, seed=0)
    assert m.latent_dim == D and m.block_grid == (2, 2, 3)
    with pytest.raises(DimensionError):
        AutoencoderModel((16, 16, 20), TINY)


def test_decoder_is_local(small_grids):
    # a latent change in one corner block leaves logits of the far corner untouched
    m = AutoencoderModel(SMALL_DIMS, TINY, seed=1)
    z = m.encode(small_grids[0])
    z2 = z.copy()
    z2[0] += 5.0
    a, b = m.class_logits(z), m.class_logits(z2)
    assert not torch.equal(a[..., :4, :4, :4], b[..., :4, :4, :4])
    assert torch.equal(a[..., -4:, -4:, -4:], b[..., -4:, -4:, -4:])


def test_one_hot_shape():
    assert one_hot(np.array([[0, 5]]), 6).shape == (1, 2, 6)
