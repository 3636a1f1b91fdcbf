import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from cascadeflow.codec import CodecConfig, ShapeError, decode, encode, mixing_matrix


def test_mixing_matrix_orthonormal():
    for cfg in (CodecConfig(), CodecConfig(spatial_ratio=8, temporal_ratio=4, channels=3, seed=5)):
        m = mixing_matrix(cfg)
        gram = m @ m.T
        assert torch.allclose(gram, torch.eye(cfg.latent_channels, dtype=m.dtype), atol=1e-6)


def test_latent_channels_from_patch_volume():
    assert CodecConfig().latent_channels == 1 * 2 * 2 * 2
    assert CodecConfig(spatial_ratio=8, temporal_ratio=4, channels=3).latent_channels == 3 * 64 * 4


def test_reference_shape_law():
    cfg = CodecConfig(spatial_ratio=8, temporal_ratio=4)
    t, h, w, _ = cfg.latent_shape(49, 1080, 1920)
    assert (t, h, w) == (13, 135, 240)


def test_reference_shape_law_on_tensor():
    cfg = CodecConfig(spatial_ratio=8, temporal_ratio=4)
    z = encode(torch.zeros(9, 16, 24, 1), cfg)
    assert z.shape == (3, 2, 3, 256)


def test_zero_video_maps_to_zero_latent():
    cfg = CodecConfig()
    z = encode(torch.zeros(1, 2, 2, 1), cfg)
    assert z.shape == (1, 1, 1, cfg.latent_channels)
    assert torch.count_nonzero(z) == 0
    assert torch.count_nonzero(decode(torch.zeros(2, 3, 3, 8), cfg)) == 0


def test_energy_preserved_against_gram_oracle():
    cfg = CodecConfig()
    m = mixing_matrix(cfg)
    # the oracle: orthonormal iff the Gram product is the identity
    assert torch.max(torch.abs(m.T @ m - torch.eye(8, dtype=m.dtype))) < 1e-12
    v = torch.rand(5, 8, 6, 1, dtype=torch.float64, generator=torch.Generator().manual_seed(3)) * 2 - 1
    z = encode(v, cfg)
    assert abs(z.pow(2).sum().item() - v.pow(2).sum().item()) < 1e-6


def test_roundtrip_sweep_100_seeds():
    cfg = CodecConfig()
    worst = 0.0
    for seed in range(100):
        v = torch.rand(5, 8, 8, 1, generator=torch.Generator().manual_seed(seed)) * 2 - 1
        worst = max(worst, (decode(encode(v, cfg), cfg) - v).abs().max().item())
    assert worst < 1e-6


def test_batched_matches_unbatched():
    cfg = CodecConfig()
    v = torch.rand(3, 5, 4, 4, 1, dtype=torch.float64)
    batched = encode(v, cfg)
    for i in range(3):
        assert torch.equal(batched[i], encode(v[i], cfg))


@pytest.mark.parametrize(
    "shape, fragment",
    [((4, 8, 8, 1), "T - 1"), ((5, 7, 8, 1), "H = 7"), ((5, 8, 9, 1), "W = 9"), ((5, 8, 8, 2), "channels")],
)
def test_shape_violations_rejected(shape, fragment):
    with pytest.raises(ShapeError, match=fragment):
        encode(torch.zeros(shape), CodecConfig())


def test_decode_rejects_wrong_channels():
    with pytest.raises(ShapeError):
        decode(torch.zeros(2, 2, 2, 5), CodecConfig())


def test_encode_rejects_non_finite():
    v = torch.zeros(3, 4, 4, 1)
    v[1, 2, 2, 0] = float("nan")
    with pytest.raises(ValueError, match="non-finite"):
        encode(v, CodecConfig())


@settings(max_examples=40, deadline=None)
@given(
    s=st.sampled_from([1, 2, 4]),
    r=st.sampled_from([1, 2, 4]),
    t=st.integers(1, 3),
    hw=st.tuples(st.integers(1, 3), st.integers(1, 3)),
    ch=st.integers(1, 2),
    seed=st.integers(0, 2**16),
)
def test_roundtrip_and_energy_any_ratios(s, r, t, hw, ch, seed):
    cfg = CodecConfig(spatial_ratio=s, temporal_ratio=r, channels=ch, seed=seed % 7)
    T, H, W = (t - 1) * r + 1, hw[0] * s, hw[1] * s
    v = torch.from_numpy(np.random.default_rng(seed).uniform(-1, 1, (T, H, W, ch)))
    z = encode(v, cfg)
    assert z.shape == (t, hw[0], hw[1], cfg.latent_channels)
    assert (decode(z, cfg) - v).abs().max() < 1e-6
    assert abs(z.pow(2).sum() - v.pow(2).sum()) < 1e-6
