import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ztts.wavegan import (
    DecoderConfig,
    Encoder,
    EncoderConfig,
    LatentPosterior,
    PitchPredictorConfig,
    WaveGAN,
    kl_loss,
    pitch_loss,
    sample_latent,
)
from ztts.signal_core import extract_pitch, latent_frame_count, Waveform


def tiny_model(latent_dim=16) -> WaveGAN:
    torch.manual_seed(0)
    return WaveGAN(
        EncoderConfig(down_factors=(2, 4, 4, 8), down_channels=(4, 4, 8, 8),
                      latent_dim=latent_dim, stem_channels=4),
        DecoderConfig(up_factors=(8, 4, 4, 2), up_channels=(8, 8, 4, 4),
                      in_channels=latent_dim, stem_channels=8),
        PitchPredictorConfig(in_channels=latent_dim, hidden_channels=8),
    )


# -- shapes -----------------------------------------------------------------


def test_encode_full_size_shape():
    torch.manual_seed(0)
    model = WaveGAN()
    post = model.encode(torch.randn(1, 1, 25600) * 0.1)
    assert post.frames == 100
    assert post.mu.shape == (1, 256, 100)
    assert post.log_sigma.shape == (1, 256, 100)


def test_encode_pads_to_frame_boundary():
    model = tiny_model()
    assert model.encode(torch.randn(1, 1, 25601) * 0.1).frames == 101
    assert model.encode(torch.randn(1, 1, 256)).frames == 1


def test_encode_rejects_short_input():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.encode(torch.randn(1, 1, 255))


def test_encode_deterministic():
    model = tiny_model()
    x = torch.randn(1, 1, 2048)
    a = model.encode(x)
    b = model.encode(x)
    assert torch.equal(a.mu, b.mu) and torch.equal(a.log_sigma, b.log_sigma)


def test_decode_length_and_bounds():
    model = tiny_model()
    z = torch.randn(1, 16, 100)
    with torch.no_grad():
        out = model.decode(z)
    assert out.shape == (1, 1, 25600)
    assert float(out.abs().max()) <= 1.0
    assert torch.equal(model.decode(z), model.decode(z))


def test_decode_rejects_wrong_channels():
    model = tiny_model()
    with pytest.raises(ValueError):
        model.decode(torch.randn(1, 7, 10))


@settings(max_examples=15, deadline=None)
@given(st.integers(256, 6000))
def test_shape_duality(n_samples):
    model = tiny_model()
    x = torch.randn(1, 1, n_samples) * 0.1
    post = model.encode(x)
    assert post.frames == latent_frame_count(n_samples)
    z = sample_latent(post, torch.Generator().manual_seed(0))
    out = model.decode(z)
    assert out.shape[-1] == 256 * latent_frame_count(n_samples)


def test_pitch_frames_match_encoder_frames():
    model = tiny_model()
    rng = np.random.default_rng(0)
    for n in (2048, 5000, 12345):
        samples = (rng.standard_normal(n) * 0.2).astype(np.float32)
        track = extract_pitch(Waveform(samples, 8000), hop_size=256)
        post = model.encode(torch.from_numpy(samples)[None, None])
        assert len(track) == post.frames


# -- sampling ---------------------------------------------------------------


def test_sample_latent_degenerate_scale():
    mu = torch.randn(1, 4, 3)
    post = LatentPosterior(mu, torch.full((1, 4, 3), -20.0))
    z = sample_latent(post, torch.Generator().manual_seed(0))
    assert torch.allclose(z, mu, atol=1e-8)


def test_sample_latent_seeded_reproducible():
    post = LatentPosterior(torch.zeros(1, 4, 5), torch.zeros(1, 4, 5))
    a = sample_latent(post, torch.Generator().manual_seed(3))
    b = sample_latent(post, torch.Generator().manual_seed(3))
    assert torch.equal(a, b)


def test_sample_latent_monte_carlo_mean():
    mu = torch.tensor([[[0.5], [-1.0], [2.0], [0.0]]])
    log_sigma = torch.tensor([[[0.0], [-0.5], [0.3], [0.1]]])
    post = LatentPosterior(mu.expand(100000, 4, 1), log_sigma.expand(100000, 4, 1))
    z = sample_latent(post, torch.Generator().manual_seed(1234))
    mean = z.mean(dim=0).squeeze()
    tol = 3.0 * log_sigma.exp().squeeze() / math.sqrt(100000)
    assert torch.all((mean - mu.squeeze()).abs() <= tol)


def test_sample_latent_is_differentiable():
    mu = torch.randn(1, 3, 2, requires_grad=True)
    log_sigma = torch.randn(1, 3, 2, requires_grad=True)
    z = sample_latent(LatentPosterior(mu, log_sigma), torch.Generator().manual_seed(0))
    z.sum().backward()
    assert mu.grad is not None and torch.all(mu.grad == 1.0)
    assert log_sigma.grad is not None


# -- losses -----------------------------------------------------------------


def test_kl_closed_forms():
    assert float(kl_loss(LatentPosterior(torch.zeros(1, 4, 4), torch.zeros(1, 4, 4)))) == 0.0
    one = LatentPosterior(torch.ones(1, 1, 1), torch.zeros(1, 1, 1))
    assert float(kl_loss(one)) == pytest.approx(0.5, abs=1e-7)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_kl_non_negative(seed):
    g = torch.Generator().manual_seed(seed)
    post = LatentPosterior(torch.randn(1, 8, 4, generator=g) * 2,
                           torch.randn(1, 8, 4, generator=g))
    assert float(kl_loss(post)) >= 0.0


def test_kl_matches_monte_carlo():
    # E_q[log q - log p] estimated with 10^6 samples on a 4-channel posterior
    g = torch.Generator().manual_seed(7)
    mu = torch.randn(1, 4, 1, generator=g)
    log_sigma = torch.randn(1, 4, 1, generator=g) * 0.5
    post = LatentPosterior(mu, log_sigma)
    closed = float(kl_loss(post))

    n = 10 ** 6
    eps = torch.randn(n, 4, generator=torch.Generator().manual_seed(99), dtype=torch.float64)
    mu64 = mu.double().squeeze()
    sig64 = log_sigma.double().exp().squeeze()
    z = mu64 + sig64 * eps
    log_q = -0.5 * (math.log(2 * math.pi) + 2 * log_sigma.double().squeeze() + eps ** 2)
    log_p = -0.5 * (math.log(2 * math.pi) + z ** 2)
    mc = float((log_q - log_p).sum(dim=1).mean() / 4)
    assert closed == pytest.approx(mc, rel=0.01)


def test_pitch_loss_identity_and_offset():
    target = torch.randn(1, 12)
    voicing = torch.ones(1, 12, dtype=torch.bool)
    loss, n = pitch_loss(target, target, voicing)
    assert float(loss) == 0.0 and n == 12
    loss, _ = pitch_loss(target + 0.1, target, voicing)
    assert float(loss) == pytest.approx(0.1, abs=1e-6)


def test_pitch_loss_no_voiced_frames():
    loss, n = pitch_loss(torch.randn(1, 5), torch.randn(1, 5), torch.zeros(1, 5, dtype=torch.bool))
    assert float(loss) == 0.0 and n == 0


def test_pitch_loss_masks_unvoiced():
    pred = torch.tensor([[1.0, 100.0]])
    target = torch.tensor([[1.5, 0.0]])
    voicing = torch.tensor([[True, False]])
    loss, n = pitch_loss(pred, target, voicing)
    assert float(loss) == pytest.approx(0.5) and n == 1


def test_pitch_loss_frame_mismatch():
    with pytest.raises(ValueError):
        pitch_loss(torch.zeros(1, 4), torch.zeros(1, 5), torch.zeros(1, 5, dtype=torch.bool))


# -- gradient flow ----------------------------------------------------------


def test_pitch_gradient_reaches_encoder_unless_stopped():
    model = tiny_model()
    x = torch.randn(1, 1, 1024)
    for stopped in (False, True):
        model.zero_grad()
        post = model.encode(x)
        z = sample_latent(post, torch.Generator().manual_seed(0))
        pred = model.predict_pitch(z, stop_gradient=stopped)
        loss, _ = pitch_loss(pred, torch.zeros_like(pred) + 5.0,
                             torch.ones_like(pred, dtype=torch.bool))
        loss.backward()
        grads = [p.grad for p in model.encoder.parameters()]
        total = sum(float(g.abs().sum()) for g in grads if g is not None)
        if stopped:
            assert total == 0.0
        else:
            assert total > 0.0


def test_losses_match_finite_differences():
    # tiny single-stage model in double precision
    torch.manual_seed(1)
    model = WaveGAN(
        EncoderConfig(down_factors=(4,), down_channels=(6,), latent_dim=8, stem_channels=4,
                      kernel_size=3, dilations=(1,)),
        DecoderConfig(up_factors=(4,), up_channels=(6,), in_channels=8, stem_channels=6,
                      kernel_size=3, dilations=(1,)),
        PitchPredictorConfig(in_channels=8, hidden_channels=4, kernel_size=3),
    ).double()
    x = torch.randn(1, 1, 64, dtype=torch.float64)
    eps = torch.randn(1, 8, 16, dtype=torch.float64)
    target_lf0 = torch.randn(1, 16, dtype=torch.float64)
    voicing = torch.ones(1, 16, dtype=torch.bool)

    def total_loss(wave):
        post = model.encoder(wave)
        z = post.mu + post.sigma * eps
        w_hat = model.decoder(z)
        pred = model.pitch_predictor(z)
        pl, _ = pitch_loss(pred, target_lf0, voicing)
        return kl_loss(post) + pl + (w_hat - wave).pow(2).mean()

    x_in = x.clone().requires_grad_(True)
    assert torch.autograd.gradcheck(total_loss, (x_in,), eps=1e-6, atol=1e-5, rtol=1e-3)
