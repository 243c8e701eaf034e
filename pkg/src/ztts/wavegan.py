"""Waveform variational autoencoder.

Encoder maps raw audio to per-frame diagonal-Gaussian statistics over a
256-channel latent; the decoder mirrors it back to audio through
transposed convolutions; a small pitch head predicts log-F0 from sampled
latents. Losses here are the VAE-side terms (KL, pitch); reconstruction
and adversarial terms live in signal_core and adversary.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .signal_core import DOWNSAMPLE_FACTOR

LOG_SIGMA_RANGE = (-9.0, 2.0)


@dataclass(frozen=True)
class EncoderConfig:
    down_factors: tuple[int, ...] = (2, 4, 4, 8)
    down_channels: tuple[int, ...] = (128, 128, 256, 512)
    latent_dim: int = 256
    stem_channels: int = 64
    kernel_size: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)

    def __post_init__(self):
        if len(self.down_factors) != len(self.down_channels):
            raise ValueError("down_factors and down_channels must have equal length")

    @property
    def total_factor(self) -> int:
        return math.prod(self.down_factors)


@dataclass(frozen=True)
class DecoderConfig:
    up_factors: tuple[int, ...] = (8, 4, 4, 2)
    up_channels: tuple[int, ...] = (256, 128, 128, 64)
    in_channels: int = 256  # latent dim, or mel bands in the mel-conditioned mode
    stem_channels: int = 512
    kernel_size: int = 7
    dilations: tuple[int, ...] = (1, 3, 9)

    def __post_init__(self):
        if len(self.up_factors) != len(self.up_channels):
            raise ValueError("up_factors and up_channels must have equal length")

    @property
    def total_factor(self) -> int:
        return math.prod(self.up_factors)


@dataclass(frozen=True)
class PitchPredictorConfig:
    in_channels: int = 256
    hidden_channels: int = 128
    kernel_size: int = 5


class ResidualStack(nn.Module):
    """Dilated residual units growing the receptive field within a stage."""

    def __init__(self, channels: int, kernel_size: int, dilations: tuple[int, ...]):
        super().__init__()
        self.units = nn.ModuleList()
        for d in dilations:
            self.units.append(
                nn.Sequential(
                    nn.LeakyReLU(0.2),
                    nn.Conv1d(channels, channels, kernel_size, dilation=d,
                              padding=(kernel_size - 1) * d // 2),
                    nn.LeakyReLU(0.2),
                    nn.Conv1d(channels, channels, 1),
                )
            )

    def forward(self, x):
        for unit in self.units:
            x = x + unit(x)
        return x


@dataclass
class LatentPosterior:
    """Per-frame Gaussian statistics q(z | w) = N(mu, diag(sigma^2))."""

    mu: torch.Tensor  # [B, C, T]
    log_sigma: torch.Tensor  # [B, C, T]

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValueError("mu and log_sigma must have matching shapes")

    @property
    def sigma(self) -> torch.Tensor:
        return self.log_sigma.exp()

    @property
    def frames(self) -> int:
        return self.mu.shape[-1]


def sample_latent(post: LatentPosterior, generator: torch.Generator | None = None) -> torch.Tensor:
    """Reparameterized sample z = mu + sigma * eps, eps ~ N(0, I)."""
    eps = torch.randn(post.mu.shape, generator=generator,
                      dtype=post.mu.dtype, device=post.mu.device)
    return post.mu + post.sigma * eps


def kl_loss(post: LatentPosterior) -> torch.Tensor:
    """Mean KL(q || N(0, I)) per element of the posterior."""
    return (0.5 * (post.mu.pow(2) + post.sigma.pow(2) - 1.0 - 2.0 * post.log_sigma)).mean()


def pitch_loss(
    pred: torch.Tensor, target_log_f0: torch.Tensor, voicing: torch.Tensor
) -> tuple[torch.Tensor, int]:
    """RMS log-F0 error over voiced frames.

    Returns (loss, voiced_frame_count); a count of zero flags that no frame
    carried pitch and the loss is identically zero.
    """
    if pred.shape != target_log_f0.shape or pred.shape != voicing.shape:
        raise ValueError(
            f"frame-count mismatch: pred {tuple(pred.shape)},"
            f" target {tuple(target_log_f0.shape)}, voicing {tuple(voicing.shape)}"
        )
    mask = voicing.bool()
    n_voiced = int(mask.sum())
    if n_voiced == 0:
        return pred.new_zeros(()), 0
    diff = (pred - target_log_f0)[mask]
    return diff.pow(2).mean().sqrt(), n_voiced


class Encoder(nn.Module):
    """Strided convolution stack with residual blocks down to latent stats."""

    def __init__(self, cfg: EncoderConfig = EncoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv1d(1, cfg.stem_channels, cfg.kernel_size,
                              padding=cfg.kernel_size // 2)
        blocks = []
        prev = cfg.stem_channels
        for factor, channels in zip(cfg.down_factors, cfg.down_channels):
            blocks.append(nn.Sequential(
                nn.LeakyReLU(0.2),
                nn.Conv1d(prev, channels, 2 * factor, stride=factor, padding=factor // 2),
                ResidualStack(channels, cfg.kernel_size, cfg.dilations),
            ))
            prev = channels
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(
            nn.LeakyReLU(0.2),
            nn.Conv1d(prev, 2 * cfg.latent_dim, cfg.kernel_size, padding=cfg.kernel_size // 2),
        )

    def forward(self, x: torch.Tensor) -> LatentPosterior:
        # x: [B, 1, T] with T a multiple of the total down-sampling factor
        h = self.stem(x)
        for block in self.blocks:
            h = block(h)
        stats = self.head(h)
        mu, log_sigma = stats.chunk(2, dim=1)
        return LatentPosterior(mu, log_sigma.clamp(*LOG_SIGMA_RANGE))


class Decoder(nn.Module):
    """Mirror of the encoder: transposed convolutions back to audio."""

    def __init__(self, cfg: DecoderConfig = DecoderConfig()):
        super().__init__()
        self.cfg = cfg
        self.stem = nn.Conv1d(cfg.in_channels, cfg.stem_channels, cfg.kernel_size,
                              padding=cfg.kernel_size // 2)
        blocks = []
        prev = cfg.stem_channels
        for factor, channels in zip(cfg.up_factors, cfg.up_channels):
            blocks.append(nn.Sequential(
                nn.LeakyReLU(0.2),
                nn.ConvTranspose1d(prev, channels, 2 * factor, stride=factor, padding=factor // 2),
                ResidualStack(channels, cfg.kernel_size, cfg.dilations),
            ))
            prev = channels
        self.blocks = nn.ModuleList(blocks)
        self.head = nn.Sequential(
            nn.LeakyReLU(0.2),
            nn.Conv1d(prev, 1, cfg.kernel_size, padding=cfg.kernel_size // 2),
            nn.Tanh(),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: [B, in_channels, T] -> [B, 1, T * total_factor]
        if z.shape[1] != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {z.shape[1]}")
        h = self.stem(z)
        for block in self.blocks:
            h = block(h)
        return self.head(h)


class PitchPredictor(nn.Module):
    """Two convolutions plus a linear output layer, one log-F0 per frame."""

    def __init__(self, cfg: PitchPredictorConfig = PitchPredictorConfig()):
        super().__init__()
        pad = cfg.kernel_size // 2
        self.conv1 = nn.Conv1d(cfg.in_channels, cfg.hidden_channels, cfg.kernel_size, padding=pad)
        self.conv2 = nn.Conv1d(cfg.hidden_channels, cfg.hidden_channels, cfg.kernel_size, padding=pad)
        self.out = nn.Conv1d(cfg.hidden_channels, 1, 1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # z: [B, C, T] -> [B, T]
        h = torch.nn.functional.leaky_relu(self.conv1(z), 0.2)
        h = torch.nn.functional.leaky_relu(self.conv2(h), 0.2)
        return self.out(h).squeeze(1)


class WaveGAN(nn.Module):
    """Encoder + decoder + pitch head; the generator side of training."""

    def __init__(
        self,
        encoder_cfg: EncoderConfig = EncoderConfig(),
        decoder_cfg: DecoderConfig = DecoderConfig(),
        pitch_cfg: PitchPredictorConfig | None = None,
    ):
        super().__init__()
        if encoder_cfg.total_factor != decoder_cfg.total_factor:
            raise ValueError("encoder and decoder resampling factors must match")
        if decoder_cfg.in_channels != encoder_cfg.latent_dim:
            raise ValueError("decoder input channels must equal the latent dimension")
        if pitch_cfg is None:
            pitch_cfg = PitchPredictorConfig(in_channels=encoder_cfg.latent_dim)
        if pitch_cfg.in_channels != encoder_cfg.latent_dim:
            raise ValueError("pitch predictor input channels must equal the latent dimension")
        self.encoder = Encoder(encoder_cfg)
        self.decoder = Decoder(decoder_cfg)
        self.pitch_predictor = PitchPredictor(pitch_cfg)

    @property
    def total_factor(self) -> int:
        return self.encoder.cfg.total_factor

    def pad_input(self, x: torch.Tensor) -> torch.Tensor:
        """Right-pad [B, 1, T] with zeros to a multiple of the frame factor."""
        factor = self.total_factor
        rem = x.shape[-1] % factor
        if rem:
            x = torch.nn.functional.pad(x, (0, factor - rem))
        return x

    def encode(self, x: torch.Tensor) -> LatentPosterior:
        """Latent statistics for audio [B, T] or [B, 1, T]; frames = ceil(T / factor)."""
        if x.dim() == 2:
            x = x.unsqueeze(1)
        if x.shape[-1] < self.total_factor:
            raise ValueError(
                f"input too short: {x.shape[-1]} samples < one frame ({self.total_factor})"
            )
        return self.encoder(self.pad_input(x))

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """Waveform [B, 1, frames * factor] from latents [B, C, frames]."""
        return self.decoder(z)

    def predict_pitch(self, z: torch.Tensor, stop_gradient: bool = False) -> torch.Tensor:
        """Per-frame log-F0 estimates; optionally cut the gradient into z."""
        if stop_gradient:
            z = z.detach()
        return self.pitch_predictor(z)
