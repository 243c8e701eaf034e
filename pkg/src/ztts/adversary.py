"""Adversarial side of the waveform autoencoder.

A bank of six patch discriminators, each looking at the signal through a
log-mel spectrogram at its own analysis resolution, plus the least-squares
GAN objectives and the feature-matching loss over their intermediate
activations.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import torch
from torch import nn
from torch.nn.utils.parametrizations import weight_norm

from .signal_core import LogMelAnalyzer, SpectralConfig


@dataclass(frozen=True)
class SpectrumAnalysis:
    """Mel analysis setting for one discriminator."""

    spectral: SpectralConfig
    n_mels: int


def default_bank_analyses() -> tuple[SpectrumAnalysis, ...]:
    """Six settings spanning fine temporal to fine spectral resolution."""
    fft_sizes = (128, 256, 512, 1024, 2048, 4096)
    n_mels = (10, 20, 40, 80, 120, 160)
    return tuple(
        SpectrumAnalysis(SpectralConfig(fft_size=n, hop_size=n // 4, window_size=n), m)
        for n, m in zip(fft_sizes, n_mels)
    )


@dataclass(frozen=True)
class DiscriminatorBankConfig:
    analyses: tuple[SpectrumAnalysis, ...] = field(default_factory=default_bank_analyses)
    base_channels: int = 32
    n_layers: int = 5
    fmin: float = 0.0

    def __post_init__(self):
        if len(self.analyses) != 6:
            raise ValueError(f"the bank holds exactly 6 discriminators, got {len(self.analyses)}")
        if len(set(self.analyses)) != len(self.analyses):
            raise ValueError("analysis settings must be pairwise distinct")


class DiscriminatorOutput(NamedTuple):
    score: torch.Tensor  # [B, 1, F', T'] patch scores
    features: list[torch.Tensor]  # activations of each conv layer


class SpectrumDiscriminator(nn.Module):
    """Patch discriminator over one log-mel view of the waveform."""

    def __init__(
        self,
        sample_rate: int,
        analysis: SpectrumAnalysis,
        base_channels: int = 32,
        n_layers: int = 5,
        fmin: float = 0.0,
    ):
        super().__init__()
        self.mel = LogMelAnalyzer(sample_rate, analysis.spectral, analysis.n_mels, fmin=fmin)
        convs = []
        prev = 1
        channels = base_channels
        for _ in range(n_layers):
            convs.append(weight_norm(nn.Conv2d(prev, channels, 3, stride=2, padding=1)))
            prev = channels
            channels *= 2
        self.convs = nn.ModuleList(convs)
        self.post = weight_norm(nn.Conv2d(prev, 1, 3, padding=1))

    def forward(self, x: torch.Tensor) -> DiscriminatorOutput:
        # x: [B, T] waveform -> scores over (mel, frame) patches
        h = self.mel(x).unsqueeze(1)  # [B, 1, n_mels, frames]
        features = []
        for conv in self.convs:
            h = torch.nn.functional.leaky_relu(conv(h), 0.2)
            features.append(h)
        return DiscriminatorOutput(self.post(h), features)


class DiscriminatorBank(nn.Module):
    """The six-way multi-resolution spectrum discriminator."""

    def __init__(self, sample_rate: int, cfg: DiscriminatorBankConfig = DiscriminatorBankConfig()):
        super().__init__()
        self.cfg = cfg
        self.min_length = max(a.spectral.fft_size // 2 + 1 for a in cfg.analyses)
        self.discriminators = nn.ModuleList(
            SpectrumDiscriminator(sample_rate, a, cfg.base_channels, cfg.n_layers, cfg.fmin)
            for a in cfg.analyses
        )

    def forward(self, x: torch.Tensor) -> list[DiscriminatorOutput]:
        if x.dim() == 3:
            x = x.squeeze(1)
        if x.shape[-1] < self.min_length:
            raise ValueError(
                f"input of {x.shape[-1]} samples is shorter than the largest"
                f" analysis window ({self.min_length})"
            )
        return [d(x) for d in self.discriminators]


def lsgan_generator_loss(fake_outputs: list[DiscriminatorOutput]) -> torch.Tensor:
    """Mean over discriminators of mean (score - 1)^2 on generated audio."""
    if not fake_outputs:
        raise ValueError("need at least one discriminator output")
    losses = [(out.score - 1.0).pow(2).mean() for out in fake_outputs]
    return torch.stack(losses).mean()


def lsgan_discriminator_loss(
    real_outputs: list[DiscriminatorOutput], fake_outputs: list[DiscriminatorOutput]
) -> torch.Tensor:
    """Mean over discriminators of mean (real - 1)^2 + mean fake^2."""
    if len(real_outputs) != len(fake_outputs):
        raise ValueError("real and fake output lists must have equal length")
    if not real_outputs:
        raise ValueError("need at least one discriminator output")
    losses = [
        (r.score - 1.0).pow(2).mean() + f.score.pow(2).mean()
        for r, f in zip(real_outputs, fake_outputs)
    ]
    return torch.stack(losses).mean()


def feature_matching_loss(
    real_outputs: list[DiscriminatorOutput], fake_outputs: list[DiscriminatorOutput]
) -> torch.Tensor:
    """Sum over discriminators and layers of per-unit L1 feature distance."""
    if len(real_outputs) != len(fake_outputs):
        raise ValueError("real and fake output lists must have equal length")
    total = None
    for r, f in zip(real_outputs, fake_outputs):
        if len(r.features) != len(f.features):
            raise ValueError("feature-map structure mismatch between real and fake outputs")
        for rf, ff in zip(r.features, f.features):
            if rf.shape != ff.shape:
                raise ValueError(
                    f"feature-map shape mismatch: {tuple(rf.shape)} vs {tuple(ff.shape)}"
                )
            term = (rf - ff).abs().mean()  # 1/N_i * ||.||_1
            total = term if total is None else total + term
    if total is None:
        raise ValueError("need at least one discriminator output")
    return total
