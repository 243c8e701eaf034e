"""Configuration presets.

``PipelineConfig()`` alone is the full-size model; the presets here scale
widths and batch sizes down to what a CPU box can train in minutes while
keeping every architectural contract (256x down-sampling, 256-channel
latent, six discriminators) intact.
"""

from __future__ import annotations

from dataclasses import replace

from .adversary import DiscriminatorBankConfig, SpectrumAnalysis
from .config import PipelineConfig, TextModelConfig
from .flow_acoustic import FlowConfig
from .signal_core import SpectralConfig
from .trainer import AcousticTrainerConfig, WaveGANTrainerConfig
from .wavegan import DecoderConfig, EncoderConfig


def smoke_bank() -> DiscriminatorBankConfig:
    ffts = (128, 256, 512, 1024, 2048, 4096)
    mels = (10, 20, 40, 60, 80, 100)
    analyses = tuple(
        SpectrumAnalysis(SpectralConfig(n, n // 4, n), m) for n, m in zip(ffts, mels)
    )
    return DiscriminatorBankConfig(analyses=analyses, base_channels=8, n_layers=4)


def smoke_config(
    workdir: str,
    manifest: str,
    sample_rate: int = 24000,
    seed: int = 1234,
    wavegan_steps: int = 3000,
    acoustic_steps: int = 1500,
) -> PipelineConfig:
    """Overfit-scale profile: small widths, short segments, full contracts."""
    return PipelineConfig(
        seed=seed,
        sample_rate=sample_rate,
        manifest=manifest,
        workdir=workdir,
        encoder=EncoderConfig(down_channels=(32, 32, 64, 128), stem_channels=32),
        decoder=DecoderConfig(up_channels=(64, 32, 32, 16), stem_channels=128),
        bank=smoke_bank(),
        flow=FlowConfig(n_blocks=4, hidden_channels=64),
        text=TextModelConfig(hidden_channels=64, n_layers=3),
        wavegan_trainer=WaveGANTrainerConfig(
            learning_rate=1e-3,
            batch_size=2,
            segment_samples=4096,
            steps=wavegan_steps,
            checkpoint_interval=1000,
        ),
        acoustic_trainer=AcousticTrainerConfig(steps=acoustic_steps, checkpoint_interval=500),
    )


def tiny_config(workdir: str, manifest: str, sample_rate: int = 8000, seed: int = 0) -> PipelineConfig:
    """Minimal profile for fast functional tests."""
    cfg = smoke_config(workdir, manifest, sample_rate=sample_rate, seed=seed,
                       wavegan_steps=10, acoustic_steps=10)
    ffts = (64, 128, 256, 512, 1024, 2048)
    mels = (5, 10, 20, 30, 40, 60)
    bank = DiscriminatorBankConfig(
        analyses=tuple(SpectrumAnalysis(SpectralConfig(n, n // 4, n), m)
                       for n, m in zip(ffts, mels)),
        base_channels=4,
        n_layers=3,
    )
    return replace(
        cfg,
        encoder=EncoderConfig(down_channels=(8, 8, 16, 32), stem_channels=8),
        decoder=DecoderConfig(up_channels=(16, 8, 8, 8), stem_channels=32),
        bank=bank,
        flow=FlowConfig(n_blocks=2, hidden_channels=32),
        text=TextModelConfig(hidden_channels=32, n_layers=2),
        wavegan_trainer=WaveGANTrainerConfig(
            batch_size=2, segment_samples=4096, steps=10, checkpoint_interval=5),
        acoustic_trainer=AcousticTrainerConfig(steps=10, checkpoint_interval=5),
    )
