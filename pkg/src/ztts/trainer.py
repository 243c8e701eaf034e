"""Training orchestration for both stages.

The waveform-autoencoder step computes all losses against the current
parameters, then steps the discriminator and generator optimizers once
each (discriminator first); gradients are partitioned so the encoder sees
every generator-side term, the pitch head only the pitch term, the decoder
the reconstruction/adversarial/feature terms, and the discriminator only
its own objective. A mel-conditioned mode trains the same decoder and
discriminator bank as a plain vocoder baseline.
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .adversary import (
    DiscriminatorBank,
    DiscriminatorBankConfig,
    feature_matching_loss,
    lsgan_discriminator_loss,
    lsgan_generator_loss,
)
from .errors import VersionError
from .flow_acoustic import AcousticModel, FlowConfig, TextEncoderConfig, acoustic_train_step
from .signal_core import (
    DOWNSAMPLE_FACTOR,
    DEFAULT_STFT_LOSS_CONFIGS,
    LogMelAnalyzer,
    MultiResolutionSTFTLoss,
    PitchTrack,
    SpectralConfig,
)
from .wavegan import (
    Decoder,
    DecoderConfig,
    Encoder,
    EncoderConfig,
    LatentPosterior,
    PitchPredictor,
    PitchPredictorConfig,
    kl_loss,
    pitch_loss,
    sample_latent,
)

log = logging.getLogger(__name__)

WAVEGAN_SCHEMA = "ztts.wavegan.v1"
ACOUSTIC_SCHEMA = "ztts.acoustic.v1"


@dataclass(frozen=True)
class LossWeights:
    """Generator-side objective weights."""

    kl: float = 10.0
    pitch: float = 1.0
    recons: float = 1.0
    adv_g: float = 1.0
    fm: float = 20.0

    def __post_init__(self):
        if min(self.kl, self.pitch, self.recons, self.adv_g, self.fm) < 0:
            raise ValueError("loss weights must be non-negative")


@dataclass(frozen=True)
class WaveGANTrainerConfig:
    mode: str = "wavegan"  # or "inner_gan" for the mel-conditioned baseline
    learning_rate: float = 2e-4
    betas: tuple[float, float] = (0.8, 0.99)
    lr_decay_per_epoch: float = 0.999
    batch_size: int = 16
    segment_samples: int = 8192
    steps: int = 20000
    checkpoint_interval: int = 2000
    log_interval: int = 10
    stop_gradient_pitch: bool = False
    mel_bands: int = 80  # conditioning features in inner_gan mode
    mel_fft: int = 1024

    def __post_init__(self):
        if self.mode not in ("wavegan", "inner_gan"):
            raise ValueError(f"unknown trainer mode {self.mode!r}")
        if self.segment_samples % DOWNSAMPLE_FACTOR:
            raise ValueError("segment_samples must be a multiple of the frame factor")


class MetricsLog:
    """Newline-delimited (step, name, value) records for external plotting."""

    def __init__(self, path: str | Path | None):
        self.path = Path(path) if path is not None else None
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self._fh = open(self.path, "a")
        else:
            self._fh = None

    def write(self, step: int, values: dict[str, float]) -> None:
        if self._fh is None:
            return
        for name, value in values.items():
            self._fh.write(json.dumps({"step": step, "name": name, "value": value}) + "\n")
        self._fh.flush()

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


class SegmentSampler:
    """Draws fixed-length training crops aligned to latent-frame boundaries."""

    def __init__(
        self,
        utterances: list[tuple[np.ndarray, PitchTrack]],
        segment_samples: int,
        seed: int = 0,
    ):
        if not utterances:
            raise ValueError("need at least one utterance")
        self.utterances = utterances
        self.segment_samples = segment_samples
        self.segment_frames = segment_samples // DOWNSAMPLE_FACTOR
        self.rng = np.random.default_rng(seed)

    def sample_batch(self, batch_size: int) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        waves, lf0s, voicings = [], [], []
        for _ in range(batch_size):
            samples, pitch = self.utterances[self.rng.integers(len(self.utterances))]
            wav = np.asarray(samples, dtype=np.float32)
            lf0 = np.asarray(pitch.log_f0, dtype=np.float32)
            voi = np.asarray(pitch.voicing, dtype=bool)
            n_frames = len(pitch)
            if n_frames < self.segment_frames:
                pad = self.segment_frames - n_frames
                wav = np.pad(wav, (0, self.segment_samples - wav.size))
                lf0 = np.pad(lf0, (0, pad), mode="edge")
                voi = np.pad(voi, (0, pad))
                start = 0
            else:
                start = int(self.rng.integers(n_frames - self.segment_frames + 1))
            s0 = start * DOWNSAMPLE_FACTOR
            crop = wav[s0 : s0 + self.segment_samples]
            if crop.size < self.segment_samples:
                crop = np.pad(crop, (0, self.segment_samples - crop.size))
            waves.append(crop)
            lf0s.append(lf0[start : start + self.segment_frames])
            voicings.append(voi[start : start + self.segment_frames])
        return (
            torch.from_numpy(np.stack(waves)).unsqueeze(1),
            torch.from_numpy(np.stack(lf0s)),
            torch.from_numpy(np.stack(voicings)),
        )


def _atomic_torch_save(payload: dict, path: Path) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    os.replace(tmp, path)


def _freeze(module: torch.nn.Module, frozen: bool) -> None:
    for p in module.parameters():
        p.requires_grad_(not frozen)


class WaveGANTrainer:
    """Joint autoencoder/adversary training loop state."""

    def __init__(
        self,
        sample_rate: int,
        encoder_cfg: EncoderConfig = EncoderConfig(),
        decoder_cfg: DecoderConfig = DecoderConfig(),
        pitch_cfg: PitchPredictorConfig | None = None,
        bank_cfg: DiscriminatorBankConfig = DiscriminatorBankConfig(),
        trainer_cfg: WaveGANTrainerConfig = WaveGANTrainerConfig(),
        weights: LossWeights = LossWeights(),
        stft_configs: tuple[SpectralConfig, ...] = DEFAULT_STFT_LOSS_CONFIGS,
        seed: int = 0,
        steps_per_epoch: int = 100,
    ):
        self.sample_rate = sample_rate
        self.cfg = trainer_cfg
        self.weights = weights
        self.step = 0
        self.steps_per_epoch = max(1, steps_per_epoch)
        self.seed = seed
        torch.manual_seed(seed)

        if trainer_cfg.mode == "inner_gan":
            decoder_cfg = DecoderConfig(**{**asdict(decoder_cfg), "in_channels": trainer_cfg.mel_bands})
            self.encoder = None
            self.pitch_predictor = None
            # conditioning mel at the latent hop so decoder shapes carry over
            self.mel = LogMelAnalyzer(
                sample_rate,
                SpectralConfig(trainer_cfg.mel_fft, DOWNSAMPLE_FACTOR, trainer_cfg.mel_fft),
                trainer_cfg.mel_bands,
            )
        else:
            if pitch_cfg is None:
                pitch_cfg = PitchPredictorConfig(in_channels=encoder_cfg.latent_dim)
            self.encoder = Encoder(encoder_cfg)
            self.pitch_predictor = PitchPredictor(pitch_cfg)
            self.mel = None
        self.encoder_cfg = encoder_cfg
        self.decoder_cfg = decoder_cfg
        self.pitch_cfg = pitch_cfg
        self.bank_cfg = bank_cfg
        self.stft_configs = tuple(stft_configs)

        self.decoder = Decoder(decoder_cfg)
        self.bank = DiscriminatorBank(sample_rate, bank_cfg)
        self.stft_loss = MultiResolutionSTFTLoss(self.stft_configs)

        gen_params = list(self.decoder.parameters())
        if self.encoder is not None:
            gen_params += list(self.encoder.parameters())
        if self.pitch_predictor is not None:
            gen_params += list(self.pitch_predictor.parameters())
        self.opt_g = torch.optim.Adam(gen_params, lr=trainer_cfg.learning_rate,
                                      betas=trainer_cfg.betas)
        self.opt_d = torch.optim.Adam(self.bank.parameters(), lr=trainer_cfg.learning_rate,
                                      betas=trainer_cfg.betas)
        self.sched_g = torch.optim.lr_scheduler.ExponentialLR(
            self.opt_g, gamma=trainer_cfg.lr_decay_per_epoch)
        self.sched_d = torch.optim.lr_scheduler.ExponentialLR(
            self.opt_d, gamma=trainer_cfg.lr_decay_per_epoch)
        self.generator = torch.Generator().manual_seed(seed)

    # -- steps ------------------------------------------------------------

    def train_step(
        self, waves: torch.Tensor, target_log_f0: torch.Tensor, voicing: torch.Tensor
    ) -> dict[str, float]:
        """One alternation on a batch of cropped waveforms with pitch targets."""
        if self.cfg.mode != "wavegan":
            raise ValueError("train_step requires mode='wavegan'")
        w = self.weights
        post = self.encoder(waves)
        z = sample_latent(post, self.generator)
        w_hat = self.decoder(z)[..., : waves.shape[-1]]
        pred_lf0 = self.pitch_predictor(
            z.detach() if self.cfg.stop_gradient_pitch else z)

        losses = {}
        losses["kl"] = kl_loss(post)
        losses["pitch"], n_voiced = pitch_loss(pred_lf0, target_log_f0, voicing)
        losses["recons"] = self.stft_loss(waves.squeeze(1), w_hat.squeeze(1))

        real_out = self.bank(waves)
        fake_detached = self.bank(w_hat.detach())
        losses["adv_d"] = lsgan_discriminator_loss(real_out, fake_detached)

        _freeze(self.bank, True)
        fake_out = self.bank(w_hat)
        real_for_fm = [
            type(o)(o.score.detach(), [f.detach() for f in o.features]) for o in real_out
        ]
        losses["adv_g"] = lsgan_generator_loss(fake_out)
        losses["fm"] = feature_matching_loss(real_for_fm, fake_out)

        loss_g = (w.kl * losses["kl"] + w.pitch * losses["pitch"]
                  + w.recons * losses["recons"] + w.adv_g * losses["adv_g"]
                  + w.fm * losses["fm"])
        out = self._apply_updates(losses, loss_g)
        out["voiced_frames"] = float(n_voiced)
        return out

    def inner_gan_train_step(self, waves: torch.Tensor) -> dict[str, float]:
        """Mel-conditioned vocoder step: no encoder, no KL, no pitch head."""
        if self.cfg.mode != "inner_gan":
            raise ValueError("inner_gan_train_step requires mode='inner_gan'")
        w = self.weights
        mel = self.mel(waves.squeeze(1))[..., : waves.shape[-1] // DOWNSAMPLE_FACTOR]
        w_hat = self.decoder(mel)[..., : waves.shape[-1]]

        losses = {}
        losses["recons"] = self.stft_loss(waves.squeeze(1), w_hat.squeeze(1))
        real_out = self.bank(waves)
        fake_detached = self.bank(w_hat.detach())
        losses["adv_d"] = lsgan_discriminator_loss(real_out, fake_detached)

        _freeze(self.bank, True)
        fake_out = self.bank(w_hat)
        real_for_fm = [
            type(o)(o.score.detach(), [f.detach() for f in o.features]) for o in real_out
        ]
        losses["adv_g"] = lsgan_generator_loss(fake_out)
        losses["fm"] = feature_matching_loss(real_for_fm, fake_out)

        loss_g = w.recons * losses["recons"] + w.adv_g * losses["adv_g"] + w.fm * losses["fm"]
        return self._apply_updates(losses, loss_g)

    def _apply_updates(self, losses: dict[str, torch.Tensor], loss_g: torch.Tensor) -> dict[str, float]:
        """Step discriminator then generator; abort leaving state untouched
        if any loss is non-finite. Assumes the bank is currently frozen."""
        try:
            if not (torch.isfinite(loss_g) and torch.isfinite(losses["adv_d"])):
                log.warning("non-finite loss at step %d: %s", self.step,
                            {k: float(v.detach()) for k, v in losses.items()})
                return {"aborted": 1.0, **{k: float(v.detach()) for k, v in losses.items()}}
            self.opt_g.zero_grad(set_to_none=True)
            loss_g.backward()
            _freeze(self.bank, False)
            self.opt_d.zero_grad(set_to_none=True)
            losses["adv_d"].backward()
            self.opt_d.step()
            self.opt_g.step()
        finally:
            _freeze(self.bank, False)
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.sched_g.step()
            self.sched_d.step()
        return {k: float(v.detach()) for k, v in losses.items()}

    # -- checkpointing ----------------------------------------------------

    def state_payload(self, sampler: "SegmentSampler | None" = None) -> dict:
        payload = {
            "schema": WAVEGAN_SCHEMA,
            "version": __version__,
            "step": self.step,
            "sample_rate": self.sample_rate,
            "seed": self.seed,
            "steps_per_epoch": self.steps_per_epoch,
            "configs": {
                "encoder": asdict(self.encoder_cfg),
                "decoder": asdict(self.decoder_cfg),
                "pitch": asdict(self.pitch_cfg) if self.pitch_cfg else None,
                "bank": asdict(self.bank_cfg),
                "trainer": asdict(self.cfg),
                "weights": asdict(self.weights),
                "stft": [asdict(c) for c in self.stft_configs],
            },
            "generator_models": {
                "decoder": self.decoder.state_dict(),
                "encoder": self.encoder.state_dict() if self.encoder else None,
                "pitch_predictor": (
                    self.pitch_predictor.state_dict() if self.pitch_predictor else None
                ),
            },
            "discriminator": self.bank.state_dict(),
            "optim": {
                "g": self.opt_g.state_dict(),
                "d": self.opt_d.state_dict(),
                "sched_g": self.sched_g.state_dict(),
                "sched_d": self.sched_d.state_dict(),
            },
            "rng": {
                "generator": self.generator.get_state(),
                "sampler": sampler.rng.bit_generator.state if sampler is not None else None,
            },
        }
        return payload

    def save(self, path: str | Path, sampler: "SegmentSampler | None" = None) -> None:
        _atomic_torch_save(self.state_payload(sampler), Path(path))

    @classmethod
    def restore(cls, path: str | Path) -> "WaveGANTrainer":
        payload = load_checkpoint_payload(path, WAVEGAN_SCHEMA)
        from .config import dataclass_from_dict  # local import to avoid a cycle

        cfgs = payload["configs"]
        trainer = cls(
            sample_rate=payload["sample_rate"],
            encoder_cfg=dataclass_from_dict(EncoderConfig, cfgs["encoder"]),
            decoder_cfg=dataclass_from_dict(DecoderConfig, cfgs["decoder"]),
            pitch_cfg=(dataclass_from_dict(PitchPredictorConfig, cfgs["pitch"])
                       if cfgs["pitch"] else None),
            bank_cfg=dataclass_from_dict(DiscriminatorBankConfig, cfgs["bank"]),
            trainer_cfg=dataclass_from_dict(WaveGANTrainerConfig, cfgs["trainer"]),
            weights=dataclass_from_dict(LossWeights, cfgs["weights"]),
            stft_configs=tuple(dataclass_from_dict(SpectralConfig, c) for c in cfgs["stft"]),
            seed=payload["seed"],
            steps_per_epoch=payload["steps_per_epoch"],
        )
        trainer.step = payload["step"]
        trainer.decoder.load_state_dict(payload["generator_models"]["decoder"])
        if trainer.encoder is not None:
            trainer.encoder.load_state_dict(payload["generator_models"]["encoder"])
        if trainer.pitch_predictor is not None:
            trainer.pitch_predictor.load_state_dict(payload["generator_models"]["pitch_predictor"])
        trainer.bank.load_state_dict(payload["discriminator"])
        trainer.opt_g.load_state_dict(payload["optim"]["g"])
        trainer.opt_d.load_state_dict(payload["optim"]["d"])
        trainer.sched_g.load_state_dict(payload["optim"]["sched_g"])
        trainer.sched_d.load_state_dict(payload["optim"]["sched_d"])
        trainer.generator.set_state(payload["rng"]["generator"])
        return trainer

    def restore_sampler(
        self, path: str | Path, utterances: list[tuple[np.ndarray, PitchTrack]]
    ) -> SegmentSampler:
        """Rebuild a sampler whose RNG continues from the checkpointed state."""
        payload = load_checkpoint_payload(path, WAVEGAN_SCHEMA)
        sampler = SegmentSampler(utterances, self.cfg.segment_samples, seed=self.seed)
        state = payload["rng"].get("sampler")
        if state is not None:
            sampler.rng.bit_generator.state = state
        return sampler


def load_checkpoint_payload(path: str | Path, expected_schema: str) -> dict:
    path = Path(path)
    if not path.exists():
        raise OSError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    schema = payload.get("schema") if isinstance(payload, dict) else None
    if schema != expected_schema:
        raise VersionError(f"expected checkpoint schema {expected_schema!r}, found {schema!r}")
    return payload


def train_wavegan(
    trainer: WaveGANTrainer,
    sampler: SegmentSampler,
    steps: int,
    metrics: MetricsLog | None = None,
    checkpoint_path: str | Path | None = None,
) -> dict[str, float]:
    """Run the loop for ``steps`` additional steps; returns the last losses."""
    last: dict[str, float] = {}
    for _ in range(steps):
        waves, lf0, voicing = sampler.sample_batch(trainer.cfg.batch_size)
        if trainer.cfg.mode == "inner_gan":
            last = trainer.inner_gan_train_step(waves)
        else:
            last = trainer.train_step(waves, lf0, voicing)
        if metrics is not None and trainer.step % trainer.cfg.log_interval == 0:
            metrics.write(trainer.step, last)
        if checkpoint_path is not None and trainer.step % trainer.cfg.checkpoint_interval == 0:
            trainer.save(checkpoint_path, sampler)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path, sampler)
    return last


def stop_gradient_pitch_experiment(
    utterances: list[tuple[np.ndarray, PitchTrack]],
    steps: int,
    sample_rate: int,
    encoder_cfg: EncoderConfig = EncoderConfig(),
    decoder_cfg: DecoderConfig = DecoderConfig(),
    bank_cfg: DiscriminatorBankConfig = DiscriminatorBankConfig(),
    trainer_cfg: WaveGANTrainerConfig = WaveGANTrainerConfig(),
    weights: LossWeights = LossWeights(),
    stft_configs: tuple[SpectralConfig, ...] = DEFAULT_STFT_LOSS_CONFIGS,
    seed: int = 0,
) -> dict[str, list[tuple[int, float]]]:
    """Train twin runs, with and without gradient flow into the pitch
    predictor's input, under identical seeds and data order.

    Returns per-variant pitch-loss curves as (step, value) records.
    """
    curves: dict[str, list[tuple[int, float]]] = {}
    for name, stop in (("flowing", False), ("stopped", True)):
        cfg = WaveGANTrainerConfig(**{**asdict(trainer_cfg), "stop_gradient_pitch": stop})
        trainer = WaveGANTrainer(
            sample_rate=sample_rate,
            encoder_cfg=encoder_cfg,
            decoder_cfg=decoder_cfg,
            bank_cfg=bank_cfg,
            trainer_cfg=cfg,
            weights=weights,
            stft_configs=stft_configs,
            seed=seed,
        )
        sampler = SegmentSampler(utterances, cfg.segment_samples, seed=seed)
        curve = []
        for _ in range(steps):
            waves, lf0, voicing = sampler.sample_batch(cfg.batch_size)
            result = trainer.train_step(waves, lf0, voicing)
            curve.append((trainer.step, result["pitch"]))
        curves[name] = curve
    return curves


# ---------------------------------------------------------------------------
# Acoustic-model training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AcousticTrainerConfig:
    learning_rate: float = 1e-3
    betas: tuple[float, float] = (0.9, 0.98)
    lr_decay_per_epoch: float = 0.999
    steps: int = 10000
    checkpoint_interval: int = 2000
    log_interval: int = 10


class AcousticTrainer:
    """Latent-likelihood training over a cached corpus of posteriors."""

    def __init__(
        self,
        text_cfg: TextEncoderConfig,
        flow_cfg: FlowConfig,
        trainer_cfg: AcousticTrainerConfig = AcousticTrainerConfig(),
        seed: int = 0,
        steps_per_epoch: int = 100,
    ):
        self.cfg = trainer_cfg
        self.text_cfg = text_cfg
        self.flow_cfg = flow_cfg
        self.seed = seed
        self.step = 0
        self.steps_per_epoch = max(1, steps_per_epoch)
        torch.manual_seed(seed)
        self.model = AcousticModel(text_cfg, flow_cfg)
        self.optimizer = torch.optim.Adam(self.model.parameters(),
                                          lr=trainer_cfg.learning_rate, betas=trainer_cfg.betas)
        self.scheduler = torch.optim.lr_scheduler.ExponentialLR(
            self.optimizer, gamma=trainer_cfg.lr_decay_per_epoch)
        self.generator = torch.Generator().manual_seed(seed)
        self.rng = np.random.default_rng(seed)

    def train_step(
        self, post_mu: torch.Tensor, post_log_sigma: torch.Tensor, tokens: torch.Tensor
    ) -> dict[str, float]:
        result = acoustic_train_step(
            self.model, self.optimizer, post_mu, post_log_sigma, tokens, self.generator)
        self.step += 1
        if self.step % self.steps_per_epoch == 0:
            self.scheduler.step()
        return result

    def state_payload(self) -> dict:
        return {
            "schema": ACOUSTIC_SCHEMA,
            "version": __version__,
            "step": self.step,
            "seed": self.seed,
            "steps_per_epoch": self.steps_per_epoch,
            "configs": {
                "text": asdict(self.text_cfg),
                "flow": asdict(self.flow_cfg),
                "trainer": asdict(self.cfg),
            },
            "model": self.model.state_dict(),
            "optim": {"opt": self.optimizer.state_dict(), "sched": self.scheduler.state_dict()},
            "rng": {
                "generator": self.generator.get_state(),
                "sampler": self.rng.bit_generator.state,
            },
        }

    def save(self, path: str | Path) -> None:
        _atomic_torch_save(self.state_payload(), Path(path))

    @classmethod
    def restore(cls, path: str | Path) -> "AcousticTrainer":
        payload = load_checkpoint_payload(path, ACOUSTIC_SCHEMA)
        from .config import dataclass_from_dict

        cfgs = payload["configs"]
        trainer = cls(
            text_cfg=dataclass_from_dict(TextEncoderConfig, cfgs["text"]),
            flow_cfg=dataclass_from_dict(FlowConfig, cfgs["flow"]),
            trainer_cfg=dataclass_from_dict(AcousticTrainerConfig, cfgs["trainer"]),
            seed=payload["seed"],
            steps_per_epoch=payload["steps_per_epoch"],
        )
        trainer.step = payload["step"]
        trainer.model.load_state_dict(payload["model"])
        trainer.optimizer.load_state_dict(payload["optim"]["opt"])
        trainer.scheduler.load_state_dict(payload["optim"]["sched"])
        trainer.generator.set_state(payload["rng"]["generator"])
        trainer.rng.bit_generator.state = payload["rng"]["sampler"]
        return trainer


def train_acoustic(
    trainer: AcousticTrainer,
    corpus: list[tuple[torch.Tensor, torch.Tensor, torch.Tensor]],
    steps: int,
    metrics: MetricsLog | None = None,
    checkpoint_path: str | Path | None = None,
) -> list[float]:
    """Train over (mu, log_sigma, tokens) utterances; returns per-step NLL/dim."""
    if not corpus:
        raise ValueError("acoustic training corpus is empty")
    nlls = []
    for _ in range(steps):
        mu, log_sigma, tokens = corpus[trainer.rng.integers(len(corpus))]
        result = trainer.train_step(mu, log_sigma, tokens)
        nlls.append(result["nll_per_dim"])
        if metrics is not None and trainer.step % trainer.cfg.log_interval == 0:
            metrics.write(trainer.step, result)
        if checkpoint_path is not None and trainer.step % trainer.cfg.checkpoint_interval == 0:
            trainer.save(checkpoint_path)
    if checkpoint_path is not None:
        trainer.save(checkpoint_path)
    return nlls
