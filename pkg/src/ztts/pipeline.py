"""End-user pipeline operations: dataset preparation, two-stage training
drivers, latent-statistics extraction, synthesis, reconstruction, and
objective evaluation. Every command writes a run record (config, seed,
package version) next to its outputs so runs are reproducible."""

from __future__ import annotations

import dataclasses
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.fftpack import dct

from . import __version__
from .config import PipelineConfig
from .errors import FormatError, VersionError
from .flow_acoustic import AcousticModel, FlowConfig, TextEncoderConfig
from .signal_core import (
    DOWNSAMPLE_FACTOR,
    PitchTrack,
    SpectralConfig,
    Waveform,
    extract_pitch,
    latent_frame_count,
    load_waveform,
    mel_spectrogram,
    peak_normalize,
    resample,
    save_waveform,
)
from .text import Vocabulary, get_tokenizer
from .trainer import (
    ACOUSTIC_SCHEMA,
    WAVEGAN_SCHEMA,
    AcousticTrainer,
    MetricsLog,
    SegmentSampler,
    WaveGANTrainer,
    load_checkpoint_payload,
    stop_gradient_pitch_experiment,
    train_acoustic,
    train_wavegan,
)
from .wavegan import WaveGAN

log = logging.getLogger(__name__)

DATASET_SCHEMA = "ztts.dataset.v1"
LATENTS_SCHEMA = "ztts.latents.v1"

# analysis used by the objective reconstruction metrics
EVAL_SPECTRAL = SpectralConfig(fft_size=1024, hop_size=256, window_size=1024)
EVAL_N_MELS = 80


def write_run_record(out_dir: Path, cfg: PipelineConfig, command: str, extra: dict | None = None) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "version": __version__,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
    }
    if extra:
        record.update(extra)
    (out_dir / "run.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


def parse_manifest(path: str | Path) -> list[tuple[Path, str]]:
    """Rows of `audio-path|transcript`; paths resolve against the manifest."""
    path = Path(path)
    if not path.exists():
        raise OSError(f"manifest not found: {path}")
    rows = []
    for line in path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        audio, _, transcript = line.partition("|")
        audio_path = Path(audio.strip())
        if not audio_path.is_absolute():
            audio_path = path.parent / audio_path
        rows.append((audio_path, transcript.strip()))
    return rows


def _sanitize(stem: str) -> str:
    return "".join(ch if ch.isalnum() or ch in "-_" else "_" for ch in stem)


def prepare_data(
    cfg: PipelineConfig,
    manifest: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Resample, normalize, pitch-track, and tokenize a manifest of audio.

    Unreadable rows are skipped with a warning and counted in the summary.
    Returns the summary dict; artifacts land under ``out_dir``.
    """
    manifest = Path(manifest) if manifest is not None else Path(cfg.manifest)
    out = Path(out_dir) if out_dir is not None else cfg.dataset_dir
    tokenizer = get_tokenizer(cfg.tokenizer)
    rows = parse_manifest(manifest)

    (out / "wav").mkdir(parents=True, exist_ok=True)
    (out / "pitch").mkdir(parents=True, exist_ok=True)
    utterances = []
    skipped = []
    token_lists = []
    for i, (audio_path, transcript) in enumerate(rows):
        uid = f"{i:04d}_{_sanitize(audio_path.stem)}"
        tokens = tokenizer.tokenize(transcript)
        if not tokens:
            log.warning("skipping %s: empty transcript after tokenization", audio_path)
            skipped.append({"row": i, "path": str(audio_path), "reason": "empty transcript"})
            continue
        try:
            w = load_waveform(audio_path)
        except (OSError, FormatError) as exc:
            log.warning("skipping %s: %s", audio_path, exc)
            skipped.append({"row": i, "path": str(audio_path), "reason": str(exc)})
            continue
        w = peak_normalize(resample(w, cfg.sample_rate), cfg.peak_level)
        pitch = extract_pitch(w, hop_size=DOWNSAMPLE_FACTOR)
        save_waveform(w, out / "wav" / f"{uid}.wav")
        np.save(out / "pitch" / f"{uid}.npy",
                np.stack([pitch.log_f0, pitch.voicing.astype(np.float64)]).astype(np.float32))
        utterances.append({
            "id": uid,
            "wav": f"wav/{uid}.wav",
            "pitch": f"pitch/{uid}.npy",
            "transcript": transcript,
            "tokens": tokens,
            "n_samples": len(w),
        })
        token_lists.append(tokens)

    if cfg.vocab_file:
        vocab = Vocabulary.load(cfg.vocab_file)
    else:
        vocab = Vocabulary.from_corpus(token_lists)
    vocab.save(out / "vocab.txt")
    for utt in utterances:
        utt["token_ids"] = vocab.encode(utt["tokens"])

    index = {
        "schema": DATASET_SCHEMA,
        "sample_rate": cfg.sample_rate,
        "utterances": utterances,
        "skipped": skipped,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    summary = {
        "processed": len(utterances),
        "skipped": len(skipped),
        "total_duration_sec": sum(u["n_samples"] for u in utterances) / cfg.sample_rate,
    }
    write_run_record(out, cfg, "prepare-data", {"summary": summary})
    return summary


def load_dataset(dataset_dir: str | Path) -> dict:
    dataset_dir = Path(dataset_dir)
    index_path = dataset_dir / "index.json"
    if not index_path.exists():
        raise OSError(f"dataset index not found: {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("schema") != DATASET_SCHEMA:
        raise VersionError(f"unsupported dataset schema {index.get('schema')!r}")
    index["dir"] = dataset_dir
    index["vocab"] = Vocabulary.load(dataset_dir / "vocab.txt")
    return index


def _utterance_audio(dataset: dict, rec: dict) -> Waveform:
    return load_waveform(dataset["dir"] / rec["wav"])


def _utterance_pitch(dataset: dict, rec: dict) -> PitchTrack:
    arr = np.load(dataset["dir"] / rec["pitch"])
    return PitchTrack(arr[0].astype(np.float64), arr[1] > 0.5, DOWNSAMPLE_FACTOR)


def dataset_utterances(dataset: dict) -> list[tuple[np.ndarray, PitchTrack]]:
    return [
        (_utterance_audio(dataset, rec).samples, _utterance_pitch(dataset, rec))
        for rec in dataset["utterances"]
    ]


# ---------------------------------------------------------------------------
# Checkpoint loading for inference
# ---------------------------------------------------------------------------


def load_wavegan_model(path: str | Path, include_discriminator: bool = False) -> tuple[WaveGAN, dict]:
    """Rebuild the generator from a checkpoint; the discriminator is skipped
    unless asked for (inference needs only the generator weights)."""
    from .config import dataclass_from_dict
    from .wavegan import DecoderConfig, EncoderConfig, PitchPredictorConfig

    payload = load_checkpoint_payload(path, WAVEGAN_SCHEMA)
    cfgs = payload["configs"]
    if cfgs["trainer"]["mode"] != "wavegan":
        raise VersionError("checkpoint was trained in mel-conditioned mode; no encoder available")
    model = WaveGAN(
        dataclass_from_dict(EncoderConfig, cfgs["encoder"]),
        dataclass_from_dict(DecoderConfig, cfgs["decoder"]),
        dataclass_from_dict(PitchPredictorConfig, cfgs["pitch"]),
    )
    model.encoder.load_state_dict(payload["generator_models"]["encoder"])
    model.decoder.load_state_dict(payload["generator_models"]["decoder"])
    model.pitch_predictor.load_state_dict(payload["generator_models"]["pitch_predictor"])
    model.eval()
    if include_discriminator:
        from .adversary import DiscriminatorBank, DiscriminatorBankConfig

        bank = DiscriminatorBank(payload["sample_rate"],
                                 dataclass_from_dict(DiscriminatorBankConfig, cfgs["bank"]))
        bank.load_state_dict(payload["discriminator"])
        payload["bank_model"] = bank
    return model, payload


def load_acoustic_model(path: str | Path) -> tuple[AcousticModel, dict]:
    from .config import dataclass_from_dict

    payload = load_checkpoint_payload(path, ACOUSTIC_SCHEMA)
    cfgs = payload["configs"]
    model = AcousticModel(
        dataclass_from_dict(TextEncoderConfig, cfgs["text"]),
        dataclass_from_dict(FlowConfig, cfgs["flow"]),
    )
    model.load_state_dict(payload["model"])
    model.eval()
    return model, payload


# ---------------------------------------------------------------------------
# Training drivers
# ---------------------------------------------------------------------------


def train_wavegan_command(cfg: PipelineConfig, resume: bool = False) -> dict:
    dataset = load_dataset(cfg.dataset_dir)
    utterances = dataset_utterances(dataset)
    if not utterances:
        raise ValueError("dataset is empty; nothing to train on")
    ckpt = cfg.wavegan_dir / "checkpoint.pt"
    tcfg = cfg.wavegan_trainer
    if resume and ckpt.exists():
        trainer = WaveGANTrainer.restore(ckpt)
        sampler = trainer.restore_sampler(ckpt, utterances)
    else:
        trainer = WaveGANTrainer(
            sample_rate=cfg.sample_rate,
            encoder_cfg=cfg.encoder,
            decoder_cfg=cfg.decoder,
            pitch_cfg=dataclasses.replace(cfg.pitch_predictor, in_channels=cfg.encoder.latent_dim),
            bank_cfg=cfg.bank,
            trainer_cfg=tcfg,
            weights=cfg.weights,
            stft_configs=cfg.stft_loss,
            seed=cfg.seed,
            steps_per_epoch=max(1, len(utterances) // tcfg.batch_size),
        )
        sampler = SegmentSampler(utterances, tcfg.segment_samples, seed=cfg.seed)
    remaining = max(0, tcfg.steps - trainer.step)
    metrics = MetricsLog(cfg.wavegan_dir / "metrics.ndjson")
    try:
        last = train_wavegan(trainer, sampler, remaining, metrics, ckpt)
    finally:
        metrics.close()
    write_run_record(cfg.wavegan_dir, cfg, "train-wavegan",
                     {"final_step": trainer.step, "last_losses": last})
    return last


def extract_latent_stats(
    cfg: PipelineConfig,
    checkpoint: str | Path | None = None,
    dataset_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
) -> dict:
    """Cache per-utterance posterior statistics for acoustic training."""
    ckpt = Path(checkpoint) if checkpoint else cfg.wavegan_dir / "checkpoint.pt"
    model, payload = load_wavegan_model(ckpt)
    dataset = load_dataset(dataset_dir or cfg.dataset_dir)
    if payload["sample_rate"] != dataset["sample_rate"]:
        raise VersionError(
            f"checkpoint sample rate {payload['sample_rate']} does not match"
            f" dataset rate {dataset['sample_rate']}"
        )
    out = Path(out_dir) if out_dir is not None else cfg.latents_dir
    out.mkdir(parents=True, exist_ok=True)
    entries = {}
    with torch.no_grad():
        for rec in dataset["utterances"]:
            w = _utterance_audio(dataset, rec)
            x = torch.from_numpy(w.samples).unsqueeze(0)
            post = model.encode(x)
            stats = torch.cat([post.mu, post.log_sigma], dim=0).numpy().astype(np.float32)
            np.save(out / f"{rec['id']}.npy", stats)  # [2, C, frames]... stacked on dim 0
            entries[rec["id"]] = {
                "file": f"{rec['id']}.npy",
                "frames": post.frames,
            }
            assert post.frames == latent_frame_count(rec["n_samples"])
    index = {
        "schema": LATENTS_SCHEMA,
        "latent_dim": model.encoder.cfg.latent_dim,
        "entries": entries,
    }
    (out / "index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    write_run_record(out, cfg, "extract-stats", {"count": len(entries)})
    return index


def load_latent_corpus(cfg: PipelineConfig, dataset: dict,
                       latents_dir: str | Path | None = None):
    """(mu [N, C], log_sigma [N, C], token ids) triples for acoustic training."""
    latents_dir = Path(latents_dir) if latents_dir is not None else cfg.latents_dir
    index_path = latents_dir / "index.json"
    if not index_path.exists():
        raise OSError(f"latent cache index not found: {index_path}")
    index = json.loads(index_path.read_text())
    if index.get("schema") != LATENTS_SCHEMA:
        raise VersionError(f"unsupported latent cache schema {index.get('schema')!r}")
    corpus = []
    for rec in dataset["utterances"]:
        entry = index["entries"].get(rec["id"])
        if entry is None:
            raise ValueError(f"latent cache is missing utterance {rec['id']!r}")
        arr = np.load(latents_dir / entry["file"])
        mu, log_sigma = arr[0], arr[1]
        corpus.append((
            torch.from_numpy(mu.T.copy()),
            torch.from_numpy(log_sigma.T.copy()),
            torch.tensor(rec["token_ids"], dtype=torch.long),
        ))
    return corpus, index


def train_acoustic_command(cfg: PipelineConfig, resume: bool = False) -> dict:
    dataset = load_dataset(cfg.dataset_dir)
    corpus, latent_index = load_latent_corpus(cfg, dataset)
    if latent_index["latent_dim"] != cfg.encoder.latent_dim:
        raise VersionError(
            f"latent cache dim {latent_index['latent_dim']} does not match"
            f" configured latent dim {cfg.encoder.latent_dim}"
        )
    ckpt = cfg.acoustic_dir / "checkpoint.pt"
    if resume and ckpt.exists():
        trainer = AcousticTrainer.restore(ckpt)
    else:
        trainer = AcousticTrainer(
            text_cfg=cfg.text_encoder_config(len(dataset["vocab"])),
            flow_cfg=dataclasses.replace(cfg.flow, channels=cfg.encoder.latent_dim),
            trainer_cfg=cfg.acoustic_trainer,
            seed=cfg.seed,
            steps_per_epoch=len(corpus),
        )
    remaining = max(0, cfg.acoustic_trainer.steps - trainer.step)
    metrics = MetricsLog(cfg.acoustic_dir / "metrics.ndjson")
    try:
        nlls = train_acoustic(trainer, corpus, remaining, metrics, ckpt)
    finally:
        metrics.close()
    result = {"final_step": trainer.step,
              "final_nll_per_dim": nlls[-1] if nlls else None}
    write_run_record(cfg.acoustic_dir, cfg, "train-acoustic", result)
    return result


# ---------------------------------------------------------------------------
# Synthesis and reconstruction
# ---------------------------------------------------------------------------


def synthesize_command(
    cfg: PipelineConfig,
    text: str,
    out_path: str | Path | None = None,
    temperature: float | None = None,
    seed: int | None = None,
    acoustic_checkpoint: str | Path | None = None,
    wavegan_checkpoint: str | Path | None = None,
) -> Path:
    """Text to waveform file through the two trained stages."""
    acoustic_ckpt = Path(acoustic_checkpoint) if acoustic_checkpoint else cfg.acoustic_dir / "checkpoint.pt"
    wavegan_ckpt = Path(wavegan_checkpoint) if wavegan_checkpoint else cfg.wavegan_dir / "checkpoint.pt"
    acoustic, ac_payload = load_acoustic_model(acoustic_ckpt)
    vocoder, wg_payload = load_wavegan_model(wavegan_ckpt)
    if acoustic.latent_dim != vocoder.encoder.cfg.latent_dim:
        raise VersionError(
            f"latent dimension mismatch: acoustic {acoustic.latent_dim},"
            f" waveform model {vocoder.encoder.cfg.latent_dim}"
        )
    vocab_path = cfg.vocab_file or (cfg.dataset_dir / "vocab.txt")
    vocab = Vocabulary.load(vocab_path)
    if len(vocab) != ac_payload["configs"]["text"]["vocab_size"]:
        raise VersionError(
            f"vocabulary size {len(vocab)} does not match acoustic checkpoint"
            f" ({ac_payload['configs']['text']['vocab_size']})"
        )
    tokens = get_tokenizer(cfg.tokenizer).tokenize(text)
    if not tokens:
        raise ValueError("text produced no tokens")
    ids = torch.tensor(vocab.encode(tokens), dtype=torch.long)

    temperature = cfg.temperature if temperature is None else temperature
    seed = cfg.seed if seed is None else seed
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        z, durations = acoustic.synthesize_latents(ids, temperature, generator)
        wav = vocoder.decode(z.t().unsqueeze(0)).squeeze().numpy()

    out = Path(out_path) if out_path is not None else cfg.synth_dir / "synth.wav"
    save_waveform(Waveform(wav, wg_payload["sample_rate"]), out)
    out.with_suffix(".json").write_text(json.dumps({
        "text": text,
        "tokens": tokens,
        "durations": durations.tolist(),
        "temperature": temperature,
        "seed": seed,
        "version": __version__,
    }, indent=2, sort_keys=True) + "\n")
    return out


def reconstruct_command(
    cfg: PipelineConfig,
    wavegan_checkpoint: str | Path | None = None,
    dataset_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> list[Path]:
    """Decode each utterance from a sampled posterior latent (copy synthesis)."""
    ckpt = Path(wavegan_checkpoint) if wavegan_checkpoint else cfg.wavegan_dir / "checkpoint.pt"
    model, payload = load_wavegan_model(ckpt)
    dataset = load_dataset(dataset_dir or cfg.dataset_dir)
    out = Path(out_dir) if out_dir is not None else cfg.synth_dir / "recon"
    out.mkdir(parents=True, exist_ok=True)
    generator = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    paths = []
    with torch.no_grad():
        for rec in dataset["utterances"]:
            w = _utterance_audio(dataset, rec)
            post = model.encode(torch.from_numpy(w.samples).unsqueeze(0))
            z = post.mu + post.sigma * torch.randn(post.mu.shape, generator=generator)
            wav = model.decode(z).squeeze().numpy()[: len(w)]
            path = out / f"{rec['id']}.wav"
            save_waveform(Waveform(wav, payload["sample_rate"]), path)
            paths.append(path)
    write_run_record(out, cfg, "reconstruct", {"count": len(paths)})
    return paths


# ---------------------------------------------------------------------------
# Objective evaluation
# ---------------------------------------------------------------------------


def mel_l1_distance(a: Waveform, b: Waveform) -> float:
    """Mean absolute log-mel difference over the common frame span."""
    ma = mel_spectrogram(a, EVAL_SPECTRAL, EVAL_N_MELS)
    mb = mel_spectrogram(b, EVAL_SPECTRAL, EVAL_N_MELS)
    n = min(ma.shape[0], mb.shape[0])
    return float(np.abs(ma[:n] - mb[:n]).mean())


def mel_cepstral_distortion(a: Waveform, b: Waveform, n_coeffs: int = 13) -> float:
    """MCD in dB over mel-cepstra (coefficients 1..n_coeffs-1, c0 excluded)."""
    ca = dct(mel_spectrogram(a, EVAL_SPECTRAL, EVAL_N_MELS), type=2, norm="ortho", axis=1)
    cb = dct(mel_spectrogram(b, EVAL_SPECTRAL, EVAL_N_MELS), type=2, norm="ortho", axis=1)
    n = min(ca.shape[0], cb.shape[0])
    diff = ca[:n, 1:n_coeffs] - cb[:n, 1:n_coeffs]
    per_frame = np.sqrt(2.0 * (diff * diff).sum(axis=1))
    return float((10.0 / np.log(10.0)) * per_frame.mean())


def voiced_pitch_rmse(a: Waveform, b: Waveform) -> tuple[float, int]:
    """RMSE of log-F0 over frames voiced in both signals; (value, frame count)."""
    pa = extract_pitch(a)
    pb = extract_pitch(b)
    n = min(len(pa), len(pb))
    both = pa.voicing[:n] & pb.voicing[:n]
    if not both.any():
        return 0.0, 0
    diff = pa.log_f0[:n][both] - pb.log_f0[:n][both]
    return float(np.sqrt((diff * diff).mean())), int(both.sum())


@dataclass
class ReconReport:
    utterances: list[dict]
    aggregates: dict

    def to_dict(self) -> dict:
        return {"utterances": self.utterances, "aggregates": self.aggregates}


def evaluate_reconstruction(
    cfg: PipelineConfig,
    wavegan_checkpoint: str | Path | None = None,
    dataset_dir: str | Path | None = None,
    out_dir: str | Path | None = None,
    seed: int | None = None,
) -> ReconReport:
    """Copy-synthesis quality against the originals: mel-L1, MCD, pitch RMSE.

    Meaningful numbers require utterances held out of training; nothing here
    enforces that split.
    """
    ckpt = Path(wavegan_checkpoint) if wavegan_checkpoint else cfg.wavegan_dir / "checkpoint.pt"
    model, payload = load_wavegan_model(ckpt)
    dataset = load_dataset(dataset_dir or cfg.dataset_dir)
    generator = torch.Generator().manual_seed(cfg.seed if seed is None else seed)
    rows = []
    with torch.no_grad():
        for rec in dataset["utterances"]:
            w = _utterance_audio(dataset, rec)
            post = model.encode(torch.from_numpy(w.samples).unsqueeze(0))
            z = post.mu + post.sigma * torch.randn(post.mu.shape, generator=generator)
            wav = model.decode(z).squeeze().numpy()[: len(w)]
            w_hat = Waveform(wav, payload["sample_rate"])
            rmse, n_voiced = voiced_pitch_rmse(w, w_hat)
            rows.append({
                "id": rec["id"],
                "mel_l1": mel_l1_distance(w, w_hat),
                "mcd": mel_cepstral_distortion(w, w_hat),
                "pitch_rmse": rmse,
                "voiced_frames": n_voiced,
            })
    aggregates = {
        key: float(np.mean([r[key] for r in rows])) if rows else 0.0
        for key in ("mel_l1", "mcd", "pitch_rmse")
    }
    aggregates["count"] = len(rows)
    report = ReconReport(rows, aggregates)
    out = Path(out_dir) if out_dir is not None else cfg.eval_dir
    out.mkdir(parents=True, exist_ok=True)
    (out / "recon_report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    write_run_record(out, cfg, "eval-recon", {"aggregates": aggregates})
    return report


def pitch_ablation_command(
    cfg: PipelineConfig,
    steps: int | None = None,
    out_path: str | Path | None = None,
) -> dict[str, list[tuple[int, float]]]:
    """Twin-run pitch supervision experiment; writes step/value records."""
    dataset = load_dataset(cfg.dataset_dir)
    utterances = dataset_utterances(dataset)
    if not utterances:
        raise ValueError("dataset is empty")
    steps = steps if steps is not None else cfg.wavegan_trainer.steps
    curves = stop_gradient_pitch_experiment(
        utterances,
        steps,
        sample_rate=cfg.sample_rate,
        encoder_cfg=cfg.encoder,
        decoder_cfg=cfg.decoder,
        bank_cfg=cfg.bank,
        trainer_cfg=cfg.wavegan_trainer,
        weights=cfg.weights,
        stft_configs=cfg.stft_loss,
        seed=cfg.seed,
    )
    out = Path(out_path) if out_path is not None else Path(cfg.workdir) / "pitch_ablation.ndjson"
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w") as fh:
        for variant, curve in curves.items():
            for step, value in curve:
                fh.write(json.dumps({"variant": variant, "step": step, "value": value}) + "\n")
    write_run_record(out.parent, cfg, "pitch-ablation",
                     {"steps": steps, "output": str(out)})
    return curves
