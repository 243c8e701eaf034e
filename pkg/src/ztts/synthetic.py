"""Synthetic speech-like corpus generator for experiments and tests.

Clips alternate voiced vowel-like segments (pulse-rich source through
formant resonators, with per-clip F0 contours) and short fricative-like
noise bursts, separated by silences at word boundaries. Each clip carries
a pseudo-transcript whose letters follow the segment sequence, so text and
audio are genuinely correlated.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from scipy.signal import lfilter

from .signal_core import Waveform, save_waveform

# formant pairs (Hz) for the five vowel letters used in transcripts
VOWEL_FORMANTS = {
    "a": (800, 1200),
    "e": (500, 1900),
    "i": (300, 2300),
    "o": (450, 900),
    "u": (350, 700),
}


def _resonator(x: np.ndarray, sr: int, freq: float, bandwidth: float = 120.0) -> np.ndarray:
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2 * np.pi * freq / sr
    return lfilter([1.0 - r], [1.0, -2.0 * r * np.cos(theta), r * r], x)


def _vowel_segment(rng: np.random.Generator, sr: int, n: int, f0: np.ndarray, vowel: str) -> np.ndarray:
    phase = np.cumsum(2 * np.pi * f0 / sr)
    source = 2.0 * ((phase / (2 * np.pi)) % 1.0) - 1.0  # harmonic-rich ramp
    f1, f2 = VOWEL_FORMANTS[vowel]
    jitter = 1.0 + 0.05 * rng.standard_normal(2)
    out = _resonator(source, sr, f1 * jitter[0]) + 0.7 * _resonator(source, sr, f2 * jitter[1])
    env = np.hanning(n) ** 0.5
    return out * env


def _noise_segment(rng: np.random.Generator, sr: int, n: int) -> np.ndarray:
    noise = rng.standard_normal(n)
    shaped = _resonator(noise, sr, min(0.35 * sr, 4000.0), bandwidth=1500.0)
    return shaped * np.hanning(n) ** 0.5 * 0.5


def synth_utterance(
    rng: np.random.Generator,
    sample_rate: int = 24000,
    n_words: int = 2,
    f0_base: float | None = None,
    f0_mod_depth: float = 0.15,
) -> tuple[np.ndarray, str]:
    """One clip plus its pseudo-transcript.

    ``f0_mod_depth`` sets the log-domain swing of the pitch contour; deep
    swings make clips overlap in F0 range, so frame-level pitch cannot be
    read off clip identity.
    """
    if f0_base is None:
        f0_base = float(rng.uniform(110.0, 280.0))
    pieces: list[np.ndarray] = []
    words: list[str] = []
    vowels = list(VOWEL_FORMANTS)
    for w in range(n_words):
        letters = []
        n_syllables = int(rng.integers(1, 3))
        for _ in range(n_syllables):
            if rng.random() < 0.45:
                n = int(rng.uniform(0.05, 0.1) * sample_rate)
                pieces.append(_noise_segment(rng, sample_rate, n))
                letters.append("s" if rng.random() < 0.5 else "t")
            vowel = vowels[rng.integers(len(vowels))]
            n = int(rng.uniform(0.12, 0.3) * sample_rate)
            # smooth contour: declination plus slow vibrato
            t = np.arange(n) / sample_rate
            contour = f0_base * np.exp(
                f0_mod_depth
                * np.sin(2 * np.pi * rng.uniform(2.0, 4.0) * t + rng.uniform(0, 6.28))
                - 0.1 * t
            )
            pieces.append(_vowel_segment(rng, sample_rate, n, contour, vowel))
            letters.append(vowel)
        words.append("".join(letters))
        if w != n_words - 1:
            pieces.append(np.zeros(int(rng.uniform(0.04, 0.1) * sample_rate)))
    samples = np.concatenate(pieces)
    samples = samples / max(np.max(np.abs(samples)), 1e-9) * 0.8
    return samples.astype(np.float32), " ".join(words)


def make_corpus(
    out_dir: str | Path,
    n_clips: int = 10,
    sample_rate: int = 24000,
    seed: int = 0,
    n_words: int = 2,
    f0_mod_depth: float = 0.15,
) -> Path:
    """Write wav files and a `path|transcript` manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    wav_dir = out_dir / "wavs"
    wav_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    lines = []
    for i in range(n_clips):
        samples, transcript = synth_utterance(rng, sample_rate, n_words=n_words,
                                              f0_mod_depth=f0_mod_depth)
        rel = f"wavs/clip_{i:03d}.wav"
        save_waveform(Waveform(samples, sample_rate), out_dir / rel)
        lines.append(f"{rel}|{transcript}")
    manifest = out_dir / "manifest.txt"
    manifest.write_text("".join(line + "\n" for line in lines))
    return manifest
