"""Deterministic signal processing: waveform I/O, resampling, STFT/mel
analysis, pitch extraction, and the multi-resolution STFT loss.

Analysis functions are pure numpy (float64 internally); the training
losses are torch modules so gradients flow. Both share one framing
policy: centered frames over a reflect-padded signal, hop-spaced, with
``1 + len // hop`` frames.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import FormatError

# Samples per latent frame: the autoencoder's total down-sampling factor.
DOWNSAMPLE_FACTOR = 256

LOG_MAG_FLOOR = 1e-5


def latent_frame_count(n_samples: int, hop: int = DOWNSAMPLE_FACTOR) -> int:
    """Number of latent-rate frames covering ``n_samples`` samples."""
    return -(-n_samples // hop)


@dataclass
class Waveform:
    """Mono audio: float samples (nominally in [-1, 1]) plus a sample rate."""

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.samples.ndim != 1:
            raise ValueError(f"expected mono 1-D samples, got shape {self.samples.shape}")
        if self.samples.size < 1:
            raise ValueError("waveform must contain at least one sample")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


def load_waveform(path: str | Path) -> Waveform:
    """Read a PCM WAV file as a mono waveform.

    Integer PCM is scaled by the type's full range (so an int16 peak of
    32767 maps to 32767/32768); float files are taken as-is. Multi-channel
    input is averaged down to mono. No level normalization is applied here;
    see :func:`peak_normalize`.
    """
    path = Path(path)
    if not path.exists():
        raise OSError(f"audio file not found: {path}")
    try:
        rate, data = wavfile.read(str(path))
    except ValueError as exc:
        raise FormatError(f"unsupported WAV encoding in {path}: {exc}") from exc
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        samples = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        samples = (data.astype(np.float64) - 128.0) / 128.0
    elif data.dtype in (np.float32, np.float64):
        samples = data.astype(np.float64)
    else:
        raise FormatError(f"unsupported WAV sample format {data.dtype} in {path}")
    if samples.ndim == 2:
        samples = samples.mean(axis=1)
    if samples.size == 0:
        raise FormatError(f"empty audio file: {path}")
    return Waveform(samples.astype(np.float32), int(rate))


def save_waveform(w: Waveform, path: str | Path) -> None:
    """Write a mono float32 PCM WAV file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    wavfile.write(str(path), w.sample_rate, np.asarray(w.samples, dtype=np.float32))


def peak_normalize(w: Waveform, peak: float = 0.95) -> Waveform:
    """Scale so the largest absolute sample sits at ``peak``.

    Silent input is returned unchanged. Applied at ingestion so training
    sees a consistent level regardless of source recording gain.
    """
    top = float(np.max(np.abs(w.samples)))
    if top == 0.0:
        return Waveform(w.samples.copy(), w.sample_rate)
    return Waveform(w.samples * (peak / top), w.sample_rate)


def resample(w: Waveform, target_rate: int) -> Waveform:
    """Polyphase resampling to ``target_rate`` Hz, duration preserved."""
    if target_rate <= 0:
        raise ValueError(f"target_rate must be positive, got {target_rate}")
    if target_rate == w.sample_rate:
        return Waveform(w.samples.copy(), w.sample_rate)
    g = math.gcd(target_rate, w.sample_rate)
    out = resample_poly(w.samples.astype(np.float64), target_rate // g, w.sample_rate // g)
    return Waveform(out.astype(np.float32), target_rate)


# ---------------------------------------------------------------------------
# STFT / mel analysis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SpectralConfig:
    """One STFT analysis setting: sizes in samples."""

    fft_size: int
    hop_size: int
    window_size: int
    window: str = "hann"

    def __post_init__(self):
        if not (0 < self.hop_size <= self.window_size <= self.fft_size):
            raise ValueError(
                f"need 0 < hop ({self.hop_size}) <= window ({self.window_size})"
                f" <= fft ({self.fft_size})"
            )

    @property
    def n_bins(self) -> int:
        return self.fft_size // 2 + 1


def _make_window(name: str, length: int) -> np.ndarray:
    if name == "hann":
        # periodic variant, matching torch.hann_window
        n = np.arange(length, dtype=np.float64)
        return 0.5 - 0.5 * np.cos(2.0 * np.pi * n / length)
    if name in ("rect", "rectangular", "boxcar"):
        return np.ones(length, dtype=np.float64)
    raise ValueError(f"unknown window {name!r}")


def _padded_window(cfg: SpectralConfig) -> np.ndarray:
    win = _make_window(cfg.window, cfg.window_size)
    if cfg.window_size == cfg.fft_size:
        return win
    out = np.zeros(cfg.fft_size, dtype=np.float64)
    left = (cfg.fft_size - cfg.window_size) // 2
    out[left : left + cfg.window_size] = win
    return out


def _frame_centered(x: np.ndarray, cfg: SpectralConfig) -> np.ndarray:
    """Frame ``x`` into centered, reflect-padded windows of fft_size."""
    pad = cfg.fft_size // 2
    if x.size <= pad:
        raise ValueError(
            f"waveform too short ({x.size} samples) for fft_size {cfg.fft_size} with centering"
        )
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + x.size // cfg.hop_size
    starts = np.arange(n_frames) * cfg.hop_size
    idx = starts[:, None] + np.arange(cfg.fft_size)[None, :]
    return padded[idx]


def stft_magnitude(w: Waveform | np.ndarray, cfg: SpectralConfig) -> np.ndarray:
    """Magnitude spectrogram, shape [frames, fft_size//2 + 1].

    Frames are centered on multiples of the hop over a reflect-padded
    signal, so frame t is anchored at sample ``t * hop``; windows shorter
    than the FFT are zero-padded symmetrically.
    """
    x = np.asarray(w.samples if isinstance(w, Waveform) else w, dtype=np.float64)
    if x.size == 0:
        raise ValueError("cannot compute STFT of an empty waveform")
    frames = _frame_centered(x, cfg) * _padded_window(cfg)[None, :]
    return np.abs(np.fft.rfft(frames, n=cfg.fft_size, axis=1))


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(
    sample_rate: int, fft_size: int, n_mels: int, fmin: float, fmax: float
) -> np.ndarray:
    """Triangular mel filterbank, shape [n_mels, fft_size//2 + 1], peak 1."""
    if not (0 <= fmin < fmax):
        raise ValueError(f"need 0 <= fmin < fmax, got fmin={fmin}, fmax={fmax}")
    if fmax > sample_rate / 2:
        raise ValueError(f"fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    n_bins = fft_size // 2 + 1
    bin_hz = np.arange(n_bins) * sample_rate / fft_size
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = edges[m], edges[m + 1], edges[m + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    if np.any(fb.sum(axis=1) <= 0):
        raise ValueError(
            f"mel filterbank has empty rows: n_mels={n_mels} too large for fft_size={fft_size}"
        )
    return fb


def mel_spectrogram(
    w: Waveform,
    cfg: SpectralConfig,
    n_mels: int,
    fmin: float = 0.0,
    fmax: float | None = None,
    log: bool = True,
) -> np.ndarray:
    """Mel spectrogram, shape [frames, n_mels]; log-compressed by default.

    Magnitudes are clamped at ``LOG_MAG_FLOOR`` before the log so silence
    maps to a finite floor value.
    """
    if fmax is None:
        fmax = w.sample_rate / 2
    fb = mel_filterbank(w.sample_rate, cfg.fft_size, n_mels, fmin, fmax)
    mel = stft_magnitude(w, cfg) @ fb.T
    if log:
        mel = np.log(np.maximum(mel, LOG_MAG_FLOOR))
    return mel


# ---------------------------------------------------------------------------
# Multi-resolution STFT loss (torch, differentiable)
# ---------------------------------------------------------------------------

# Fine-to-coarse analysis triple used widely for adversarial vocoders.
DEFAULT_STFT_LOSS_CONFIGS = (
    SpectralConfig(fft_size=512, hop_size=50, window_size=240),
    SpectralConfig(fft_size=1024, hop_size=120, window_size=600),
    SpectralConfig(fft_size=2048, hop_size=240, window_size=1200),
)


def torch_stft_magnitude(x: torch.Tensor, cfg: SpectralConfig, window: torch.Tensor) -> torch.Tensor:
    """|STFT| of a batch [B, T] -> [B, bins, frames], same framing as numpy path.

    ``window`` has length ``cfg.window_size``; torch pads it to the FFT size
    symmetrically, matching the numpy analysis path.
    """
    spec = torch.stft(
        x,
        n_fft=cfg.fft_size,
        hop_length=cfg.hop_size,
        win_length=cfg.window_size,
        window=window,
        center=True,
        pad_mode="reflect",
        onesided=True,
        return_complex=True,
    )
    return spec.abs()


def stft_loss_terms(
    target: torch.Tensor, estimate: torch.Tensor, cfg: SpectralConfig, window: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor]:
    """Spectral-convergence and log-magnitude L1 terms for one resolution."""
    mag_t = torch_stft_magnitude(target, cfg, window)
    mag_e = torch_stft_magnitude(estimate, cfg, window)
    diff = torch.linalg.vector_norm(mag_t - mag_e, dim=(1, 2))
    denom = torch.linalg.vector_norm(mag_t, dim=(1, 2)).clamp_min(1e-12)
    sc = (diff / denom).mean()
    log_l1 = (mag_t.clamp_min(LOG_MAG_FLOOR).log() - mag_e.clamp_min(LOG_MAG_FLOOR).log()).abs().mean()
    return sc, log_l1


class MultiResolutionSTFTLoss(torch.nn.Module):
    """Mean over resolutions of spectral convergence + log-magnitude L1."""

    def __init__(self, configs: tuple[SpectralConfig, ...] = DEFAULT_STFT_LOSS_CONFIGS):
        super().__init__()
        if len(configs) == 0:
            raise ValueError("need at least one STFT resolution")
        self.configs = tuple(configs)
        for i, cfg in enumerate(self.configs):
            win = torch.from_numpy(_make_window(cfg.window, cfg.window_size)).float()
            self.register_buffer(f"window_{i}", win)

    def forward(self, target: torch.Tensor, estimate: torch.Tensor) -> torch.Tensor:
        if target.dim() == 3:
            target = target.squeeze(1)
        if estimate.dim() == 3:
            estimate = estimate.squeeze(1)
        if target.shape != estimate.shape:
            raise ValueError(f"length mismatch: {tuple(target.shape)} vs {tuple(estimate.shape)}")
        total = target.new_zeros(())
        for i, cfg in enumerate(self.configs):
            window = getattr(self, f"window_{i}").to(target.dtype)
            sc, log_l1 = stft_loss_terms(target, estimate, cfg, window)
            total = total + sc + log_l1
        return total / len(self.configs)


def multi_resolution_stft_loss(
    w: Waveform, w_hat: Waveform, cfgs: tuple[SpectralConfig, ...] = DEFAULT_STFT_LOSS_CONFIGS
) -> float:
    """Scalar multi-resolution STFT loss between two equal-length waveforms."""
    if len(w) != len(w_hat):
        raise ValueError(f"length mismatch: {len(w)} vs {len(w_hat)}")
    loss = MultiResolutionSTFTLoss(cfgs)
    with torch.no_grad():
        a = torch.from_numpy(np.asarray(w.samples, dtype=np.float32)).unsqueeze(0)
        b = torch.from_numpy(np.asarray(w_hat.samples, dtype=np.float32)).unsqueeze(0)
        return float(loss(a, b))


class LogMelAnalyzer(torch.nn.Module):
    """Differentiable log-mel front end matching the numpy analysis path."""

    def __init__(
        self,
        sample_rate: int,
        cfg: SpectralConfig,
        n_mels: int,
        fmin: float = 0.0,
        fmax: float | None = None,
    ):
        super().__init__()
        self.cfg = cfg
        if fmax is None:
            fmax = sample_rate / 2
        fb = mel_filterbank(sample_rate, cfg.fft_size, n_mels, fmin, fmax)
        self.register_buffer("filterbank", torch.from_numpy(fb).float())
        self.register_buffer("window", torch.from_numpy(_make_window(cfg.window, cfg.window_size)).float())

    @property
    def n_mels(self) -> int:
        return self.filterbank.shape[0]

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # [B, T] -> [B, n_mels, frames]
        if x.dim() == 3:
            x = x.squeeze(1)
        mag = torch_stft_magnitude(x, self.cfg, self.window.to(x.dtype))
        mel = torch.matmul(self.filterbank.to(x.dtype), mag)
        return mel.clamp_min(LOG_MAG_FLOOR).log()


# ---------------------------------------------------------------------------
# Pitch extraction
# ---------------------------------------------------------------------------


@dataclass
class PitchTrack:
    """Frame-level log-F0 with a voicing mask; one frame per ``hop_size`` samples.

    Unvoiced frames carry values interpolated from their voiced neighbors
    so the track is everywhere finite; the mask records which frames were
    actually periodic.
    """

    log_f0: np.ndarray
    voicing: np.ndarray
    hop_size: int

    def __post_init__(self):
        self.log_f0 = np.asarray(self.log_f0, dtype=np.float64)
        self.voicing = np.asarray(self.voicing, dtype=bool)
        if self.log_f0.shape != self.voicing.shape:
            raise ValueError("log_f0 and voicing must have matching shapes")
        if not np.all(np.isfinite(self.log_f0)):
            raise ValueError("log_f0 must be finite everywhere (fill unvoiced frames)")

    def __len__(self) -> int:
        return self.log_f0.size


def _fill_unvoiced(log_f0: np.ndarray, voicing: np.ndarray, band: tuple[float, float]) -> np.ndarray:
    if not voicing.any():
        # no pitch anywhere: fall back to the band's geometric center
        return np.full_like(log_f0, 0.5 * (math.log(band[0]) + math.log(band[1])))
    idx = np.arange(log_f0.size)
    return np.interp(idx, idx[voicing], log_f0[voicing])


def _refine_peak(r: np.ndarray, k: int) -> tuple[float, float]:
    """Parabolic interpolation of a correlation peak: (lag, height)."""
    if not (0 < k < r.size - 1):
        return float(k), float(r[k])
    a, b, c = r[k - 1], r[k], r[k + 1]
    denom = a - 2 * b + c
    if abs(denom) < 1e-12:
        return float(k), float(b)
    off = 0.5 * (a - c) / denom
    off = min(max(off, -0.5), 0.5)
    return k + off, float(b - 0.25 * (a - c) * off)


def _best_period(r: np.ndarray, min_lag: int, max_lag: int, octave_cost: float = 0.02) -> tuple[float, float]:
    """Pick the period lag from a normalized correlation curve.

    Integer lags undersample the peaks, so candidates are parabolically
    refined before comparison. Multiples of the true period correlate just
    as well as the period itself, so longer lags pay a small per-octave
    penalty; without it a periodic signal resolves octaves low.
    """
    band = r[min_lag : max_lag + 1]
    interior = np.nonzero((band >= np.roll(band, 1)) & (band >= np.roll(band, -1)))[0]
    interior = interior[(interior > 0) & (interior < band.size - 1)]
    candidates = [_refine_peak(r, min_lag + int(k)) for k in interior]
    if not candidates:
        k = min_lag + int(np.argmax(band))
        candidates = [_refine_peak(r, k)]
    return max(candidates, key=lambda c: c[1] - octave_cost * math.log2(c[0] / min_lag))


def extract_pitch(
    w: Waveform,
    hop_size: int = DOWNSAMPLE_FACTOR,
    fmin: float = 50.0,
    fmax: float = 800.0,
    voicing_threshold: float = 0.5,
    energy_threshold: float = 1e-4,
) -> PitchTrack:
    """Normalized-autocorrelation pitch tracker at the latent frame rate.

    Each frame correlates a window of one ``fmin`` period against lagged
    copies; the best lag in the [fmin, fmax] band gives F0 after parabolic
    refinement. Near signal edges the analysis span slides inward so every
    frame sees real samples. Frame count is ``ceil(len(w) / hop_size)``.
    """
    x = np.asarray(w.samples, dtype=np.float64)
    sr = w.sample_rate
    n_frames = latent_frame_count(x.size, hop_size)
    max_lag = int(round(sr / fmin))
    min_lag = max(2, int(round(sr / fmax)))
    win = max_lag
    span = win + max_lag

    log_f0 = np.zeros(n_frames)
    voicing = np.zeros(n_frames, dtype=bool)
    if x.size < span or min_lag >= max_lag:
        return PitchTrack(_fill_unvoiced(log_f0, voicing, (fmin, fmax)), voicing, hop_size)

    for i in range(n_frames):
        center = i * hop_size + hop_size // 2
        start = min(max(center - span // 2, 0), x.size - span)
        seg = x[start : start + span]
        head = seg[:win]
        rms = math.sqrt(float(np.mean(head * head)))
        if rms < energy_threshold:
            continue
        num = np.correlate(seg, head, mode="valid")  # num[k] = sum head * seg[k:k+win]
        sq = np.concatenate(([0.0], np.cumsum(seg * seg)))
        energies = sq[win:] - sq[:-win]  # energy of seg[k : k+win]
        denom = np.sqrt(np.maximum(energies[0] * energies, 1e-20))
        r = num / denom
        lag, strength = _best_period(r, min_lag, max_lag)
        if strength < voicing_threshold:
            continue
        f0 = min(max(sr / lag, fmin), fmax)
        log_f0[i] = math.log(f0)
        voicing[i] = True

    return PitchTrack(_fill_unvoiced(log_f0, voicing, (fmin, fmax)), voicing, hop_size)
