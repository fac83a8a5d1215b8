"""Waveform -> normalised log-mel patch tokens, aligned log-power spectra, and chunk layouts."""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import resample_poly

from .errors import ConfigError, DataError

SAMPLE_RATE = 16000


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = SAMPLE_RATE
    win_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 128
    mel_floor: float = 1e-10
    fmin: float = 0.0
    fmax: float | None = None
    chunk_seconds: float = 6.0
    overlap_seconds: float = 1.0
    min_segment_seconds: float = 1.0
    norm_eps: float = 1e-8

    @property
    def win_length(self) -> int:
        return int(round(self.sample_rate * self.win_ms / 1000))

    @property
    def hop_length(self) -> int:
        return int(round(self.sample_rate * self.hop_ms / 1000))

    @property
    def frame_rate(self) -> float:
        return self.sample_rate / self.hop_length

    @property
    def token_rate(self) -> float:
        """Patch tokens per second (two frames per token)."""
        return self.frame_rate / 2

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def patch_width(self) -> int:
        return 2 * self.n_mels

    def seconds_to_tokens(self, seconds: float) -> int:
        return int(round(seconds * self.token_rate))


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.samples.ndim != 1:
            raise DataError("waveform must be mono (1-D)")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class MelFrameSequence:
    frames: np.ndarray  # (time, n_mels)
    frame_rate: float


@dataclass
class PatchSequence:
    tokens: np.ndarray  # (N, 2 * n_mels)
    time_per_token: float

    @property
    def n(self) -> int:
        return self.tokens.shape[0]


@dataclass
class PowerSpectrumSequence:
    S: np.ndarray  # (T, n_bins)


@dataclass
class ChunkLayout:
    """Chunk boundaries as half-open token ranges [start, end)."""

    bounds: list[tuple[int, int]]
    n_tokens: int
    chunk_tokens: int
    overlap_tokens: int
    token_rate: float

    def __len__(self):
        return len(self.bounds)

    def seconds(self) -> list[tuple[float, float]]:
        return [(s / self.token_rate, e / self.token_rate) for s, e in self.bounds]


# -- audio ingestion -------------------------------------------------------


def load_wav(path: str | Path, target_rate: int = SAMPLE_RATE) -> Waveform:
    """Read a PCM WAV file, downmix to mono, and resample to ``target_rate``."""
    try:
        rate, data = wavfile.read(str(path))
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read audio {path}: {e}") from e
    if data.size == 0:
        raise DataError(f"zero-length audio: {path}")
    if data.dtype == np.int16:
        x = data.astype(np.float64) / 32768.0
    elif data.dtype == np.int32:
        x = data.astype(np.float64) / 2147483648.0
    elif data.dtype == np.uint8:
        x = (data.astype(np.float64) - 128.0) / 128.0
    else:
        x = data.astype(np.float64)
    if x.ndim == 2:
        x = x.mean(axis=1)
    if rate != target_rate:
        x = resample(x, rate, target_rate)
    return Waveform(x, target_rate)


def resample(x: np.ndarray, orig_rate: int, target_rate: int) -> np.ndarray:
    frac = Fraction(target_rate, orig_rate)
    return resample_poly(x, frac.numerator, frac.denominator)


def save_wav(path: str | Path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32767.0), -32768, 32767).astype(np.int16)
    wavfile.write(str(path), sample_rate, pcm)


# -- spectral analysis -----------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(cfg: FrontendConfig) -> np.ndarray:
    """Triangular HTK-scale filters, shape (n_mels, n_bins), peak weight 1."""
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    mel_pts = np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)
    bin_hz = np.arange(cfg.n_bins) * cfg.sample_rate / cfg.n_fft
    lo, center, hi = hz_pts[:-2, None], hz_pts[1:-1, None], hz_pts[2:, None]
    rising = (bin_hz[None, :] - lo) / (center - lo)
    falling = (hi - bin_hz[None, :]) / (hi - center)
    return np.maximum(0.0, np.minimum(rising, falling))


def mel_centers_hz(cfg: FrontendConfig) -> np.ndarray:
    fmax = cfg.fmax if cfg.fmax is not None else cfg.sample_rate / 2
    return mel_to_hz(np.linspace(hz_to_mel(cfg.fmin), hz_to_mel(fmax), cfg.n_mels + 2))[1:-1]


def stft_power(w: Waveform, cfg: FrontendConfig) -> np.ndarray:
    """|STFT|^2 frames, shape (n_frames, n_bins), with n_frames = len // hop.

    The signal is end-padded by (win - hop) zeros so a 6 s clip at a 10 ms hop
    yields exactly 600 frames. A periodic Hann window is zero-padded to n_fft.
    """
    if w.sample_rate != cfg.sample_rate:
        raise DataError(f"expected {cfg.sample_rate} Hz audio, got {w.sample_rate}")
    win, hop = cfg.win_length, cfg.hop_length
    if len(w.samples) < win:
        raise DataError(f"waveform of {len(w.samples)} samples is shorter than one window ({win})")
    x = np.concatenate([w.samples, np.zeros(win - hop)])
    n_frames = len(w.samples) // hop
    idx = np.arange(win)[None, :] + hop * np.arange(n_frames)[:, None]
    window = 0.5 - 0.5 * np.cos(2 * np.pi * np.arange(win) / win)
    spec = np.fft.rfft(x[idx] * window, n=cfg.n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def compute_logmel(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> MelFrameSequence:
    power = stft_power(w, cfg)
    mel = power @ mel_filterbank(cfg).T
    return MelFrameSequence(np.log(mel + cfg.mel_floor), cfg.frame_rate)


def instance_normalize(m: MelFrameSequence, eps: float = 1e-8) -> MelFrameSequence:
    """Z-score over every element of the instance; zero variance maps to all zeros."""
    x = m.frames
    if x.shape[0] < 2:
        raise DataError("instance normalisation needs at least 2 frames")
    centered = x - x.mean()
    std = centered.std()
    if std < eps:
        return MelFrameSequence(np.zeros_like(x), m.frame_rate)
    return MelFrameSequence(centered / std, m.frame_rate)


def patchify(m: MelFrameSequence) -> PatchSequence:
    """Kernel-2/stride-2 patching along time; a trailing odd frame is dropped."""
    frames = m.frames
    if frames.shape[0] < 2:
        raise DataError("patchify needs at least 2 frames")
    n = frames.shape[0] // 2
    tokens = frames[: 2 * n].reshape(n, 2 * frames.shape[1])
    return PatchSequence(tokens, 2.0 / m.frame_rate)


def compute_power_spectrum(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> PowerSpectrumSequence:
    """Log-power frames, z-normed per instance, then mean-pooled in pairs (one row per patch)."""
    logp = np.log(stft_power(w, cfg) + cfg.mel_floor)
    centered = logp - logp.mean()
    std = centered.std()
    z = np.zeros_like(logp) if std < cfg.norm_eps else centered / std
    n = z.shape[0] // 2
    if n < 1:
        raise DataError("power spectrum needs at least 2 frames")
    pooled = z[: 2 * n].reshape(n, 2, z.shape[1]).mean(axis=1)
    return PowerSpectrumSequence(pooled)


def compute_patches(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> PatchSequence:
    return patchify(instance_normalize(compute_logmel(w, cfg), cfg.norm_eps))


def layout_chunks(n_tokens: int, mode: str, cfg: FrontendConfig = FrontendConfig()) -> ChunkLayout:
    """Split a token sequence into chunk windows.

    ``pretrain``: back-to-back blocks of at most chunk_seconds; blocks shorter
    than min_segment_seconds are dropped. ``inference``: windows of
    chunk_seconds advancing by chunk - overlap; the last window may be short.
    """
    if n_tokens < 1:
        raise ConfigError("n_tokens must be >= 1")
    chunk = cfg.seconds_to_tokens(cfg.chunk_seconds)
    if mode == "pretrain":
        min_len = cfg.seconds_to_tokens(cfg.min_segment_seconds)
        bounds = [
            (s, min(s + chunk, n_tokens))
            for s in range(0, n_tokens, chunk)
            if min(s + chunk, n_tokens) - s >= min_len
        ]
        return ChunkLayout(bounds, n_tokens, chunk, 0, cfg.token_rate)
    if mode == "inference":
        overlap = cfg.seconds_to_tokens(cfg.overlap_seconds)
        stride = chunk - overlap
        if stride <= 0:
            raise ConfigError("overlap must be shorter than the chunk")
        bounds = [(0, min(chunk, n_tokens))]
        while bounds[-1][1] < n_tokens:
            start = bounds[-1][0] + stride
            bounds.append((start, min(start + chunk, n_tokens)))
        return ChunkLayout(bounds, n_tokens, chunk, overlap, cfg.token_rate)
    raise ConfigError(f"unknown chunk mode {mode!r}")


@dataclass
class Features:
    """Everything the downstream model consumes for one clip."""

    patches: np.ndarray
    spectrum: np.ndarray
    duration: float


def extract_features(w: Waveform, cfg: FrontendConfig = FrontendConfig()) -> Features:
    patches = compute_patches(w, cfg).tokens
    spectrum = compute_power_spectrum(w, cfg).S
    n = min(len(patches), len(spectrum))
    return Features(patches[:n], spectrum[:n], w.duration)


def num_tokens(duration: float, cfg: FrontendConfig = FrontendConfig()) -> int:
    n_samples = int(math.floor(duration * cfg.sample_rate))
    return (n_samples // cfg.hop_length) // 2
