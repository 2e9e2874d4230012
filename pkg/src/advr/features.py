"""Audio loading, log-power spectrograms, and the synthetic two-class dataset.

Spectrograms are (frames, bins) float64 arrays of log(|X|^2 + floor) over
Hamming-windowed frames. Framing starts at sample 0 with a fixed hop; clips
shorter than the requested frame count are padded with log-floor rows. The
defaults (16 kHz, 512-point FFT, 1 ms hop, 600 frames) give 600x257 inputs.
"""

from __future__ import annotations

import struct
import wave
from dataclasses import dataclass

import numpy as np

from .errors import AudioFormatError, SpectrogramFormatError

SPECTROGRAM_MAGIC = b"ADVS"
SPECTROGRAM_VERSION = 1


@dataclass(frozen=True)
class AudioClip:
    """Mono waveform with samples in [-1, 1]."""

    samples: np.ndarray
    sample_rate: int


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16000
    n_fft: int = 512
    hop_seconds: float = 0.001
    frames: int = 600
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise AudioFormatError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.n_fft < 4 or self.n_fft % 2 != 0:
            raise AudioFormatError(f"n_fft must be even and >= 4, got {self.n_fft}")
        if self.frames < 1:
            raise AudioFormatError(f"frames must be >= 1, got {self.frames}")
        if self.log_floor <= 0:
            raise AudioFormatError(f"log_floor must be positive, got {self.log_floor}")
        if self.hop_samples < 1:
            raise AudioFormatError(f"hop {self.hop_seconds}s is under one sample "
                                   f"at {self.sample_rate} Hz")

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_seconds * self.sample_rate))

    @property
    def bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def min_samples(self) -> int:
        """Clip length that fills all frames without padding."""
        return self.n_fft + (self.frames - 1) * self.hop_samples


@dataclass(frozen=True)
class Spectrogram:
    """Log-power values, shape (frames, bins), float64."""

    values: np.ndarray

    @property
    def frames(self) -> int:
        return self.values.shape[0]

    @property
    def bins(self) -> int:
        return self.values.shape[1]


# ---------------------------------------------------------------------------
# WAV I/O (16-bit PCM mono only)


def load_wav(path) -> AudioClip:
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            comptype = wf.getcomptype()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError, OSError) as exc:
        raise AudioFormatError(f"{path}: not a readable WAV file ({exc})") from exc
    if comptype != "NONE":
        raise AudioFormatError(f"{path}: compressed WAV ({comptype}) not supported")
    if channels != 1:
        raise AudioFormatError(f"{path}: expected mono, got {channels} channels")
    if width != 2:
        raise AudioFormatError(f"{path}: expected 16-bit samples, got {8 * width}-bit")
    if n == 0 or len(raw) == 0:
        raise AudioFormatError(f"{path}: zero-length audio payload")
    if len(raw) < 2 * n:
        raise AudioFormatError(f"{path}: truncated audio payload "
                               f"({len(raw)} bytes for {n} frames)")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return AudioClip(samples=samples, sample_rate=rate)


def save_wav(path, clip: AudioClip) -> None:
    scaled = np.clip(np.round(clip.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(clip.sample_rate)
        wf.writeframes(scaled.tobytes())


# ---------------------------------------------------------------------------
# spectrogram


def frame_count(n_samples: int, cfg: FeatureConfig) -> int:
    if n_samples < cfg.n_fft:
        return 0
    return (n_samples - cfg.n_fft) // cfg.hop_samples + 1


def log_power_spectrogram(clip: AudioClip, cfg: FeatureConfig) -> Spectrogram:
    """First `cfg.frames` frames of log(|X|^2 + floor); short clips are padded."""
    if clip.sample_rate != cfg.sample_rate:
        raise AudioFormatError(f"clip is {clip.sample_rate} Hz but features expect "
                               f"{cfg.sample_rate} Hz")
    x = np.asarray(clip.samples, dtype=np.float64)
    hop, n_fft = cfg.hop_samples, cfg.n_fft
    available = frame_count(x.size, cfg)
    n_frames = min(available, cfg.frames)
    window = np.hamming(n_fft)
    values = np.full((cfg.frames, cfg.bins), np.log(cfg.log_floor), dtype=np.float64)
    if n_frames > 0:
        idx = np.arange(n_frames)[:, None] * hop + np.arange(n_fft)[None, :]
        spectra = np.fft.rfft(x[idx] * window, axis=1)
        power = spectra.real ** 2 + spectra.imag ** 2
        values[:n_frames] = np.log(power + cfg.log_floor)
    return Spectrogram(values=values)


# ---------------------------------------------------------------------------
# synthetic dataset: two separable classes of harmonic stacks
#
# class 0 concentrates energy in a low band, class 1 in a high band; both use
# slow amplitude envelopes and a small noise floor so spectrograms are smooth
# over time and survive 3x3 smoothing.

_CLASS_BANDS = ((0.05, 0.22), (0.35, 0.78))  # fractions of the Nyquist rate
_TONES_PER_CLIP = 6


def synth_clip(rng: np.random.Generator, label: int, cfg: FeatureConfig,
               n_samples: int | None = None) -> AudioClip:
    if n_samples is None:
        n_samples = cfg.min_samples
    lo, hi = _CLASS_BANDS[label]
    nyquist = cfg.sample_rate / 2.0
    t = np.arange(n_samples) / cfg.sample_rate
    x = np.zeros(n_samples)
    for _ in range(_TONES_PER_CLIP):
        freq = rng.uniform(lo, hi) * nyquist
        amp = rng.uniform(0.05, 0.15)
        phase = rng.uniform(0, 2 * np.pi)
        env_rate = rng.uniform(0.5, 2.0)
        env_phase = rng.uniform(0, 2 * np.pi)
        env = 1.0 + 0.3 * np.sin(2 * np.pi * env_rate * t + env_phase)
        x += amp * env * np.sin(2 * np.pi * freq * t + phase)
    x += 0.001 * rng.standard_normal(n_samples)
    peak = np.abs(x).max()
    if peak > 0.95:
        x *= 0.95 / peak
    # quantize to the 16-bit grid so in-memory clips match WAV round trips
    x = np.round(x * 32768.0) / 32768.0
    return AudioClip(samples=x, sample_rate=cfg.sample_rate)


def synth_clip_by_index(seed: int, index: int, label: int, cfg: FeatureConfig,
                        n_samples: int | None = None) -> AudioClip:
    """Clip keyed by (seed, index) so any dataset element regenerates alone."""
    return synth_clip(np.random.default_rng([seed, index]), label, cfg, n_samples)


def synth_dataset(seed: int, n_per_class: int, cfg: FeatureConfig,
                  n_samples: int | None = None) -> list[tuple[AudioClip, int]]:
    """Balanced list of (clip, label) pairs, deterministic in seed."""
    if n_per_class < 1:
        raise AudioFormatError(f"n_per_class must be >= 1, got {n_per_class}")
    out: list[tuple[AudioClip, int]] = []
    for i in range(n_per_class):
        for label in (0, 1):
            out.append((synth_clip_by_index(seed, 2 * i + label, label, cfg, n_samples),
                        label))
    return out


# ---------------------------------------------------------------------------
# spectrogram file format: 16-byte header + flat float64 little-endian values


def save_spectrogram(path, spec: Spectrogram) -> None:
    header = SPECTROGRAM_MAGIC + struct.pack("<III", SPECTROGRAM_VERSION,
                                             spec.frames, spec.bins)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(spec.values, dtype="<f8").tobytes())


def load_spectrogram(path) -> Spectrogram:
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise SpectrogramFormatError(f"{path}: cannot read file ({exc})") from exc
    if len(data) < 16:
        raise SpectrogramFormatError(f"{path}: truncated header ({len(data)} bytes)")
    if data[:4] != SPECTROGRAM_MAGIC:
        raise SpectrogramFormatError(f"{path}: not a spectrogram file (bad magic)")
    version, frames, bins = struct.unpack("<III", data[4:16])
    if version != SPECTROGRAM_VERSION:
        raise SpectrogramFormatError(f"{path}: unsupported version {version}")
    expected = 16 + frames * bins * 8
    if len(data) < expected:
        raise SpectrogramFormatError(f"{path}: truncated payload "
                                     f"({len(data)} of {expected} bytes)")
    if len(data) > expected:
        raise SpectrogramFormatError(f"{path}: {len(data) - expected} trailing bytes")
    values = np.frombuffer(data[16:], dtype="<f8").reshape(frames, bins).copy()
    return Spectrogram(values=values)
