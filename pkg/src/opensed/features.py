"""Log-mel feature extraction and mixup augmentation.

All functions are pure and operate on numpy float64 arrays. Feature
extraction is deliberately from-scratch (rfft + triangular mel filters)
so the whole pipeline stays dependency-light and bit-reproducible.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

_FEATURE_MAGIC = b"SEDFEAT1"


@dataclass(frozen=True)
class FeatureConfig:
    sample_rate: int = 16_000
    frame_len_ms: float = 128.0
    hop_ms: float = 16.0
    n_mels: int = 64
    fmin: float = 0.0
    fmax: float = 8_000.0
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if not (self.frame_len_ms > self.hop_ms > 0):
            raise ValueError("need frame_len_ms > hop_ms > 0")
        if not (0 <= self.fmin < self.fmax <= self.sample_rate / 2):
            raise ValueError("need 0 <= fmin < fmax <= Nyquist")
        if self.log_floor <= 0:
            raise ValueError("log_floor must be positive")

    @property
    def frame_samples(self) -> int:
        return int(round(self.frame_len_ms * self.sample_rate / 1000.0))

    @property
    def hop_samples(self) -> int:
        return int(round(self.hop_ms * self.sample_rate / 1000.0))

    @property
    def n_fft(self) -> int:
        # next power of two >= frame length, frame is zero-padded
        n = 1
        while n < self.frame_samples:
            n *= 2
        return n

    @property
    def hop_seconds(self) -> float:
        return self.hop_ms / 1000.0


@dataclass
class Waveform:
    samples: np.ndarray  # float64, range [-1, 1]
    sample_rate: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise ValueError("sample_rate must be positive")
        if self.samples.ndim != 1:
            raise ValueError("waveform must be mono (1-D)")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("waveform contains non-finite samples")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate


@dataclass
class FeatureMatrix:
    values: np.ndarray  # (T, n_mels) float64
    hop_seconds: float

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def n_bins(self) -> int:
        return self.values.shape[1]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_fft: int, n_mels: int, sample_rate: int,
                   fmin: float, fmax: float) -> np.ndarray:
    """Triangular mel filterbank, shape (n_mels, n_fft//2 + 1).

    Raises ValueError if the FFT resolution is too coarse for the
    requested number of bands (some triangle would cover no bin).
    """
    if n_fft <= 0 or n_mels <= 0:
        raise ValueError("n_fft and n_mels must be positive")
    if not (fmin < fmax <= sample_rate / 2):
        raise ValueError("need fmin < fmax <= Nyquist")

    n_bins = n_fft // 2 + 1
    fft_freqs = np.arange(n_bins) * sample_rate / n_fft
    mel_pts = np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2)
    hz_pts = mel_to_hz(mel_pts)

    fb = np.zeros((n_mels, n_bins))
    for m in range(n_mels):
        lo, ctr, hi = hz_pts[m], hz_pts[m + 1], hz_pts[m + 2]
        up = (fft_freqs - lo) / (ctr - lo)
        down = (hi - fft_freqs) / (hi - ctr)
        fb[m] = np.maximum(0.0, np.minimum(up, down))
        if not np.any(fb[m] > 0):
            raise ValueError(
                f"mel band {m} covers no FFT bin; reduce n_mels or raise n_fft")
    return fb


def log_mel_spectrogram(w: Waveform, cfg: FeatureConfig) -> FeatureMatrix:
    """Framewise log-mel energies. Frame t covers samples [t*hop, t*hop+frame)."""
    if w.sample_rate != cfg.sample_rate:
        raise ValueError(
            f"waveform rate {w.sample_rate} != config rate {cfg.sample_rate}; "
            "resampling is not supported")
    frame, hop = cfg.frame_samples, cfg.hop_samples
    n = len(w.samples)
    if n < frame:
        raise ValueError(f"waveform too short: {n} samples < one frame ({frame})")

    n_frames = (n - frame) // hop + 1
    idx = np.arange(frame)[None, :] + hop * np.arange(n_frames)[:, None]
    frames = w.samples[idx] * _hann(frame)

    spec = np.abs(np.fft.rfft(frames, n=cfg.n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_fft, cfg.n_mels, cfg.sample_rate, cfg.fmin, cfg.fmax)
    mel = spec @ fb.T
    return FeatureMatrix(np.log(np.maximum(mel, cfg.log_floor)), cfg.hop_seconds)


def standardize(feat: FeatureMatrix, eps: float = 1e-8) -> FeatureMatrix:
    """Per-clip zero-mean unit-variance normalization."""
    v = feat.values
    return FeatureMatrix((v - v.mean()) / (v.std() + eps), feat.hop_seconds)


def _hann(n: int) -> np.ndarray:
    # periodic Hann
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


# ---------------------------------------------------------------------------
# mixup

@dataclass(frozen=True)
class MixupDraw:
    lam: float
    alpha: float = 0.2
    beta: float = 0.2

    def __post_init__(self):
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lambda must lie in [0, 1]")


def sample_mixup(rng: np.random.Generator, alpha: float = 0.2,
                 beta: float = 0.2) -> MixupDraw:
    return MixupDraw(float(rng.beta(alpha, beta)), alpha, beta)


def mixup(a: tuple[np.ndarray, np.ndarray, np.ndarray],
          b: tuple[np.ndarray, np.ndarray, np.ndarray],
          draw: MixupDraw) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Convex combination of (features, sed_targets, sod_onehot) pairs.

    SOD targets must already be one-hot (T, 3); the mix makes them soft
    rows that still sum to 1.
    """
    if len(a) != 3 or len(b) != 3:
        raise ValueError("expected (features, sed_targets, sod_onehot) triples")
    out = []
    for xa, xb in zip(a, b):
        xa = np.asarray(xa, dtype=np.float64)
        xb = np.asarray(xb, dtype=np.float64)
        if xa.shape != xb.shape:
            raise ValueError(f"mixup shape mismatch: {xa.shape} vs {xb.shape}")
        out.append(draw.lam * xa + (1.0 - draw.lam) * xb)
    return tuple(out)


# ---------------------------------------------------------------------------
# audio I/O (mono PCM16 or float32 WAV)

def load_wav(path) -> Waveform:
    from scipy.io import wavfile

    rate, data = wavfile.read(path)
    if data.ndim != 1:
        raise ValueError(f"{path}: only mono WAV is supported")
    if data.dtype == np.int16:
        samples = data.astype(np.float64) / 32767.0
    elif data.dtype == np.float32:
        samples = data.astype(np.float64)
    else:
        raise ValueError(f"{path}: unsupported WAV sample format {data.dtype}")
    return Waveform(samples, int(rate))


def save_wav(path, w: Waveform) -> None:
    from scipy.io import wavfile

    clipped = np.clip(w.samples, -1.0, 1.0)
    wavfile.write(path, w.sample_rate, np.round(clipped * 32767.0).astype(np.int16))


# ---------------------------------------------------------------------------
# serialization: header {T, F, hop_seconds} then row-major float64

def save_features(path, feat: FeatureMatrix) -> None:
    t, f = feat.values.shape
    with open(path, "wb") as fh:
        fh.write(_FEATURE_MAGIC)
        fh.write(struct.pack("<qqd", t, f, feat.hop_seconds))
        fh.write(np.ascontiguousarray(feat.values, dtype=np.float64).tobytes())


def load_features(path) -> FeatureMatrix:
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _FEATURE_MAGIC:
            raise ValueError(f"not a feature file: {path}")
        t, f, hop = struct.unpack("<qqd", fh.read(24))
        data = np.frombuffer(fh.read(8 * t * f), dtype="<f8").reshape(t, f)
    return FeatureMatrix(data.copy(), hop)
