"""MFCC baseline features and the feature-sequence container.

Pipeline per frame: Hamming window, zero-pad to ``n_fft``, power spectrum,
triangular mel filterbank, natural log with a floor, orthonormal DCT-II.
No deltas and no cepstral mean normalisation.
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .corpus import Waveform
from .errors import TooShort


class Origin(str, enum.Enum):
    MFCC = "mfcc"
    CPC_LATENT = "cpc_latent"
    CPC_CONTEXT = "cpc_context"


@dataclass(frozen=True)
class FeatureSequence:
    frames: np.ndarray
    frame_hop_ms: float
    origin: Origin

    def __post_init__(self):
        f = np.asarray(self.frames, dtype=np.float64)
        if f.ndim != 2 or f.shape[0] < 1 or f.shape[1] < 1:
            raise ValueError(f"frames must be a non-empty T x D matrix, got shape {f.shape}")
        object.__setattr__(self, "frames", f)
        object.__setattr__(self, "origin", Origin(self.origin))

    @property
    def T(self) -> int:
        return self.frames.shape[0]

    @property
    def D(self) -> int:
        return self.frames.shape[1]


@dataclass(frozen=True)
class MfccConfig:
    frame_ms: float = 25.0
    hop_ms: float = 10.0
    n_fft: int = 512
    n_mels: int = 40
    n_ceps: int = 13
    fmin_hz: float = 0.0
    fmax_hz: float | None = None  # None: Nyquist
    log_floor: float = 1e-10

    def validate(self, sample_rate_hz: int) -> list[str]:
        problems = []
        nyq = sample_rate_hz / 2
        fmax = nyq if self.fmax_hz is None else self.fmax_hz
        if self.frame_ms <= 0 or self.hop_ms <= 0:
            problems.append("frame_ms and hop_ms must be positive")
        if self.n_fft < 2 or self.n_fft & (self.n_fft - 1):
            problems.append(f"n_fft must be a power of two, got {self.n_fft}")
        elif frame_length(self.frame_ms, sample_rate_hz) > self.n_fft:
            problems.append("n_fft must be >= the frame length in samples")
        if not 1 <= self.n_ceps <= self.n_mels:
            problems.append("need 1 <= n_ceps <= n_mels")
        if not 0 <= self.fmin_hz < fmax <= nyq:
            problems.append("need 0 <= fmin_hz < fmax_hz <= sample_rate/2")
        if self.log_floor <= 0:
            problems.append("log_floor must be positive")
        return problems


def frame_length(ms: float, sample_rate_hz: int) -> int:
    return int(round(ms * sample_rate_hz / 1000.0))


def frame_signal(waveform: Waveform, frame_ms: float, hop_ms: float) -> np.ndarray:
    """Slice into overlapping frames without padding; returns a (T, frame_len) copy."""
    sr = waveform.sample_rate_hz
    flen, hop = frame_length(frame_ms, sr), frame_length(hop_ms, sr)
    x = waveform.samples
    if x.size < flen:
        raise TooShort(f"{x.size} samples < frame length {flen}")
    n = 1 + (x.size - flen) // hop
    idx = np.arange(flen)[None, :] + hop * np.arange(n)[:, None]
    return x[idx]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_edges(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    """The n_mels + 2 filter edge frequencies (Hz), equally spaced in mel."""
    return mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))


def mel_centers(n_mels: int, fmin: float, fmax: float) -> np.ndarray:
    return mel_edges(n_mels, fmin, fmax)[1:-1]


@lru_cache(maxsize=16)
def _filterbank(n_mels, n_fft, sample_rate_hz, fmin, fmax):
    edges = mel_edges(n_mels, fmin, fmax)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate_hz / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    up = (freqs[None, :] - lo) / (mid - lo)
    down = (hi - freqs[None, :]) / (hi - mid)
    fb = np.maximum(0.0, np.minimum(up, down))
    peak = fb.max(axis=1, keepdims=True)
    fb = fb / np.where(peak > 0, peak, 1.0)
    fb.setflags(write=False)
    return fb


def mel_filterbank(n_mels: int, n_fft: int, sample_rate_hz: int, fmin: float = 0.0, fmax: float | None = None):
    """(n_mels, n_fft//2+1) triangular filters, each scaled to peak at 1."""
    fmax = sample_rate_hz / 2 if fmax is None else fmax
    return _filterbank(n_mels, n_fft, sample_rate_hz, float(fmin), float(fmax))


@lru_cache(maxsize=16)
def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k is the k-th basis vector."""
    k = np.arange(n)[:, None]
    j = np.arange(n)[None, :]
    c = np.sqrt(2.0 / n) * np.cos(np.pi * k * (2 * j + 1) / (2 * n))
    c[0] /= np.sqrt(2.0)
    c.setflags(write=False)
    return c


def power_spectrum(frames: np.ndarray, n_fft: int) -> np.ndarray:
    win = np.hamming(frames.shape[1])
    spec = np.fft.rfft(frames * win, n=n_fft, axis=1)
    return spec.real**2 + spec.imag**2


def log_mel_energies(waveform: Waveform, config: MfccConfig = MfccConfig()) -> np.ndarray:
    sr = waveform.sample_rate_hz
    problems = config.validate(sr)
    if problems:
        raise ValueError("; ".join(problems))
    frames = frame_signal(waveform, config.frame_ms, config.hop_ms)
    fb = mel_filterbank(config.n_mels, config.n_fft, sr, config.fmin_hz, config.fmax_hz)
    energies = power_spectrum(frames, config.n_fft) @ fb.T
    return np.log(np.maximum(energies, config.log_floor))


def mfcc(waveform: Waveform, config: MfccConfig = MfccConfig()) -> FeatureSequence:
    logmel = log_mel_energies(waveform, config)
    ceps = logmel @ dct_matrix(config.n_mels)[: config.n_ceps].T
    return FeatureSequence(ceps, config.hop_ms, Origin.MFCC)


# ---------------------------------------------------------------- debug dump

_FEAT_MAGIC = b"FEAT"


def dump_features(feats: FeatureSequence) -> bytes:
    T, D = feats.frames.shape
    return _FEAT_MAGIC + struct.pack("<II", T, D) + feats.frames.astype("<f4").tobytes()


def load_features(buf: bytes, frame_hop_ms: float = 0.0, origin=Origin.MFCC) -> FeatureSequence:
    if buf[:4] != _FEAT_MAGIC:
        raise ValueError("not a FEAT dump")
    T, D = struct.unpack_from("<II", buf, 4)
    if len(buf) != 12 + 4 * T * D:
        raise ValueError(f"FEAT dump size mismatch for {T}x{D}")
    data = np.frombuffer(buf, dtype="<f4", offset=12).reshape(T, D)
    return FeatureSequence(data.astype(np.float64), frame_hop_ms, origin)
