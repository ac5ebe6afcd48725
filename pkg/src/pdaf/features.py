"""Log-mel filterbank features, PCM16 WAV I/O and the binary feature cache."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CACHE_MAGIC = b"PDAF-FB1"


class FeatureError(ValueError):
    pass


class SignalTooShortError(FeatureError):
    def __init__(self, n_samples: int, required: int):
        super().__init__(f"signal has {n_samples} samples, need at least {required}")
        self.n_samples = n_samples
        self.required = required


class WavFormatError(FeatureError):
    pass


class WavParseError(FeatureError):
    def __init__(self, msg: str, offset: int):
        super().__init__(f"{msg} (at byte {offset})")
        self.offset = offset


@dataclass
class Waveform:
    samples: np.ndarray
    sample_rate: int = 16000

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_rate <= 0:
            raise FeatureError(f"sample_rate must be positive, got {self.sample_rate}")


@dataclass(frozen=True)
class FbankConfig:
    n_mels: int = 128
    win_ms: float = 25.0
    hop_ms: float = 10.0
    mel_fmin: float = 0.0
    mel_fmax: float | None = None
    log_floor: float = 1e-10

    def __post_init__(self):
        if self.n_mels < 1:
            raise FeatureError("n_mels must be >= 1")
        if self.win_ms < self.hop_ms:
            raise FeatureError("win_ms must be >= hop_ms")

    def win_samples(self, sr: int) -> int:
        return int(round(self.win_ms * sr / 1000.0))

    def hop_samples(self, sr: int) -> int:
        return int(round(self.hop_ms * sr / 1000.0))

    def fft_size(self, sr: int) -> int:
        n = 1
        while n < self.win_samples(sr):
            n *= 2
        return n

    def fmax(self, sr: int) -> float:
        return sr / 2.0 if self.mel_fmax is None else self.mel_fmax

    def as_dict(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "win_ms": self.win_ms,
            "hop_ms": self.hop_ms,
            "mel_fmin": self.mel_fmin,
            "mel_fmax": self.mel_fmax,
            "log_floor": self.log_floor,
            "window": "hamming",
            "mel_scale": "htk",
        }


@dataclass
class FeatureMatrix:
    frames: np.ndarray  # [T, n_mels]
    frame_times: np.ndarray  # centre of each frame, seconds

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(n_mels: int, n_fft: int, sr: int, fmin: float, fmax: float) -> np.ndarray:
    """Triangular filters on the rfft bin grid, shape ``[n_mels, n_fft // 2 + 1]``.

    Edges are equally spaced on the HTK mel scale; slopes are linear in Hz
    and peak at 1.0 (no area normalisation).
    """
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), n_mels + 2))
    freqs = np.arange(n_fft // 2 + 1) * sr / n_fft
    lo, mid, hi = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rise = (freqs[None, :] - lo) / (mid - lo)
    fall = (hi - freqs[None, :]) / (hi - mid)
    return np.maximum(0.0, np.minimum(rise, fall))


def mel_centers(cfg: FbankConfig, sr: int) -> np.ndarray:
    edges = mel_to_hz(np.linspace(hz_to_mel(cfg.mel_fmin), hz_to_mel(cfg.fmax(sr)), cfg.n_mels + 2))
    return edges[1:-1]


def frame_count(n_samples: int, win: int, hop: int) -> int:
    return (n_samples - win) // hop + 1 if n_samples >= win else 0


def compute_fbank(w: Waveform, cfg: FbankConfig | None = None) -> FeatureMatrix:
    cfg = cfg or FbankConfig()
    sr = w.sample_rate
    win, hop, n_fft = cfg.win_samples(sr), cfg.hop_samples(sr), cfg.fft_size(sr)
    x = w.samples
    if x.size < win:
        raise SignalTooShortError(x.size, win)
    T = frame_count(x.size, win, hop)
    idx = np.arange(win)[None, :] + hop * np.arange(T)[:, None]
    frames = x[idx] * np.hamming(win)[None, :]
    power = np.abs(np.fft.rfft(frames, n=n_fft, axis=1)) ** 2
    fb = mel_filterbank(cfg.n_mels, n_fft, sr, cfg.mel_fmin, cfg.fmax(sr))
    energy = power @ fb.T
    feats = np.log(np.maximum(energy, cfg.log_floor))
    times = (np.arange(T) * hop + win / 2.0) / sr
    return FeatureMatrix(feats, times)


# --------------------------------------------------------------------------
# WAV


def read_wav(path) -> Waveform:
    """Read a RIFF/WAVE PCM16 mono file; samples are scaled by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12:
        raise WavParseError("truncated RIFF header", len(raw))
    if raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    pos = 12
    fmt = None
    while pos + 8 <= len(raw):
        cid = raw[pos : pos + 4]
        (size,) = struct.unpack_from("<I", raw, pos + 4)
        body = pos + 8
        if cid == b"fmt ":
            if body + 16 > len(raw):
                raise WavParseError("truncated fmt chunk", len(raw))
            fmt = struct.unpack_from("<HHIIHH", raw, body)
            codec, channels, sr, _, _, bits = fmt
            if codec != 1 or bits != 16:
                raise WavFormatError(f"{path}: only PCM 16-bit is supported (codec={codec}, bits={bits})")
            if channels != 1:
                raise WavFormatError(f"{path}: only mono is supported (channels={channels})")
        elif cid == b"data":
            if fmt is None:
                raise WavParseError("data chunk before fmt chunk", pos)
            if body + size > len(raw):
                raise WavParseError(f"data chunk declares {size} bytes, only {len(raw) - body} present", len(raw))
            if size % 2:
                raise WavParseError("odd byte count in PCM16 data", body + size)
            pcm = np.frombuffer(raw, dtype="<i2", count=size // 2, offset=body)
            return Waveform(pcm.astype(np.float64) / 32768.0, fmt[2])
        pos = body + size + (size & 1)
    if fmt is None:
        raise WavParseError("missing fmt chunk", pos)
    raise WavParseError("missing data chunk", pos)


def write_wav(path, w: Waveform) -> None:
    pcm = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2").tobytes()
    header = struct.pack(
        "<4sI4s4sIHHIIHH4sI",
        b"RIFF", 36 + len(pcm), b"WAVE",
        b"fmt ", 16, 1, 1, w.sample_rate, w.sample_rate * 2, 2, 16,
        b"data", len(pcm),
    )  # fmt: skip
    Path(path).write_bytes(header + pcm)


# --------------------------------------------------------------------------
# feature cache


def write_feature_cache(path, frames: np.ndarray) -> None:
    frames = np.asarray(frames)
    T, n = frames.shape
    Path(path).write_bytes(CACHE_MAGIC + struct.pack("<II", T, n) + frames.astype("<f4").tobytes())


def read_feature_cache(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:8] != CACHE_MAGIC:
        raise FeatureError(f"{path}: bad feature cache magic")
    if len(raw) < 16:
        raise FeatureError(f"{path}: truncated feature cache header")
    T, n = struct.unpack_from("<II", raw, 8)
    if len(raw) != 16 + 4 * T * n:
        raise FeatureError(f"{path}: expected {16 + 4 * T * n} bytes, found {len(raw)}")
    return np.frombuffer(raw, dtype="<f4", offset=16).reshape(T, n).astype(np.float64)
