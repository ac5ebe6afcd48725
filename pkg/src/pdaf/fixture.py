"""Synthetic speaker corpus with exact phoneme alignments.

Each speaker gets a pitch, a vocal-tract scale and two private resonances.
Vowel analogues are harmonic (they carry pitch and all resonances);
consonant analogues are band-limited noise that only carries the speaker's
spectral tilt, so most speaker identity lives in the vowels.  Every phoneme
has its own amplitude-modulation rate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import Waveform
from .phonetics import INVENTORY, AlignmentSegment

SR = 16000

# formant pairs (Hz) for the vowel analogues
VOWELS = {
    "AA": (730, 1090),
    "IY": (270, 2290),
    "UW": (300, 870),
    "EH": (530, 1840),
    "OW": (570, 840),
    "AE": (660, 1720),
}
# (low, high) noise band for the consonant analogues
CONSONANTS = {
    "S": (4500, 7500),
    "SH": (2500, 4500),
    "F": (1200, 6000),
    "T": (3000, 6000),
    "K": (1500, 3000),
    "M": (150, 500),
    "N": (200, 700),
}
PHONES = tuple(VOWELS) + tuple(CONSONANTS)
MODULATION_HZ = {p: 3.0 + 1.5 * i for i, p in enumerate(PHONES)}


@dataclass(frozen=True)
class SpeakerProfile:
    name: str
    f0: float
    tract: float
    resonances: tuple[float, float]
    tilt: float


@dataclass
class FixtureUtterance:
    utt_id: str
    speaker: str
    wave: Waveform
    segments: list[AlignmentSegment]


def make_speakers(n: int, rng: np.random.Generator) -> list[SpeakerProfile]:
    f0s = np.linspace(95.0, 230.0, max(n, 1))
    rng.shuffle(f0s)
    out = []
    for i in range(n):
        out.append(
            SpeakerProfile(
                name=f"spk{i:02d}",
                f0=float(f0s[i]),
                tract=float(rng.uniform(0.85, 1.18)),
                resonances=(float(rng.uniform(2400, 3400)), float(rng.uniform(3600, 5200))),
                tilt=float(rng.uniform(-1.0, 1.0)),
            )
        )
    return out


def _envelope(freqs: np.ndarray, centers, widths) -> np.ndarray:
    env = np.zeros_like(freqs)
    for c, w in zip(centers, widths):
        env += np.exp(-0.5 * ((freqs - c) / w) ** 2)
    return env


def _vowel(spk: SpeakerProfile, phone: str, n: int, f0: float, rng) -> np.ndarray:
    t = np.arange(n) / SR
    f1, f2 = VOWELS[phone]
    centers = (f1 * spk.tract, f2 * spk.tract, *spk.resonances)
    widths = (90.0, 130.0, 160.0, 220.0)
    gains = (1.0, 0.7, 0.55, 0.35)
    k = np.arange(1, int(7600 // f0) + 1)
    hf = k * f0
    amp = np.zeros(len(k))
    for c, w, g in zip(centers, widths, gains):
        amp += g * np.exp(-0.5 * ((hf - c) / w) ** 2)
    amp += 0.02 * (hf / 1000.0) ** spk.tilt
    phases = rng.uniform(0, 2 * np.pi, len(k))
    sig = (amp[:, None] * np.sin(2 * np.pi * hf[:, None] * t[None, :] + phases[:, None])).sum(axis=0)
    return sig / (np.abs(amp).sum() + 1e-12)


def _consonant(spk: SpeakerProfile, phone: str, n: int, rng) -> np.ndarray:
    lo, hi = CONSONANTS[phone]
    spec = rng.standard_normal(n // 2 + 1) + 1j * rng.standard_normal(n // 2 + 1)
    freqs = np.fft.rfftfreq(n, 1.0 / SR)
    band = ((freqs >= lo) & (freqs <= hi)).astype(float)
    tilt = (np.maximum(freqs, 100.0) / 1000.0) ** (0.5 * spk.tilt)
    sig = np.fft.irfft(spec * band * tilt, n=n)
    return sig / (np.abs(sig).max() + 1e-12) * 0.3


def synth_utterance(
    spk: SpeakerProfile,
    utt_id: str,
    rng: np.random.Generator,
    duration: float = 2.0,
    phones: tuple[str, ...] = PHONES,
) -> FixtureUtterance:
    n_total = int(duration * SR)
    sig = 1e-4 * rng.standard_normal(n_total)
    segments: list[AlignmentSegment] = []
    f0 = spk.f0 * rng.uniform(0.96, 1.04)
    pos = int(rng.uniform(0.08, 0.18) * SR)
    end_limit = n_total - int(0.1 * SR)
    while True:
        dur = int(rng.uniform(0.06, 0.16) * SR)
        if pos + dur > end_limit:
            break
        phone = phones[rng.integers(len(phones))]
        if phone in VOWELS:
            chunk = _vowel(spk, phone, dur, f0, rng)
        else:
            chunk = _consonant(spk, phone, dur, rng)
        t = np.arange(dur) / SR
        mod = 0.75 + 0.25 * np.sin(2 * np.pi * MODULATION_HZ[phone] * t)
        ramp = np.minimum(1.0, np.minimum(np.arange(dur), np.arange(dur)[::-1]) / (0.005 * SR))
        sig[pos : pos + dur] += chunk * mod * ramp
        segments.append(AlignmentSegment(INVENTORY.index(phone), pos / SR, (pos + dur) / SR))
        pos += dur
        if rng.random() < 0.15:
            pos += int(rng.uniform(0.03, 0.08) * SR)
    gain = rng.uniform(0.4, 0.9)
    sig = sig * gain / (np.abs(sig).max() + 1e-12)
    return FixtureUtterance(utt_id, spk.name, Waveform(sig, SR), segments)


def generate_corpus(
    n_speakers: int = 8,
    n_utts: int = 20,
    seed: int = 7,
    duration: float = 2.0,
) -> list[FixtureUtterance]:
    rng = np.random.default_rng(seed)
    speakers = make_speakers(n_speakers, rng)
    corpus = []
    for spk in speakers:
        for j in range(n_utts):
            corpus.append(synth_utterance(spk, f"{spk.name}_u{j:03d}", rng, duration))
    return corpus
