"""Local phoneme-probability estimators and the per-frame debias term.

Four count-based estimators share one normalisation path; they differ only
in what is counted (segments vs frames) and over what span (corpus vs one
utterance).  Silence never enters a denominator.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import gradcore as gc
from .phonetics import INVENTORY, AlignmentSegment, PhonemeInventory, frame_counts, segment_counts

ESTIMATORS = ("POP", "PUP", "PFP", "FUP", "LEARNED", "UNIFORM")
DEFAULT_FLOOR = 1e-6


class PriorError(ValueError):
    pass


@dataclass
class PriorTable:
    probs: np.ndarray
    estimator: str
    floor: float = DEFAULT_FLOOR
    raw: np.ndarray | None = field(default=None, repr=False)

    def to_json(self) -> dict:
        return {"estimator": self.estimator, "floor": self.floor, "probs": [float(p) for p in self.probs]}

    @classmethod
    def from_json(cls, obj: dict) -> "PriorTable":
        return cls(np.asarray(obj["probs"], dtype=np.float64), obj["estimator"], float(obj["floor"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "PriorTable":
        return cls.from_json(json.loads(Path(path).read_text()))


@dataclass
class CorpusCounts:
    occ: np.ndarray
    frames: np.ndarray

    @classmethod
    def empty(cls, n: int = len(INVENTORY)) -> "CorpusCounts":
        return cls(np.zeros(n, dtype=np.int64), np.zeros(n, dtype=np.int64))

    def add(self, segments: Iterable[AlignmentSegment], labels: np.ndarray) -> "CorpusCounts":
        n = len(self.occ)
        return CorpusCounts(self.occ + segment_counts(segments, n), self.frames + frame_counts(labels, n))

    def merge(self, other: "CorpusCounts") -> "CorpusCounts":
        return CorpusCounts(self.occ + other.occ, self.frames + other.frames)

    @classmethod
    def from_corpus(cls, items: Iterable[tuple[list[AlignmentSegment], np.ndarray]]) -> "CorpusCounts":
        acc = cls.empty()
        for segs, labels in items:
            acc = acc.add(segs, labels)
        return acc

    def to_json(self) -> dict:
        return {"occ": self.occ.tolist(), "frames": self.frames.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "CorpusCounts":
        return cls(np.asarray(obj["occ"], dtype=np.int64), np.asarray(obj["frames"], dtype=np.int64))


def normalize_counts(
    counts: np.ndarray,
    estimator: str,
    floor: float = DEFAULT_FLOOR,
    inventory: PhonemeInventory = INVENTORY,
) -> PriorTable:
    """Ratio of counts over non-silence phonemes, then mixed toward the floor.

    ``p_floored = floor + (1 - n * floor) * p`` keeps every entry >= floor,
    the total at one and the ordering of the raw ratios intact.
    """
    counts = np.asarray(counts, dtype=np.float64)
    speech = np.ones(len(counts), dtype=bool)
    speech[inventory.sil] = False
    total = counts[speech].sum()
    if total <= 0:
        raise PriorError(f"{estimator}: no non-silence counts")
    raw = np.zeros(len(counts))
    raw[speech] = counts[speech] / total
    n = int(speech.sum())
    probs = np.where(speech, floor + (1.0 - n * floor) * raw, 1.0)
    return PriorTable(probs, estimator, floor, raw)


def pop(counts: CorpusCounts, floor: float = DEFAULT_FLOOR) -> PriorTable:
    return normalize_counts(counts.occ, "POP", floor)


def pfp(counts: CorpusCounts, floor: float = DEFAULT_FLOOR) -> PriorTable:
    return normalize_counts(counts.frames, "PFP", floor)


def pup(segments: Iterable[AlignmentSegment], floor: float = DEFAULT_FLOOR) -> PriorTable:
    return normalize_counts(segment_counts(segments), "PUP", floor)


def fup(labels: np.ndarray, floor: float = DEFAULT_FLOOR) -> PriorTable:
    return normalize_counts(frame_counts(labels), "FUP", floor)


def uniform(floor: float = DEFAULT_FLOOR, inventory: PhonemeInventory = INVENTORY) -> PriorTable:
    ones = np.ones(len(inventory))
    return normalize_counts(ones, "UNIFORM", floor, inventory)


@dataclass
class LearnedPhonemeWeights:
    """One trainable additive attention bias per phoneme, zero-initialised."""

    logits: gc.Tensor

    @classmethod
    def zeros(cls, n: int = len(INVENTORY)) -> "LearnedPhonemeWeights":
        return cls(gc.Tensor(np.zeros(n), requires_grad=True))


def frame_bias(table, labels: np.ndarray, lam: float = 1.0):
    """Per-frame additive attention bias for keys.

    Estimator tables give ``-lam * log(probs[label])`` as an array; learned
    weights give a differentiable gather of their logits.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if isinstance(table, LearnedPhonemeWeights):
        return gc.take(table.logits, labels)
    if lam < 0:
        raise PriorError(f"lambda must be >= 0, got {lam}")
    if lam == 0:
        return np.zeros(len(labels))
    return -lam * np.log(table.probs[labels])
