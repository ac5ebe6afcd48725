"""Phoneme inventory, alignment ingestion, frame labelling and key masks."""

from __future__ import annotations

import json
from dataclasses import dataclass
from functools import cached_property
from typing import Iterable

import numpy as np

SIL = "SIL"

PHONEME_CLASSES: dict[str, tuple[str, ...]] = {
    "Vowels": ("AA", "AE", "AH", "AO", "AW", "AY", "EH", "ER", "EY", "IH", "IY", "OW", "OY", "UH", "UW"),
    "Fricative": ("F", "V", "TH", "DH", "HH"),
    "Stop": ("P", "B", "T", "D", "K", "G", "DX"),
    "Nasal": ("M", "N", "NG"),
    "Sibilant": ("S", "Z", "SH", "ZH"),
    "Affricate": ("CH", "JH"),
    "Approximant": ("W", "R", "Y"),
    "Lateral": ("L",),
}


class AlignmentError(ValueError):
    pass


class EmptyMaskError(ValueError):
    pass


@dataclass(frozen=True)
class PhonemeInventory:
    """41 symbols: SIL at index 0, then the 40 classified phonemes."""

    symbols: tuple[str, ...]
    class_map: dict

    @classmethod
    def default(cls) -> "PhonemeInventory":
        phones = sorted(p for members in PHONEME_CLASSES.values() for p in members)
        class_map = {p: c for c, members in PHONEME_CLASSES.items() for p in members}
        return cls((SIL, *phones), class_map)

    def __len__(self) -> int:
        return len(self.symbols)

    @property
    def sil(self) -> int:
        return self.symbols.index(SIL)

    def index(self, symbol: str) -> int:
        try:
            return self._lookup[symbol]
        except KeyError:
            raise AlignmentError(f"unknown phoneme symbol {symbol!r}") from None

    @cached_property
    def _lookup(self) -> dict[str, int]:
        return {s: i for i, s in enumerate(self.symbols)}

    def class_members(self, name: str) -> list[int]:
        for cname in PHONEME_CLASSES:
            if cname.lower() == name.lower():
                return [self.index(p) for p in PHONEME_CLASSES[cname]]
        raise KeyError(f"unknown phoneme class {name!r}; known: {', '.join(PHONEME_CLASSES)}")

    def to_json(self) -> dict:
        return {"symbols": list(self.symbols), "class_map": dict(self.class_map)}

    @classmethod
    def from_json(cls, obj: dict) -> "PhonemeInventory":
        return cls(tuple(obj["symbols"]), dict(obj["class_map"]))


INVENTORY = PhonemeInventory.default()


@dataclass(frozen=True)
class AlignmentSegment:
    phoneme: int
    start_s: float
    end_s: float


def validate_segments(segs: list[AlignmentSegment], utt: str) -> list[AlignmentSegment]:
    segs = sorted(segs, key=lambda s: (s.start_s, s.end_s))
    for s in segs:
        if s.start_s < 0 or s.end_s <= s.start_s:
            raise AlignmentError(f"utterance {utt}: bad segment [{s.start_s}, {s.end_s}]")
    for a, b in zip(segs, segs[1:]):
        if b.start_s < a.end_s:
            raise AlignmentError(f"utterance {utt}: overlapping segments at {b.start_s}s")
    return segs


def parse_alignments(path, inventory: PhonemeInventory = INVENTORY) -> dict[str, list[AlignmentSegment]]:
    """Read a JSON-lines alignment file: ``{"utt": id, "segments": [[sym, start, end], ...]}``."""
    out: dict[str, list[AlignmentSegment]] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                utt = str(obj["utt"])
                raw = obj["segments"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise AlignmentError(f"{path}:{lineno}: malformed record ({exc})") from None
            segs = []
            for sym, start, end in raw:
                try:
                    idx = inventory.index(sym)
                except AlignmentError:
                    raise AlignmentError(f"{path}:{lineno}: unknown phoneme symbol {sym!r}") from None
                segs.append(AlignmentSegment(idx, float(start), float(end)))
            out[utt] = validate_segments(segs, utt)
    return out


def write_alignments(path, alignments: dict[str, list[AlignmentSegment]], inventory: PhonemeInventory = INVENTORY):
    with open(path, "w") as fh:
        for utt, segs in alignments.items():
            rec = {"utt": utt, "segments": [[inventory.symbols[s.phoneme], s.start_s, s.end_s] for s in segs]}
            fh.write(json.dumps(rec) + "\n")


def label_frames(
    segments: list[AlignmentSegment],
    T: int,
    hop_ms: float = 10.0,
    win_ms: float = 25.0,
    inventory: PhonemeInventory = INVENTORY,
) -> np.ndarray:
    """Assign each frame the phoneme whose [start, end) contains its centre; gaps are SIL."""
    labels = np.full(T, inventory.sil, dtype=np.int64)
    centers = (np.arange(T) * hop_ms + win_ms / 2.0) / 1000.0
    for s in segments:
        labels[(centers >= s.start_s) & (centers < s.end_s)] = s.phoneme
    return labels


def resolve_ablation(spec, inventory: PhonemeInventory = INVENTORY) -> set[int]:
    """Turn a class name, a symbol, or an iterable of symbols/indices into indices."""
    if spec is None:
        return set()
    if isinstance(spec, str):
        if spec.upper() in inventory._lookup:
            return {inventory.index(spec.upper())}
        return set(inventory.class_members(spec))
    out = set()
    for item in spec:
        out.add(int(item) if isinstance(item, (int, np.integer)) else inventory.index(item))
    return out


def build_key_mask(labels: np.ndarray, ablate=None, inventory: PhonemeInventory = INVENTORY) -> np.ndarray:
    """True where a frame may be attended: not SIL and not ablated."""
    labels = np.asarray(labels)
    blocked = resolve_ablation(ablate, inventory) | {inventory.sil}
    mask = ~np.isin(labels, list(blocked))
    if not mask.any():
        raise EmptyMaskError("mask leaves no attendable frames")
    return mask


def segment_counts(segments: Iterable[AlignmentSegment], n: int = len(INVENTORY)) -> np.ndarray:
    c = np.zeros(n, dtype=np.int64)
    for s in segments:
        c[s.phoneme] += 1
    return c


def frame_counts(labels: np.ndarray, n: int = len(INVENTORY)) -> np.ndarray:
    return np.bincount(np.asarray(labels, dtype=np.int64), minlength=n)
