"""Glue between on-disk artifacts and the in-memory corpus.

A feature manifest (``manifest.json``) lists, per utterance, its cache file,
frame count, speaker and the content hashes the cache was built from.  The
manifest fingerprint covers the filterbank configuration, so a checkpoint can
refuse features computed differently from the ones it was trained on.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import FbankConfig, compute_fbank, read_feature_cache, read_wav, write_feature_cache, write_wav
from .fixture import generate_corpus
from .network import Utterance
from .phonetics import label_frames, parse_alignments, write_alignments

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"


class ArtifactError(ValueError):
    """A required upstream artifact is missing or inconsistent."""


def fingerprint(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


def file_sha(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def read_speaker_map(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        if line.strip():
            utt, spk = line.split()
            out[utt] = spk
    return out


def speaker_of(utt_id: str, speaker_map: dict[str, str] | None) -> str:
    if speaker_map and utt_id in speaker_map:
        return speaker_map[utt_id]
    return utt_id.split("_")[0]


# --------------------------------------------------------------------------
# fixture


def write_fixture(out_dir, n_speakers: int, n_utts: int, seed: int, duration: float = 2.0) -> dict:
    out = Path(out_dir)
    (out / "wav").mkdir(parents=True, exist_ok=True)
    corpus = generate_corpus(n_speakers, n_utts, seed, duration) if n_utts > 0 else []
    alignments = {}
    lines = []
    for u in corpus:
        write_wav(out / "wav" / f"{u.utt_id}.wav", u.wave)
        alignments[u.utt_id] = u.segments
        lines.append(f"{u.utt_id} {u.speaker}")
    write_alignments(out / "alignments.jsonl", alignments)
    (out / "speakers.txt").write_text("".join(line + "\n" for line in lines))
    manifest = {
        "kind": "fixture",
        "seed": seed,
        "n_speakers": n_speakers,
        "n_utts": n_utts,
        "duration": duration,
        "utterances": [u.utt_id for u in corpus],
    }
    manifest["fingerprint"] = fingerprint(manifest)
    (out / "fixture.json").write_text(json.dumps(manifest, indent=1) + "\n")
    return manifest


# --------------------------------------------------------------------------
# features


@dataclass
class FeaturizeResult:
    written: list[str] = field(default_factory=list)
    unchanged: list[str] = field(default_factory=list)
    failed: dict[str, str] = field(default_factory=dict)


def featurize(
    audio_dir,
    alignments_path,
    out_dir,
    cfg: FbankConfig = FbankConfig(),
    speaker_map: dict[str, str] | None = None,
) -> FeaturizeResult:
    audio_dir, out = Path(audio_dir), Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not Path(alignments_path).exists():
        raise ArtifactError(f"alignment file {alignments_path} not found (run make-fixture or supply aligner output)")
    align = parse_alignments(alignments_path)
    feat_fp = fingerprint(cfg.as_dict())
    old = {}
    if (out / MANIFEST).exists():
        prev = json.loads((out / MANIFEST).read_text())
        if prev.get("fingerprint") == feat_fp:
            old = prev["utterances"]
    res = FeaturizeResult()
    entries = {}
    for wav in sorted(audio_dir.glob("*.wav")):
        utt = wav.stem
        if utt not in align:
            res.failed[utt] = "no alignment"
            continue
        try:
            sha = file_sha(wav)
            cache = out / f"{utt}.fb"
            prev = old.get(utt)
            if prev and prev["wav_sha"] == sha and cache.exists() and file_sha(cache) == prev["cache_sha"]:
                entries[utt] = prev
                res.unchanged.append(utt)
                continue
            fm = compute_fbank(read_wav(wav), cfg)
            write_feature_cache(cache, fm.frames)
            entries[utt] = {
                "path": cache.name,
                "T": fm.n_frames,
                "speaker": speaker_of(utt, speaker_map),
                "wav_sha": sha,
                "cache_sha": file_sha(cache),
            }
            res.written.append(utt)
        except Exception as exc:  # summarised per file
            res.failed[utt] = str(exc)
    manifest = {
        "fingerprint": feat_fp,
        "fbank": cfg.as_dict(),
        "alignments": str(Path(alignments_path).resolve()),
        "utterances": entries,
    }
    text = json.dumps(manifest, indent=1, sort_keys=True) + "\n"
    if not (out / MANIFEST).exists() or (out / MANIFEST).read_text() != text:
        (out / MANIFEST).write_text(text)
    return res


def load_manifest(feat_dir) -> dict:
    path = Path(feat_dir) / MANIFEST
    if not path.exists():
        raise ArtifactError(f"{path} not found (run `pdaf featurize` first)")
    return json.loads(path.read_text())


def load_corpus(feat_dir, alignments_path=None) -> tuple[dict[str, Utterance], dict]:
    """Utterances keyed by id, with frame labels derived from the alignments."""
    manifest = load_manifest(feat_dir)
    alignments_path = alignments_path or manifest["alignments"]
    if not Path(alignments_path).exists():
        raise ArtifactError(f"alignment file {alignments_path} not found")
    align = parse_alignments(alignments_path)
    fb = manifest["fbank"]
    utts = {}
    for uid, entry in sorted(manifest["utterances"].items()):
        frames = read_feature_cache(Path(feat_dir) / entry["path"])
        segs = align.get(uid)
        if segs is None:
            raise ArtifactError(f"utterance {uid} has features but no alignment")
        labels = label_frames(segs, frames.shape[0], fb["hop_ms"], fb["win_ms"])
        utts[uid] = Utterance(uid, entry["speaker"], frames, labels, segs)
    return utts, manifest


def split_holdout(utts: dict[str, Utterance], per_speaker: int) -> tuple[list[str], list[str]]:
    """Hold out the last ``per_speaker`` utterances (by id) of every speaker."""
    by: dict[str, list[str]] = {}
    for uid in sorted(utts):
        by.setdefault(utts[uid].speaker, []).append(uid)
    train, test = [], []
    for spk, ids in sorted(by.items()):
        if per_speaker >= len(ids):
            raise ValueError(f"speaker {spk} has {len(ids)} utterances; cannot hold out {per_speaker}")
        cut = len(ids) - per_speaker
        train += ids[:cut]
        test += ids[cut:]
    return train, test


def utterances_by_speaker(utts, ids=None) -> dict[str, list[str]]:
    by: dict[str, list[str]] = {}
    for uid in sorted(ids if ids is not None else utts):
        by.setdefault(utts[uid].speaker, []).append(uid)
    return by


def save_embeddings(path, embeddings: dict[str, np.ndarray], meta: dict) -> None:
    ids = sorted(embeddings)
    np.savez(
        path,
        ids=np.array(ids),
        vectors=np.stack([embeddings[i] for i in ids]) if ids else np.zeros((0, 0)),
        meta=np.array(json.dumps(meta, sort_keys=True)),
    )


def load_embeddings(path) -> tuple[dict[str, np.ndarray], dict]:
    if not Path(path).exists():
        raise ArtifactError(f"{path} not found (run `pdaf embed` first)")
    with np.load(path, allow_pickle=False) as z:
        ids = [str(i) for i in z["ids"]]
        vecs = z["vectors"]
        meta = json.loads(str(z["meta"]))
    return {i: vecs[k] for k, i in enumerate(ids)}, meta
