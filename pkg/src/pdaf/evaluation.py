"""Verification trials, cosine scoring, EER and phoneme-masking studies."""

from __future__ import annotations

import csv
import itertools
import json
import logging
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .phonetics import EmptyMaskError, build_key_mask, resolve_ablation

log = logging.getLogger(__name__)


class TrialError(ValueError):
    pass


@dataclass(frozen=True)
class Trial:
    utt_a: str
    utt_b: str
    target: bool

    def __post_init__(self):
        if self.utt_a == self.utt_b:
            raise TrialError(f"trial pairs {self.utt_a} with itself")

    @property
    def label(self) -> str:
        return "target" if self.target else "nontarget"


@dataclass
class EerReport:
    eer: float
    threshold: float
    n_target: int
    n_nontarget: int
    condition: str = "none"

    @property
    def eer_pct(self) -> float:
        return 100.0 * self.eer


def make_trials(
    speakers: Mapping[str, Sequence[str]],
    n_per_speaker: int,
    seed: int = 0,
) -> list[Trial]:
    """Balanced target/non-target trials: ``n_per_speaker`` of each per speaker.

    ``speakers`` maps speaker -> utterance ids.  Unordered pairs never repeat.
    """
    spk = {s: sorted(u) for s, u in sorted(speakers.items())}
    if len(spk) < 2:
        raise TrialError(f"need at least 2 speakers, got {len(spk)}")
    short = {s: len(u) for s, u in spk.items() if len(u) < 2}
    if short:
        raise TrialError(f"speakers with fewer than 2 utterances: {short}")
    for s, u in spk.items():
        avail = len(u) * (len(u) - 1) // 2
        if n_per_speaker > avail:
            raise TrialError(f"speaker {s} has {len(u)} utterances ({avail} pairs), {n_per_speaker} target trials requested")
    rng = np.random.default_rng(seed)
    trials: list[Trial] = []
    for s, utts in spk.items():
        pairs = list(itertools.combinations(utts, 2))
        for k in rng.choice(len(pairs), size=n_per_speaker, replace=False):
            trials.append(Trial(*pairs[k], True))
    used: set[frozenset] = set()
    names = list(spk)
    for s in names:
        others = [o for o in names if o != s]
        made = 0
        attempts = 0
        while made < n_per_speaker:
            attempts += 1
            if attempts > 1000 * n_per_speaker:
                raise TrialError(f"could not draw {n_per_speaker} distinct non-target pairs for {s}")
            o = others[rng.integers(len(others))]
            a = spk[s][rng.integers(len(spk[s]))]
            b = spk[o][rng.integers(len(spk[o]))]
            key = frozenset((a, b))
            if key in used:
                continue
            used.add(key)
            trials.append(Trial(a, b, False))
            made += 1
    return trials


def write_trials(path, trials: Sequence[Trial]) -> None:
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.utt_a} {t.utt_b} {t.label}\n")


def read_trials(path) -> list[Trial]:
    out = []
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 3 or parts[2] not in ("target", "nontarget"):
                raise TrialError(f"{path}:{n}: expected 'utt_a utt_b target|nontarget'")
            out.append(Trial(parts[0], parts[1], parts[2] == "target"))
    return out


def cosine_score(e1, e2) -> float:
    a = np.asarray(getattr(e1, "vector", e1), dtype=np.float64)
    b = np.asarray(getattr(e2, "vector", e2), dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        raise ValueError("cosine score of a zero vector")
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def compute_eer(target_scores, nontarget_scores, condition: str = "none") -> EerReport:
    """Equal error rate from a threshold sweep over all distinct scores.

    At threshold ``tau``: FAR = share of non-targets scoring >= tau, FRR =
    share of targets scoring < tau.  A sentinel above the maximum closes the
    curve at (FAR, FRR) = (0, 1).  The crossing is interpolated linearly in
    exact rational arithmetic; if FAR == FRR over a run of thresholds the
    reported threshold is the midpoint of that run.
    """
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    nt, nn = len(tgt), len(non)
    if nt == 0 or nn == 0:
        raise ValueError("compute_eer needs non-empty target and non-target lists")
    taus = np.unique(np.concatenate([tgt, non]))
    # counts at each threshold
    far_num = nn - np.searchsorted(non, taus, side="left")
    frr_num = np.searchsorted(tgt, taus, side="left")
    far_num = np.append(far_num, 0)
    frr_num = np.append(frr_num, nt)
    # d = FAR - FRR scaled by nt*nn, integer valued and non-increasing
    d = far_num.astype(np.int64) * nt - frr_num.astype(np.int64) * nn
    # d[0] > 0 (FRR is 0 at the lowest score) and d[-1] < 0 (the sentinel),
    # so any exact crossing lies on real thresholds
    zero = np.flatnonzero(d == 0)
    if zero.size:
        i, j = zero[0], zero[-1]
        eer = Fraction(int(far_num[i]), nn)
        return EerReport(float(eer), float(0.5 * (taus[i] + taus[j])), nt, nn, condition)
    i = int(np.flatnonzero(d > 0)[-1])
    d0, d1 = int(d[i]), int(d[i + 1])
    w = Fraction(d0, d0 - d1)
    far0, far1 = Fraction(int(far_num[i]), nn), Fraction(int(far_num[i + 1]), nn)
    eer = far0 + w * (far1 - far0)
    t0 = taus[i]
    t1 = taus[i + 1] if i + 1 < len(taus) else taus[-1]
    return EerReport(float(eer), float(t0 + float(w) * (t1 - t0)), nt, nn, condition)


def score_trials(trials: Sequence[Trial], embeddings: Mapping[str, np.ndarray]) -> list[tuple[Trial, float]]:
    return [(t, cosine_score(embeddings[t.utt_a], embeddings[t.utt_b])) for t in trials]


def eer_from_scored(scored, condition: str = "none") -> EerReport:
    tgt = [s for t, s in scored if t.target]
    non = [s for t, s in scored if not t.target]
    return compute_eer(tgt, non, condition)


def write_scores(path, scored) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["utt_a", "utt_b", "label", "score"])
        for t, s in scored:
            w.writerow([t.utt_a, t.utt_b, t.label, repr(s)])


def det_points(target_scores, nontarget_scores) -> np.ndarray:
    """(threshold, FAR, FRR) rows for every distinct score."""
    tgt = np.sort(np.asarray(target_scores, dtype=np.float64))
    non = np.sort(np.asarray(nontarget_scores, dtype=np.float64))
    taus = np.unique(np.concatenate([tgt, non]))
    far = (len(non) - np.searchsorted(non, taus, side="left")) / len(non)
    frr = np.searchsorted(tgt, taus, side="left") / len(tgt)
    return np.column_stack([taus, far, frr])


# --------------------------------------------------------------------------
# masking studies


@dataclass
class AblationRow:
    condition: str
    eer: float  # percent
    delta: float  # percentage points vs. the unmasked condition
    n_trials: int
    excluded: list[str] = field(default_factory=list)
    delta_std: float | None = None  # across checkpoints, when several are given


def embed_all(model, utterances: Mapping, ablate=None) -> tuple[dict[str, np.ndarray], list[str]]:
    """Embed every utterance under an ablation mask; fully-masked ones are skipped."""
    out, skipped = {}, []
    for uid, utt in utterances.items():
        try:
            mask = build_key_mask(utt.labels, ablate, model.inventory)
        except EmptyMaskError:
            log.warning("ablation %s leaves %s with no attendable frames; excluded", ablate, uid)
            skipped.append(uid)
            continue
        out[uid] = model.embed(utt, mask).vector
    return out, skipped


def ablation_study(
    models,
    utterances: Mapping,
    trials: Sequence[Trial],
    conditions: Sequence[str],
) -> list[AblationRow]:
    """EER per masking condition, and its change from the unmasked baseline.

    ``models`` is one model or a list; with several, rows hold the mean over
    models and ``delta_std`` carries the spread of the change.
    """
    models = models if isinstance(models, (list, tuple)) else [models]
    per_model = [_study_one(m, utterances, trials, conditions) for m in models]
    rows = []
    for k, cond in enumerate(["none", *conditions]):
        rs = [pm[k] for pm in per_model]
        excluded = sorted({u for r in rs for u in r.excluded})
        rows.append(
            AblationRow(
                cond,
                float(np.mean([r.eer for r in rs])),
                float(np.mean([r.delta for r in rs])),
                min(r.n_trials for r in rs),
                excluded,
            )
        )
    if len(models) > 1:
        for k, row in enumerate(rows):
            row.delta_std = float(np.std([pm[k].delta for pm in per_model]))
    return rows


def _study_one(model, utterances, trials, conditions) -> list[AblationRow]:
    base_emb, _ = embed_all(model, utterances)
    base = eer_from_scored(score_trials(trials, base_emb), "none")
    rows = [AblationRow("none", base.eer_pct, 0.0, len(trials))]
    for cond in conditions:
        resolve_ablation(cond, model.inventory)
        emb, skipped = embed_all(model, utterances, cond)
        kept = [t for t in trials if t.utt_a in emb and t.utt_b in emb]
        rep = eer_from_scored(score_trials(kept, emb), cond)
        rows.append(AblationRow(cond, rep.eer_pct, rep.eer_pct - base.eer_pct, len(kept), skipped))
    return rows


def write_ablation(rows: Sequence[AblationRow], csv_path, json_path, meta: dict | None = None) -> None:
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["condition", "eer", "delta", "n_trials"])
        for r in rows:
            w.writerow([r.condition, repr(r.eer), repr(r.delta), r.n_trials])
    payload = {"meta": meta or {}, "rows": [asdict(r) for r in rows]}
    Path(json_path).write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")

