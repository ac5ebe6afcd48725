import csv
import json
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pdaf.evaluation import (
    Trial,
    TrialError,
    ablation_study,
    compute_eer,
    cosine_score,
    det_points,
    eer_from_scored,
    embed_all,
    make_trials,
    read_trials,
    write_ablation,
    write_scores,
    score_trials,
)
from pdaf.network import PdafModel
from pdaf.phonetics import INVENTORY

from .test_network import small_cfg, speakers_of, toy_utterances

GOLDEN_TRIALS = Path(__file__).parent / "data" / "trials_seed42.txt"


def brute_force_eer(tgt, non):
    """Evaluate FAR/FRR at every candidate threshold with plain loops, interpolate at the sign change."""
    taus = sorted(set(tgt) | set(non)) + [float("inf")]
    pts = []
    for tau in taus:
        far = sum(1 for s in non if s >= tau) / len(non)
        frr = sum(1 for s in tgt if s < tau) / len(tgt)
        pts.append((far, frr))
    for far, frr in pts:
        if far == frr:
            return far
    for (f0, r0), (f1, r1) in zip(pts, pts[1:]):
        d0, d1 = f0 - r0, f1 - r1
        if d0 > 0 > d1:
            w = d0 / (d0 - d1)
            return f0 + w * (f1 - f0)
    raise AssertionError("no crossing")


def fixture_ids(n_spk=8, n_utt=6):
    return {f"spk{s:02d}": [f"spk{s:02d}_u{u:03d}" for u in range(14, 14 + n_utt)] for s in range(n_spk)}


# -- trials -------------------------------------------------------------------


def test_small_exhaustive_trial_case():
    trials = make_trials({"a": ["a1", "a2"], "b": ["b1", "b2"]}, 1, seed=0)
    assert sum(t.target for t in trials) == 2
    assert sum(not t.target for t in trials) == 2
    assert len({frozenset((t.utt_a, t.utt_b)) for t in trials}) == 4


def test_trials_are_seeded():
    a = make_trials(fixture_ids(), 10, seed=42)
    assert a == make_trials(fixture_ids(), 10, seed=42)
    assert a != make_trials(fixture_ids(), 10, seed=43)
    assert len(a) == 160


def test_trials_match_golden_file(tmp_path):
    trials = make_trials(fixture_ids(), 10, seed=42)
    assert read_trials(GOLDEN_TRIALS) == trials


def test_trial_labels_are_correct():
    for t in make_trials(fixture_ids(), 10, seed=1):
        assert (t.utt_a.split("_")[0] == t.utt_b.split("_")[0]) == t.target
        assert t.utt_a != t.utt_b


def test_trial_errors(tmp_path):
    with pytest.raises(TrialError, match="2 speakers"):
        make_trials({"a": ["a1", "a2"]}, 1)
    with pytest.raises(TrialError, match="fewer than 2"):
        make_trials({"a": ["a1"], "b": ["b1", "b2"]}, 1)
    with pytest.raises(TrialError, match="3 pairs"):
        make_trials({"a": ["a1", "a2", "a3"], "b": ["b1", "b2", "b3"]}, 4)
    with pytest.raises(TrialError):
        Trial("x", "x", True)
    (tmp_path / "t.txt").write_text("a b maybe\n")
    with pytest.raises(TrialError, match=":1:"):
        read_trials(tmp_path / "t.txt")


# -- cosine ---------------------------------------------------------------------


def test_cosine_examples():
    e = np.array([0.3, -1.2, 2.0])
    assert cosine_score(e, e) == pytest.approx(1.0, abs=1e-15)
    assert cosine_score([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine_score(e, -e) == pytest.approx(-1.0, abs=1e-15)
    with pytest.raises(ValueError):
        cosine_score(e, np.zeros(3))


# -- EER ------------------------------------------------------------------------


def test_eer_separable_is_exactly_zero():
    assert compute_eer([0.9, 0.8], [0.1, 0.2]).eer == 0.0


@pytest.mark.parametrize("scores", [[0.5, 0.5], [1.0, 2.0], [1.0, 2.0, 3.0], [0.1, 0.1, 0.7, 0.3, 0.9]])
def test_eer_identical_is_exactly_half(scores):
    assert compute_eer(scores, scores).eer == 0.5


def test_eer_empty_raises():
    with pytest.raises(ValueError):
        compute_eer([], [0.1])


def test_eer_report_fields():
    rep = compute_eer([0.9, 0.4, 0.8], [0.1, 0.5], condition="mask=AA")
    assert (rep.n_target, rep.n_nontarget, rep.condition) == (3, 2, "mask=AA")
    assert rep.eer_pct == 100 * rep.eer


def test_eer_matches_brute_force_on_100_scores():
    r = np.random.default_rng(0)
    tgt = list(r.normal(1.0, 1.0, 100))
    non = list(r.normal(0.0, 1.0, 100))
    assert abs(compute_eer(tgt, non).eer - brute_force_eer(tgt, non)) <= 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 60), st.integers(1, 60), st.booleans())
def test_eer_oracle_property(seed, nt, nn, coarse):
    r = np.random.default_rng(seed)
    draw = (lambda n, m: list(np.round(r.normal(m, 1.0, n), 1))) if coarse else (lambda n, m: list(r.normal(m, 1.0, n)))
    tgt, non = draw(nt, r.uniform(0, 2)), draw(nn, 0.0)
    rep = compute_eer(tgt, non)
    assert abs(rep.eer - brute_force_eer(tgt, non)) <= 1e-12
    assert 0.0 <= rep.eer <= 1.0  # above 0.5 when targets mostly score lower


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 40))
def test_eer_invariant_to_increasing_transforms(seed, nt, nn):
    r = np.random.default_rng(seed)
    tgt, non = r.normal(0.5, 1, nt), r.normal(0, 1, nn)
    base = compute_eer(tgt, non).eer
    assert compute_eer(3 * tgt + 1, 3 * non + 1).eer == base
    assert compute_eer(np.exp(tgt), np.exp(non)).eer == base


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31), st.integers(1, 40), st.integers(1, 40))
def test_eer_negate_and_swap(seed, nt, nn):
    r = np.random.default_rng(seed)
    tgt, non = r.normal(0.5, 1, nt), r.normal(0, 1, nn)
    assert compute_eer(-non, -tgt).eer == compute_eer(tgt, non).eer


def test_det_points_columns():
    pts = det_points([0.9, 0.5], [0.1, 0.5])
    np.testing.assert_array_equal(pts[:, 0], [0.1, 0.5, 0.9])
    np.testing.assert_array_equal(pts[:, 1], [1.0, 0.5, 0.0])
    np.testing.assert_array_equal(pts[:, 2], [0.0, 0.0, 0.5])


# -- ablation ---------------------------------------------------------------------


@pytest.fixture(scope="module")
def ablation_setup():
    data = toy_utterances(n_per_spk=4, seed=4)
    for u in data:
        u.labels[u.labels == INVENTORY.index("ZH")] = INVENTORY.index("AA")
    model = PdafModel(small_cfg(), speakers_of(data))
    utts = {u.utt_id: u for u in data}
    trials = make_trials({s: [u.utt_id for u in data if u.speaker == s] for s in speakers_of(data)}, 3, seed=0)
    return model, utts, trials


def test_absent_phoneme_gives_exactly_zero_delta(ablation_setup):
    model, utts, trials = ablation_setup
    rows = ablation_study(model, utts, trials, ["ZH"])
    assert rows[0].condition == "none" and rows[1].condition == "ZH"
    assert rows[1].delta == 0.0
    assert rows[1].eer == rows[0].eer
    emb, _ = embed_all(model, utts)
    assert rows[0].eer == eer_from_scored(score_trials(trials, emb)).eer_pct


def test_fully_masked_utterances_are_excluded(ablation_setup):
    model, utts, trials = ablation_setup
    first = next(iter(utts))
    u = utts[first]
    only_aa = {**utts, first: replace(u, labels=np.where(u.labels == INVENTORY.sil, INVENTORY.sil, INVENTORY.index("AA")))}
    rows = ablation_study(model, only_aa, trials, ["AA"])
    assert rows[1].excluded == [first]
    assert rows[1].n_trials == sum(first not in (t.utt_a, t.utt_b) for t in trials) < len(trials)


def test_multi_model_rows_carry_spread(ablation_setup, tmp_path):
    model, utts, trials = ablation_setup
    other = PdafModel(small_cfg(seed=9), model.speakers)
    rows = ablation_study([model, other], utts, trials, ["Vowels"])
    assert rows[1].delta_std is not None and rows[1].delta_std >= 0
    write_ablation(rows, tmp_path / "a.csv", tmp_path / "a.json", {"seed": 0})
    lines = list(csv.reader(open(tmp_path / "a.csv")))
    assert lines[0] == ["condition", "eer", "delta", "n_trials"]
    assert [r[0] for r in lines[1:]] == ["none", "Vowels"]
    payload = json.loads((tmp_path / "a.json").read_text())
    assert payload["meta"] == {"seed": 0} and len(payload["rows"]) == 2


def test_score_dump(tmp_path):
    trials = [Trial("a", "b", True), Trial("a", "c", False)]
    emb = {"a": np.array([1.0, 0.0]), "b": np.array([1.0, 1.0]), "c": np.array([0.0, 1.0])}
    scored = score_trials(trials, emb)
    write_scores(tmp_path / "s.csv", scored)
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert rows[0] == ["utt_a", "utt_b", "label", "score"]
    assert rows[2] == ["a", "c", "nontarget", "0.0"]
    assert float(rows[1][3]) == pytest.approx(2**-0.5)
