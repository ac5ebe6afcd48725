import numpy as np
import pytest

from pdaf.features import compute_fbank
from pdaf.fixture import generate_corpus
from pdaf.network import Utterance
from pdaf.phonetics import label_frames


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(f, arrays, h=1e-5):
    """Central differences of scalar ``f(*arrays)`` w.r.t. every entry of every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + h
            up = f(*arrays)
            a[i] = old - h
            down = f(*arrays)
            a[i] = old
            g[i] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def rel_err(analytic, numeric):
    """Max abs difference relative to the larger of the two gradient magnitudes."""
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    scale = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / scale)


def to_utterances(corpus):
    out = []
    for c in corpus:
        fm = compute_fbank(c.wave)
        out.append(Utterance(c.utt_id, c.speaker, fm.frames, label_frames(c.segments, fm.n_frames), c.segments))
    return out


@pytest.fixture(scope="session")
def small_corpus():
    """4 speakers x 3 utterances of 0.6 s; enough for forward-pass tests."""
    return to_utterances(generate_corpus(4, 3, seed=3, duration=0.6))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
