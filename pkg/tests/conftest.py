import numpy as np
import pytest

from motionpose.corpus import CorpusConfig, FlowParams, generate_corpus, precompute_flows


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_corpus(tmp_path_factory):
    """Six 12-frame clips at 96x96 with precomputed flows (shared, read-only)."""
    root = tmp_path_factory.mktemp("corpus")
    cfg = CorpusConfig(num_clips=6, frames_per_clip=12)
    corpus = generate_corpus(root, cfg, seed=5)
    precompute_flows(corpus, FlowParams(iterations=30))
    return corpus


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = {}
CRITERIA = 10


@pytest.fixture(scope="session")
def acceptance():
    """``record(n, ok, detail)`` stores one line for the end-of-run report."""

    def record(n, ok, detail):
        ACCEPTANCE[n] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in range(1, CRITERIA + 1):
        if n in ACCEPTANCE:
            ok, detail = ACCEPTANCE[n]
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        else:
            terminalreporter.write_line(f"criterion {n:2d}: NOT RUN  (deselected, or errored before reporting)")
