import contextlib

import numpy as np
import pytest
import torch

from groundvqa.core import QAItem

torch.set_num_threads(1)


@contextlib.contextmanager
def record_gt_reads():
    """Count every read of ``QAItem.gt_segment`` made inside the block."""
    reads = []
    original = QAItem.__getattribute__

    def spy(self, name):
        if name == "gt_segment":
            reads.append(object.__getattribute__(self, "qid"))
        return original(self, name)

    QAItem.__getattribute__ = spy
    try:
        yield reads
    finally:
        QAItem.__getattribute__ = original


@pytest.fixture
def gt_reads():
    with record_gt_reads() as reads:
        yield reads


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def corpus():
    """The default synthetic corpus (50 train, 20 test videos) and its tokenizer."""
    from groundvqa.data import SyntheticSpec, corpus_texts, generate_synthetic
    from groundvqa.model import Tokenizer

    train, test = generate_synthetic(SyntheticSpec())
    return train, test, Tokenizer.build(corpus_texts([train, test]))


@pytest.fixture(scope="session")
def pipeline_run(corpus):
    """Full desk-scale pipeline runs, cached per (connector mode, seed).

    Each entry is ``(PipelineResult, gt_segment reads, seconds)``.
    """
    import time

    from groundvqa.training import PipelineConfig, run_pipeline

    train, _, tok = corpus
    cache = {}

    def run(mode="multi", seed=0):
        if (mode, seed) not in cache:
            t0 = time.perf_counter()
            with record_gt_reads() as reads:
                res = run_pipeline(train, tok, PipelineConfig(seed=seed, connector_mode=mode))
            cache[mode, seed] = (res, list(reads), time.perf_counter() - t0)
        return cache[mode, seed]

    return run


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
