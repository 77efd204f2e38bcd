from __future__ import annotations

import numpy as np
import pytest

from precedent.corpus import generate_synthetic
from precedent.encoder import EncoderConfig

# acceptance criteria append (name, passed, detail) here; printed after the run
ACCEPTANCE_LINES: list[tuple[str, bool, str]] = []

SMALL_ENC = EncoderConfig(max_tokens_per_paragraph=32, max_paragraphs=8, embedding_dim=16, contextualizer_layers=1,
                          attention_heads=2, ffn_dim=24)


@pytest.fixture(scope="session")
def small_corpus():
    """200 synthetic cases: 160 / 20 / 20."""
    return generate_synthetic(seed=3, n_cases=200, vocab_size=160)


@pytest.fixture(scope="session")
def small_enc():
    return SMALL_ENC


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
