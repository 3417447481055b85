import sys
from pathlib import Path

import pytest
import torch

from scriptalign.corpus import load_corpus
from scriptalign.tokenizer import train_bpe

FIXTURES = Path(__file__).parent / "fixtures"

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def fixtures():
    return FIXTURES


@pytest.fixture(scope="session")
def mini_corpus():
    return load_corpus(FIXTURES / "egyptian_mini.jsonl").sentences


@pytest.fixture(scope="session")
def mini_tok(mini_corpus):
    texts = [s.text for s in mini_corpus] + [" ".join(s.translation) for s in mini_corpus]
    return train_bpe(texts, 420, min_freq=2)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "ACCEPTANCE_RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
