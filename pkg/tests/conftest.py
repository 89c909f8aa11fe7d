import numpy as np
import pytest

from refresolve.corpus import GeneratorConfig, generate_corpus
from refresolve.srr import ModelConfig
from refresolve.trainer import TrainConfig, encode_all, train_encoded


@pytest.fixture(scope="session")
def default_corpus():
    return generate_corpus(GeneratorConfig())


@pytest.fixture(scope="session")
def small_corpus():
    return generate_corpus(GeneratorConfig(n_category_samples=300, n_descriptive_screens=40))


@pytest.fixture(scope="session")
def default_encoded(default_corpus):
    cfg = ModelConfig()
    return {k: encode_all(v, cfg) for k, v in default_corpus.splits.items()}


@pytest.fixture(scope="session")
def trained_default(default_encoded):
    """Full model trained once on the default corpus with default configs."""
    cfg, tcfg = ModelConfig(), TrainConfig()
    params, history = train_encoded(default_encoded["train"], default_encoded["val"], cfg, tcfg)
    return params, history, cfg


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
