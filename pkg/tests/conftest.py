import numpy as np
import pytest

from desklst import data as D
from desklst import model as M

TINY = dict(d_frames=4, d_enc=8, enc_layers=1, enc_heads=2, d_llm=16, dec_layers=1, dec_heads=2, n_source=5)


@pytest.fixture(scope="session")
def tiny_lang():
    return D.build_language(5, n_source=5, d_frames=4)


@pytest.fixture(scope="session")
def tiny_st(tiny_lang):
    return D.gen_corpus(tiny_lang, {"train": 24, "dev": 8}, 2, "st")


@pytest.fixture
def tiny_model():
    return M.LSTModel.create(M.ModelConfig(**TINY), seed=0)


def perturbed(model, scale=0.1, seed=1):
    """Give every tensor (gains and biases included) non-trivial values."""
    rng = np.random.default_rng(seed)
    for n in model.store.names():
        t = model.store[n]
        t.data = (t.data + rng.normal(0, scale, t.shape)).astype(t.data.dtype)
    return model


def pytest_configure(config):
    config._acceptance_lines = []


def pytest_terminal_summary(terminalreporter, config):
    lines = sorted(config._acceptance_lines, key=lambda s: int(s.split(":")[0].split()[1]))
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
