import numpy as np
import pytest

from fjl.datagen import DatagenConfig, generate_dataset
from fjl.model import ModelConfig


TINY_MODEL = dict(lstm_hidden=6, attn_heads=2, attn_dim=4, ffn_dim=8, mlp_layers=(5, 6))


def tiny_config(architecture="lstm_transformer", **kw):
    return ModelConfig(architecture=architecture, **{**TINY_MODEL, **kw})


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_dataset():
    """Five patients, four exercises, 4 s each: about 1,800 windows."""
    cfg = DatagenConfig(n_patients=5, duration_s=4.0)
    return generate_dataset(cfg, seed=3)


# acceptance outcomes, one line per criterion, printed after the run
ACCEPTANCE = {}


def record_criterion(number, ok, detail):
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if ok else 'FAIL'} - {detail}"
    print(ACCEPTANCE[number])
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
