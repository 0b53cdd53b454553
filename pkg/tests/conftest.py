import numpy as np
import pytest

from msbt.config import ModelConfig


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_cfg():
    """Three modalities, D_E=8, short schedule; cheap enough for per-test forwards."""
    return ModelConfig(input_dims={"R": 5, "F": 6, "A": 4}, d_model=8, layers_msbt=2,
                       bottleneck_n1=2, layers_global=1)


def random_features(rng, cfg, t):
    return {m: rng.normal(size=(t, cfg.input_dims[m])) for m in cfg.modalities}


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
