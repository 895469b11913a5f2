import numpy as np
import pytest

from dfn.model import ModelConfig
from dfn.tensor import WIDE, Tensor


def tiny_cfg(**kw) -> ModelConfig:
    base = dict(num_classes=3, stage_channels=(4, 4, 6, 6, 8), unified_channels=8, init_seed=3)
    base.update(kw)
    return ModelConfig(**base)


def wide(rng, *shape, grad=True):
    return Tensor(rng.normal(size=shape), requires_grad=grad, dtype=WIDE)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
