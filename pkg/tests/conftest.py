import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

ACCEPTANCE_LINES = []


def record_acceptance(number, passed, detail):
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(line)


@pytest.fixture
def float64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


@pytest.fixture
def tiny_trunk():
    from bcosnet.backbone import TrunkConfig

    return TrunkConfig("tiny_test", out_channels=32, stride=8)


@pytest.fixture
def tiny_model_cfg(tiny_trunk):
    from bcosnet.model import ModelConfig

    return ModelConfig(num_classes=8, trunk=tiny_trunk, reduced_channels=16)


@pytest.fixture(scope="session")
def synth_ds():
    from bcosnet.data import synth_dataset

    return synth_dataset(num_ids=8, imgs_per_id=8, image_size=(64, 32), seed=0)
