import sys

import numpy as np
import pytest
import torch

from aslrec.backbone import default_backbone_config
from aslrec.model import SignRecognitionNet

SMALL = dict(width_multiplier=0.25, input_spatial=64, input_temporal=8)


@pytest.fixture
def small_config():
    return default_backbone_config(**SMALL)


@pytest.fixture
def small_model(small_config):
    torch.manual_seed(0)
    return SignRecognitionNet(small_config, num_classes=5, generator=torch.Generator().manual_seed(0))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(results):
        terminalreporter.write_line(results[number])
