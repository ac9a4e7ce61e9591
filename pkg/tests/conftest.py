import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

torch.set_num_threads(1)

# lines appended by the acceptance tests, printed once at the end of the session
ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def tiny_cfg():
    from unsam import RunConfig
    return RunConfig(image_size=32, patch_size=8, dim=16, depth=2, heads=2, adapter_rank=4,
                     batch_size=2, epochs=2)


@pytest.fixture
def tiny_cfg64(tiny_cfg):
    return tiny_cfg.replace(dtype="float64")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
