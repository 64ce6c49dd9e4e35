import os

import numpy as np
import pytest
import torch

# the deterministic single-threaded mode unless the env cap says otherwise
torch.set_num_threads(max(1, int(os.environ.get("SIAMTRACK_THREADS", "1") or "1")))

ACCEPTANCE_RESULTS: dict[int, tuple[bool, str]] = {}


def record_acceptance(criterion: int, passed: bool, detail: str):
    ACCEPTANCE_RESULTS[criterion] = (passed, detail)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[criterion]
        status = "PASS" if passed else "FAIL"
        terminalreporter.write_line(f"criterion {criterion:2d}: {status}  {detail}")


@pytest.fixture
def rng():
    return np.random.default_rng(0)
