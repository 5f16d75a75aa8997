import os
import sys

import pytest
import torch

sys.path.insert(0, os.path.dirname(__file__))
torch.set_num_threads(1)

_CRITERIA = pytest.StashKey[list]()


@pytest.fixture
def record_criterion(request):
    """Record one acceptance result; all of them are printed in the terminal summary."""
    results = request.config.stash.setdefault(_CRITERIA, [])

    def record(number, passed, detail):
        results.append((number, bool(passed), detail))
        return bool(passed)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    results = config.stash.get(_CRITERIA, [])
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(results, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}")
