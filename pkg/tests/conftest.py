import numpy as np
import pytest

from alquery.core_model import PredictionStack

_ACCEPTANCE_KEY = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion.

    Call as ``acceptance(label, passed, detail)``; the line is echoed
    immediately and repeated in the terminal summary.
    """
    lines = request.config.stash[_ACCEPTANCE_KEY]

    def record(label: str, passed: bool, detail: str = "") -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] {label}" + (f" :: {detail}" if detail else "")
        lines.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)


def make_stack(probs, image_id="img"):
    """Wrap a nested list or array as a float64 PredictionStack, padding to 4-D."""
    arr = np.asarray(probs, dtype=np.float64)
    while arr.ndim < 4:
        arr = arr[..., None]
    return PredictionStack(image_id, arr)
