import os
from pathlib import Path

import pytest

from pmslam.synth.recipes import ModelCache

_RESULTS: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """``record(n, passed, detail)`` for the acceptance summary."""

    def record(n: int, passed: bool, detail: str):
        _RESULTS[n] = (bool(passed), detail)
        print(f"criterion {n}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_RESULTS):
        ok, detail = _RESULTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def model_cache(request):
    """Trained toy models, reused across sessions while sources and recipes are unchanged.

    Set ``PMSLAM_MODEL_CACHE`` to keep checkpoints somewhere other than the
    pytest cache directory.
    """
    root = os.environ.get("PMSLAM_MODEL_CACHE")
    path = Path(root) if root else request.config.cache.mkdir("pmslam-models")
    return ModelCache(path)
