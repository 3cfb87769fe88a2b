import time

import numpy as np
import pytest

from omniquant.corpus import synthetic_corpus
from omniquant.metrics import sample_calibration_segments, stack_segments
from omniquant.pretrain import PretrainConfig, pretrain_tiny

TRAIN_BYTES = 256 * 1024
HELDOUT_BYTES = 48 * 1024

_CRITERIA: dict[int, tuple[str, str, float]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or rep.when != "call" and not (rep.when == "setup" and rep.failed):
        return
    n, title = mark.args
    status = "PASS" if rep.passed else "FAIL"
    if rep.skipped:
        status = "SKIP"
    _CRITERIA[n] = (title, status, rep.duration)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, status, dur = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d} {status}  {title}  ({dur:.1f}s)")


@pytest.fixture(scope="session")
def corpora():
    """Training text and a held-out draw of the same grammar with a different seed."""
    return synthetic_corpus(TRAIN_BYTES, seed=0), synthetic_corpus(HELDOUT_BYTES, seed=1)


@pytest.fixture(scope="session")
def pretrained(corpora):
    """The 2000-step tiny byte LM plus its wall time (shared by the end-to-end criteria)."""
    train, _ = corpora
    t0 = time.perf_counter()
    model, losses = pretrain_tiny(train, train=PretrainConfig(steps=2000, seed=0))
    return model, losses, time.perf_counter() - t0


@pytest.fixture(scope="session")
def calib_segments(corpora):
    return stack_segments(sample_calibration_segments(corpora[0], 32, 128, seed=0))


@pytest.fixture(scope="session")
def probe_segments(corpora):
    return stack_segments(sample_calibration_segments(corpora[1], 8, 128, seed=1))


@pytest.fixture(scope="session")
def calibrated_cache():
    """Memo of ``(config) -> (quantized model, traces, seconds)`` shared across criteria."""
    return {}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
