import numpy as np
import pytest

from hyma import embeddings as em
from hyma import numerics as nx


@pytest.fixture(autouse=True)
def _float64():
    nx.set_default_dtype(np.float64)
    yield
    nx.set_default_dtype(np.float64)


@pytest.fixture
def small_zoo():
    """3 x 1 planted zoo with 256 samples, enough for fast training tests."""
    return em.planted_zoo([1.0, 0.6, 0.2], [0.8], dims_a=[8, 10, 12], dims_b=[8],
                          latent_dim=6, sample_count=256, seed=3)


# -- acceptance summary: one line per criterion ------------------------------

_ACCEPTANCE = {}


def pytest_runtest_logreport(report):
    name = report.nodeid.rsplit("::", 1)[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    n = int(name.split("_")[2])
    failed = report.failed or (report.when == "call" and report.skipped)
    if report.when == "call" or failed:
        detail = dict(report.user_properties).get("detail", "")
        prev = _ACCEPTANCE.get(n, (True, ""))
        _ACCEPTANCE[n] = (prev[0] and not failed, detail or prev[1])


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
