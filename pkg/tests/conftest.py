import numpy as np
import pytest

from bitkv import kernels

ACCEPTANCE_LINES: list[str] = []

_KERNEL_NAMES = ("popcount", "encode_tiles", "decode_tiles", "spmv_keys", "weighted_values")


@pytest.fixture(params=kernels.BACKENDS)
def backend(request, monkeypatch):
    """Route every kernel call through one backend for the duration of a test."""
    mod = kernels.get_backend(request.param)
    for name in _KERNEL_NAMES:
        monkeypatch.setattr(kernels, name, getattr(mod, name))
    return request.param


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
