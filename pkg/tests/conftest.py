import numpy as np
import pytest

from ispforge import _backend


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=_backend.available())
def backend(request):
    with _backend.use_backend(request.param):
        yield request.param


def conv_loop(x, w, b=None, stride=1, pads=(0, 0, 0, 0), groups=1):
    """Scalar nested-loop convolution used as an independent reference."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    t, bo, l, r = pads
    x = np.pad(x, ((0, 0), (0, 0), (t, bo), (l, r)))
    n, c, h, wd = x.shape
    co, cig, kh, kw = w.shape
    oh, ow = (h - kh) // stride + 1, (wd - kw) // stride + 1
    cog = co // groups
    out = np.zeros((n, co, oh, ow))
    for i in range(n):
        for o in range(co):
            g = o // cog
            for y in range(oh):
                for xx in range(ow):
                    acc = 0.0
                    for ci in range(cig):
                        for ky in range(kh):
                            for kx in range(kw):
                                acc += w[o, ci, ky, kx] * x[i, g * cig + ci, y * stride + ky, xx * stride + kx]
                    out[i, o, y, xx] = acc + (0.0 if b is None else b[o])
    return out


ACCEPTANCE_LINES = {}


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    def report(number, title, ok, detail):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}: {detail}"
        ACCEPTANCE_LINES[number] = line
        print(line)
        assert ok, line
    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
