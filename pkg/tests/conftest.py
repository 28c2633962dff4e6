import mpmath
import numpy as np
import pytest

mpmath.mp.dps = 50


def mp_softmax(xs):
    es = [mpmath.e ** mpmath.mpf(float(x)) for x in xs]
    s = mpmath.fsum(es)
    return [e / s for e in es]


def mp_sigmoid(x):
    return 1 / (1 + mpmath.e ** (-mpmath.mpf(float(x))))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE = []


def record(criterion, passed, detail):
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
