import numpy as np
import pytest

from fibalab import tensor as T


def numeric_grad(f, x, h=1e-6):
    """Central differences of scalar f at array x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b):
    a, b = np.asarray(a, float), np.asarray(b, float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check_grad(build, *arrays, h=1e-6):
    """Max relative error between autodiff and central differences over every input."""
    leaves = [T.Tensor(a, requires_grad=True) for a in arrays]
    analytic = T.grad(build(*leaves), leaves)
    worst = 0.0
    for k, a in enumerate(arrays):
        def f(v, k=k):
            args = [T.Tensor(v) if j == k else T.Tensor(arrays[j]) for j in range(len(arrays))]
            return float(build(*args).data)
        worst = max(worst, rel_error(analytic[k], numeric_grad(f, a, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one PASS/FAIL line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def record_criterion(number, ok, detail):
    line = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
