import numpy as np
import pytest

from ifc_lab import tensor as T


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` at ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_err(a: np.ndarray, n: np.ndarray) -> float:
    return float(np.max(np.abs(a - n) / (np.abs(a) + 1e-8)))


def grad_check(build, leaves: list[T.Tensor], h: float = 1e-5) -> float:
    """Max relative error between backward() and central differences over all leaves."""
    for p in leaves:
        p.grad = np.zeros_like(p.data)
    build().backward()
    worst = 0.0
    for p in leaves:
        analytic = p.grad.copy()

        def f():
            with T.no_grad(), T.flops_disabled():
                return build().item()

        worst = max(worst, rel_err(analytic, numeric_grad(f, p.data, h)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_GATES: list[str] = []


def record(line: str) -> None:
    _GATES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _GATES:
        terminalreporter.section("acceptance")
        for line in sorted(_GATES, key=lambda s: int(s.split("]")[1].split(".")[0])):
            terminalreporter.write_line(line)
