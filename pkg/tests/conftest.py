import numpy as np
import pytest

from fedcodist.numerics import MlpSpec, ParamVector, init_params


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_spec(rng, max_hidden=16, max_depth=2, activation=None):
    depth = int(rng.integers(0, max_depth + 1))
    return MlpSpec(
        input_dim=int(rng.integers(1, 9)),
        hidden_dims=tuple(int(rng.integers(1, max_hidden + 1)) for _ in range(depth)),
        num_classes=int(rng.integers(2, 6)),
        activation=activation or ("relu" if rng.random() < 0.5 else "tanh"),
    )


def random_params(spec, rng, scale=1.0):
    return ParamVector(rng.normal(0, scale, spec.parameter_count), spec.segments())


def finite_difference(f, x, h=1e-5):
    grad = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        grad[i] = (f(xp) - f(xm)) / (2 * h)
    return grad


def max_rel_error(a, b, floor=1e-4):
    """Max over coordinates of |a-b| / max(|a|, |b|, floor)."""
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


_CRITERIA: list[str] = []


@pytest.fixture
def report():
    """``report(n, title, ok, detail)`` records one pass/fail line and returns ``ok``."""

    def _report(number, title, ok, detail=""):
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}  {title}  ({detail})"
        _CRITERIA.append(line)
        print(line)
        return ok

    return _report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_CRITERIA, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
