import numpy as np
import pytest
import torch

from qair.encoders import load_backend
from qair.restorer import RestorerConfig

torch.set_num_threads(1)

TINY = RestorerConfig(base_channels=8, blocks=[1, 1, 1, 1])


def directional_check(f, params, n_dirs=3, eps=1e-6, seed=0):
    """Compare autodiff and central-difference directional derivatives of scalar ``f()``.

    ``params`` are double tensors with ``requires_grad``. Returns the worst
    relative error over ``n_dirs`` random directions.
    """
    for p in params:
        p.grad = None
    f().backward()
    grads = [p.grad.detach().clone() for p in params]
    g = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(n_dirs):
        dirs = [torch.randn(p.shape, generator=g, dtype=p.dtype) for p in params]
        analytic = sum(float((gr * d).sum()) for gr, d in zip(grads, dirs))
        with torch.no_grad():
            for p, d in zip(params, dirs):
                p.add_(eps * d)
            plus = float(f())
            for p, d in zip(params, dirs):
                p.sub_(2 * eps * d)
            minus = float(f())
            for p, d in zip(params, dirs):
                p.add_(eps * d)
        numeric = (plus - minus) / (2 * eps)
        worst = max(worst, abs(numeric - analytic) / max(abs(analytic), 1e-8))
    return worst


@pytest.fixture(scope="session")
def vl():
    return load_backend("vision_language", "toy", seed=3)


@pytest.fixture(scope="session")
def semantic():
    return load_backend("semantic", "toy", seed=0)


@pytest.fixture(scope="session")
def perceptual():
    return load_backend("perceptual", "toy", seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
