import numpy as np
import pytest
from scipy.special import log_softmax

from adello_lab.data import LongTailSpec, make_task, sample_split
from adello_lab.math_core import ClassifierState

# Canonical synthetic tasks shared by the run-level tests.
BENCHMARK_SEPARATION = 2.0
SEPARABLE_SEPARATION = 4.0
TASK_SEED = 0
FORWARD = dict(K=5, N1=60, gamma_l=50, gamma_u=50, M1=600)
REVERSED = dict(K=5, N1=60, gamma_l=50, gamma_u=1 / 50, M1=600)


def canonical(separation, lt_kwargs, seed, test_per_class=400):
    spec = LongTailSpec(**lt_kwargs)
    task = make_task(2, 5, separation, 1.0, TASK_SEED).with_priors(spec)
    return task, sample_split(task, spec, test_per_class, seed)


def reference_loss(params, X, targets, offsets, weights, temperature, activation="tanh"):
    """Loss written out directly, independent of the package's backward pass."""
    pre = X @ params["W1"] + params["b1"]
    h = np.tanh(pre) if activation == "tanh" else np.log1p(np.exp(pre))
    z = h @ params["W2"] + params["b2"]
    lp = log_softmax((z + offsets) / temperature, axis=1)
    return float(np.mean(weights * -(targets * lp).sum(axis=1)))


def finite_difference(params, fn, step=1e-5):
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + step
            up = fn()
            p[idx] = old - step
            down = fn()
            p[idx] = old
            g[idx] = (up - down) / (2 * step)
        grads[name] = g
    return grads


def random_state(rng, D, H, K, activation="tanh", scale=1.0):
    params = {
        "W1": scale * rng.standard_normal((D, H)),
        "b1": scale * rng.standard_normal(H),
        "W2": scale * rng.standard_normal((H, K)),
        "b2": scale * rng.standard_normal(K),
    }
    return ClassifierState(params=params, activation=activation)


def assert_grads_close(analytic, numeric, rel=1e-5, abs_floor=1e-8):
    for name in analytic:
        a, n = analytic[name], numeric[name]
        err = np.abs(a - n)
        scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), abs_floor)
        ok = (err / scale <= rel) | (err <= abs_floor)
        assert ok.all(), (name, float((err / scale).max()))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
