import numpy as np
import pytest

from st3.tensor import Tape, Tensor


def numeric_grad(f, arr: np.ndarray, eps: float = 1e-3) -> np.ndarray:
    """Central finite differences of scalar ``f()`` w.r.t. ``arr`` (mutated in place, then restored)."""
    g = np.zeros_like(arr, dtype=np.float64)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + eps
        fp = f()
        arr[i] = orig - eps
        fm = f()
        arr[i] = orig
        g[i] = (fp - fm) / (2 * eps)
    return g


def rel_err(a, b) -> float:
    a, b = np.asarray(a, np.float64), np.asarray(b, np.float64)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def check_grads(build, inputs: list[Tensor], seed: int = 0, eps: float = 1e-3) -> float:
    """Max relative error between tape gradients and finite differences.

    ``build(*inputs)`` returns a Tensor; it is reduced to a scalar by a fixed
    random projection so every output element contributes.
    """
    rng = np.random.default_rng(seed)
    out_shape = build(*inputs).shape
    proj = rng.standard_normal(out_shape)

    def scalar():
        return float(np.sum(build(*inputs).data * proj))

    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = build(*inputs)
    tape.backward(out, proj.astype(out.data.dtype))
    worst = 0.0
    for t in inputs:
        worst = max(worst, rel_err(t.grad, numeric_grad(scalar, t.data, eps)))
    return worst


def f64(rng, *shape, low=None):
    x = rng.standard_normal(shape)
    if low is not None:
        x = np.where(np.abs(x) < low, np.sign(x + 1e-12) * low, x)
    return Tensor(x, dtype=np.float64)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
