import numpy as np
import pytest

from mixsize.tensor import Tensor, precision


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(f, arr, eps=1e-6, coords=None):
    """Central differences of scalar ``f()`` w.r.t. ``arr`` (modified in place and restored)."""
    flat = arr.reshape(-1)
    idx = range(flat.size) if coords is None else coords
    out = np.zeros(len(idx) if coords is not None else flat.size)
    for k, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + eps
        fp = f()
        flat[i] = old - eps
        fm = f()
        flat[i] = old
        out[k] = (fp - fm) / (2 * eps)
    return out


def rel_err(a, b):
    a, b = np.ravel(a), np.ravel(b)
    den = max(np.linalg.norm(a), np.linalg.norm(b), 1e-300)
    return float(np.linalg.norm(a - b) / den)


def gradcheck(op, inputs, seed=0, eps=1e-6, max_coords=None):
    """Compare autodiff against central differences for ``sum(op(*inputs) * R)``.

    Returns the worst relative error over all inputs.
    """
    r = np.random.default_rng(seed)
    tensors = [Tensor(x.copy(), requires_grad=True, dtype=np.float64) for x in inputs]
    out = op(*tensors)
    weights = r.standard_normal(out.shape)
    loss = (out * Tensor(weights)).sum()
    loss.backward()

    worst = 0.0
    for t in tensors:
        def f():
            return float((op(*[Tensor(u.data) for u in tensors]).data * weights).sum())
        coords = None
        if max_coords is not None and t.data.size > max_coords:
            coords = list(r.choice(t.data.size, max_coords, replace=False))
        fd = numeric_grad(f, t.data, eps, coords)
        an = t.grad.reshape(-1) if coords is None else t.grad.reshape(-1)[coords]
        worst = max(worst, rel_err(an, fd))
    return worst


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if results:
        terminalreporter.section("acceptance criteria")
        for key in sorted(results):
            terminalreporter.write_line(results[key])
