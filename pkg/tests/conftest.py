import numpy as np
import pytest

from flowattack import models as M
from flowattack.tensor import Tape, Tensor, backward


def numeric_grad(f, arrays, index, h=1e-6):
    """Central differences of scalar ``f(*arrays)`` w.r.t. ``arrays[index]``."""
    x = arrays[index]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def analytic_grads(op, arrays, weights):
    """Gradient of sum(op(*tensors) * weights) for every input array."""
    ts = [Tensor(a, requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*ts)
        loss = (out * weights).sum()
    backward(tape, loss)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in ts]


def rel_error(a, n):
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-8))


def fd_check(op, arrays, seed=0, h=1e-6):
    """Largest relative error between analytic and central-difference gradients."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = op(*[Tensor(a) for a in arrays]).data
    weights = np.random.default_rng(seed).standard_normal(out.shape)

    def f(*arrs):
        return float((op(*[Tensor(a) for a in arrs]).data * weights).sum())

    grads = analytic_grads(op, arrays, weights)
    return max(rel_error(g, numeric_grad(f, arrays, i, h)) for i, g in enumerate(grads))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_model():
    from flowattack.data import NormalizationScheme
    from flowattack.models import build_model, preset
    spec = preset("flownetc_mini", channel_scale=0.25, redirect_channels=8, max_displacement=2)
    return build_model(spec, 0, np.float64, NormalizationScheme("sym_unit"))


@pytest.fixture(scope="session")
def tiny_dataset():
    """Four (pair, flow) samples at 32x64."""
    from flowattack.data import DatasetManifest, SceneConfig
    man = DatasetManifest.range(0, 4, SceneConfig(height=32, width=64))
    return [man.sample(i) for i in range(len(man))]


def influence_side(spec: M.EncoderSpec, size: int = 224) -> int:
    """Bounding-box side of input pixels with nonzero gradient on one central output unit."""
    model = M.build_model(M.ModelSpec("flownetc_mini", spec, channel_scale=0.25), seed=0)
    for p in model.params.values():
        p.data = np.abs(p.data) + 1e-3  # strictly positive weights and biases
    x = Tensor(np.ones((1, 3, size, size)), requires_grad=True)
    with Tape() as tape:
        out = M.encode_levels(model, x)[-1]
        c = out.shape[-1] // 2
        loss = out[0, 0, c, c]
    backward(tape, loss)
    rows, cols = np.nonzero(np.abs(x.grad[0]).sum(0))
    assert rows.min() > 0 and cols.min() > 0, "influence region touches the border"
    assert rows.max() - rows.min() == cols.max() - cols.min()
    return int(rows.max() - rows.min() + 1)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import summary_lines
    except ImportError:
        return
    lines = summary_lines()
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
