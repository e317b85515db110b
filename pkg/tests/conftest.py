import numpy as np
import pytest

from keyframing import diffcore as dc


def numeric_grad(f, arrays, eps=1e-6):
    """Central differences of scalar ``f()`` w.r.t. each array (modified in place)."""
    out = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + eps
            hi = f()
            a[i] = old - eps
            lo = f()
            a[i] = old
            g[i] = (hi - lo) / (2 * eps)
        out.append(g)
    return out


def rel_error(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-8))


def check_grad(build, params, eps=1e-6):
    """Compare analytic and central-difference gradients of ``build()`` (scalar Tensor)."""
    analytic = dc.grad(build(), params)
    numeric = numeric_grad(lambda: float(build().data), [p.data for p in params], eps)
    return max(rel_error(a, n) for a, n in zip(analytic, numeric))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


TINY = {"iterations": 2, "checkpoint_every": 1, "dataset.clips": 4, "algo.num_envs": 4, "algo.horizon": 8,
        "algo.num_epochs": 1, "algo.num_minibatches": 2, "algo.disc_batch_size": 16,
        "model.encoder.model_dim": 8, "model.encoder.feedforward_dim": 16, "model.width_multiplier": 0.05}


def tiny_config(**overrides):
    from keyframing import desk_config
    return desk_config(**{**TINY, **overrides})


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail=""):
    """Store a one-line verdict for the terminal summary, then fail the calling test if needed."""
    line = f"criterion {number:>2} {'PASS' if ok else 'FAIL'}  {title}" + (f"  [{detail}]" if detail else "")
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
