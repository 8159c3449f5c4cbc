import numpy as np
import pytest

from dhvt.numerics import Tape, Tensor, backward

# Same floor as the model gradcheck: structurally-zero entries read as ~1e-10 noise.
FD_FLOOR = 1e-5


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(fn, *arrays, seed=0, step=1e-6, rtol=1e-5):
    """Check the tape gradients of ``sum(fn(*tensors) * R)`` against central differences.

    `R` is a fixed random cotangent, so every output element contributes with a
    distinct weight. Returns the max relative error over all input entries.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = fn(*[Tensor(a) for a in arrays]).data
    cot = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar(vals):
        return float((fn(*[Tensor(v) for v in vals]).data * cot).sum())

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
        loss = (out * Tensor(cot)).sum()
    backward(loss, tape)

    worst = 0.0
    for i, a in enumerate(arrays):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            vals = [x.copy() for x in arrays]
            vals[i][idx] += step
            up = scalar(vals)
            vals[i][idx] -= 2 * step
            down = scalar(vals)
            num = (up - down) / (2 * step)
            an = float(analytic[idx])
            worst = max(worst, abs(an - num) / max(abs(an), abs(num), FD_FLOOR))
    assert worst <= rtol, f"max relative error {worst:.3e} > {rtol:.1e}"
    return worst


def perturb(ps, rng, scale=0.3):
    """Move every trainable tensor off its initial value so no branch is trivially zero or identity."""
    for _, t in ps.trainable():
        t.data = t.data + scale * rng.standard_normal(t.shape)
    return ps


ACCEPTANCE_LINES = []


def report(number, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
