import numpy as np
import pytest

from dae3d.volume import synth_corpus


def numeric_grad(f, x, h=1e-3):
    """Central differences of scalar ``f(array)`` at float64 ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat, gflat = x.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        up = f(x)
        flat[i] = orig - h
        down = f(x)
        flat[i] = orig
        gflat[i] = (up - down) / (2 * h)
    return g


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    """Three modalities, 6 phantoms each, 16^3 voxels."""
    root = tmp_path_factory.mktemp("corpus")
    return synth_corpus(root, 6, ["SYNTH_A", "SYNTH_B", "SYNTH_C"], dims=(16, 16, 16),
                        val_fraction=0.34)


ACCEPTANCE_LINES = []


def record(number, ok, detail):
    """Log one acceptance verdict; printed in the terminal summary."""
    line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
