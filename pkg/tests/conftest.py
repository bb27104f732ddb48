import numpy as np
import pytest

from mdistill.netgraph import Architecture, NetworkSpec, init_params
from mdistill.numcore import RngStream


def tiny_spec(arch=Architecture.FSMN, input_dim=5, hidden=6, out=4):
    return NetworkSpec(arch, input_dim, hidden, out, fsmn_blocks=2, lookback_order=2,
                       lookahead_order=1, stride_back=2, stride_ahead=1,
                       lstm_layers=2, lstm_proj_dim=3)


def perturbed_params(spec, seed, scale=0.5):
    """Random params with non-zero memory coefficients and biases."""
    rng = RngStream(seed, 99)
    params = init_params(spec, rng)
    return {k: v + rng.normal(v.shape, sigma=scale) for k, v in params.items()}


@pytest.fixture
def np_rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list = []


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion; shown in the terminal summary."""

    def record(label, ok, detail=""):
        line = f"{'PASS' if ok else 'FAIL'}  {label}" + (f"  [{detail}]" if detail else "")
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
