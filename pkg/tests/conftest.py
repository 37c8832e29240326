import pytest
import torch

from fbanet.config import config_from_dict, deep_merge

TINY = {
    "iterations": 3,
    "eval_every": 3,
    "batch": {"labeled": 1, "unlabeled": 1, "patch": [16, 16]},
    "model": {"base_channels": 4, "depth": 2},
    "contra": {"proj_dim": 8},
    "loss": {"ramp_length": 10},
    "data": {"synth": {"num_cases": 8, "shape": [24, 24]}, "labeled_fraction": 0.34, "num_test": 2},
}


@pytest.fixture
def tiny_raw():
    """Mapping for a seconds-long run on a tiny synthetic problem."""
    return deep_merge(TINY, {})


@pytest.fixture
def tiny_cfg(tiny_raw):
    def make(**overrides):
        return config_from_dict(deep_merge(tiny_raw, overrides), env={})
    return make


@pytest.fixture(autouse=True)
def _restore_torch_state():
    threads = torch.get_num_threads()
    det = torch.are_deterministic_algorithms_enabled()
    yield
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(det)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(RESULTS):
        passed, detail = RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
