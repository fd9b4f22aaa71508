import numpy as np
import pytest

from spatarch.dgp import model_config, simulate
from spatarch.panel import log_square


def star_panel(model="M1", side=5, T=5, rep=0, seed=7, **overrides):
    cfg = model_config(model, side, T, seed=seed, **overrides)
    panel, eff = simulate(cfg, rep)
    return log_square(panel), cfg, eff


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# criterion number -> (passed, [detail lines]); filled by test_acceptance.py
ACCEPTANCE: dict[int, tuple[bool, list[str]]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, lines = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k}: {'PASS' if ok else 'FAIL'}")
        for line in lines:
            terminalreporter.write_line(f"    {line}")
