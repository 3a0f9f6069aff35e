import numpy as np
import pytest

from dimamba.model import ModelConfig, build_model
from dimamba.numerics import Rng, finite_diff_grad, rel_error


def micro_config(**kw) -> ModelConfig:
    base = dict(size_tag="custom", layers=2, hidden_d=8, patch=2, in_channels=1, num_classes=3,
                input_size=4, ssm_state_n=4, freq_dim=8)
    base.update(kw)
    return ModelConfig(**base)


def perturbed_model(cfg: ModelConfig, seed: int, scale: float = 0.1):
    """Built model nudged off its zero init so every parameter carries gradient."""
    m = build_model(cfg, Rng(seed))
    g = Rng(seed + 1000).gen
    for k in m.params:
        m.params[k] = m.params[k] + scale * g.standard_normal(m.params[k].shape)
    return m


def fd_wrt(f, arr: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Finite-difference gradient of ``f()`` with respect to ``arr`` (mutated in place)."""
    def fk(v):
        old = arr.copy()
        arr[...] = v
        try:
            return f()
        finally:
            arr[...] = old
    return finite_diff_grad(fk, arr.copy(), eps)


def assert_grads_match(f, arrays: dict, analytic: dict, tol: float = 1e-4, eps: float = 1e-5):
    for k, arr in arrays.items():
        err = rel_error(analytic[k], fd_wrt(f, arr, eps))
        assert err < tol, f"{k}: rel error {err:.3e}"


@pytest.fixture
def rng():
    return Rng(1234)


# -- acceptance report -------------------------------------------------------

ACCEPTANCE_RESULTS = []  # (number, title, passed, detail, seconds)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for num, title, ok, detail, secs in sorted(ACCEPTANCE_RESULTS):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num:>2} {title}: {detail} [{secs:.1f}s]")
