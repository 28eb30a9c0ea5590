import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from msplit.linops import estimate_spectra  # noqa: E402
from msplit.stepsize import assemble_ledger  # noqa: E402
from msplit.synthetic import affine_problem, make_quadratic_instance  # noqa: E402
from msplit import tomo  # noqa: E402

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


class Quad:
    def __init__(self, inst, spec, est, ledger):
        self.inst, self.spec, self.est, self.ledger = inst, spec, est, ledger


def build_quad(dim=16, seed=0, mismatch_scale=0.0, rho=0.1, alpha=1.0, mismatch=None):
    inst = make_quadratic_instance(dim, seed, mismatch_scale, rho, alpha)
    spec = affine_problem(inst, mismatch)
    est = estimate_spectra(spec.L, spec.K, tol=1e-12)
    return Quad(inst, spec, est, assemble_ledger(spec, est))


@pytest.fixture(scope="session")
def quad_factory():
    return build_quad


class CTDesk:
    def __init__(self):
        self.geometry = tomo.Geometry()
        self.x_bar = tomo.make_phantom(self.geometry, "checker", seed=0)
        L = tomo.ray_driven_projector(self.geometry)
        self.sino = tomo.synthesize_data(L, self.x_bar, 200.0, seed=0, geometry=self.geometry)
        self.spec, self.ledger = tomo.build_ct_problem(self.geometry, tomo.CTPenalties(), self.sino)


_CT = {}


def ct_desk_instance() -> CTDesk:
    if "ct" not in _CT:
        _CT["ct"] = CTDesk()
    return _CT["ct"]


@pytest.fixture(scope="session")
def ct_desk():
    return ct_desk_instance()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
