"""Splitting algorithms for monotone inclusions with a mismatched adjoint."""
from .linops import LinearMap, from_matrix, identity, make_mismatch_family, estimate_spectra, operator_norm
from .operators import CocoerciveBlock, LipschitzBlock, ProblemSpec, ResolventBlock
from .solvers import SolverConfig, mmfbhf_step, mmfdrf_step, run
from .stepsize import ConstantsLedger, assemble_ledger

__version__ = "0.1.0"

__all__ = [
    "LinearMap",
    "from_matrix",
    "identity",
    "make_mismatch_family",
    "estimate_spectra",
    "operator_norm",
    "ResolventBlock",
    "CocoerciveBlock",
    "LipschitzBlock",
    "ProblemSpec",
    "SolverConfig",
    "mmfbhf_step",
    "mmfdrf_step",
    "run",
    "ConstantsLedger",
    "assemble_ledger",
]
