"""Numerical laboratory for eigenstate thermalization with noncommuting
SU(2) charges: symmetry-resolved exact diagonalization, Wigner-Eckart
reduced-element extraction, non-Abelian thermal states, algebraic
infinite-time averages, and scaling experiments."""

__version__ = "0.1.0"

from .spin_algebra import (
    CGKey,
    ExactScalar,
    HalfInteger,
    cg_asymptotic,
    cg_exact,
    cg_symmetry,
    cg_value,
    wigner_eckart_assemble,
)
from .model import SpinModelSpec, build_hamiltonian, build_spin_operators, verify_symmetry
from .spectral import SpectrumTable, decompose, degeneracy_report, entropy_surface
from .tensors import build_tensor, reduced_elements
from .ensembles import build_state, solve_nats, thermal_average, time_average

__all__ = [
    "CGKey",
    "ExactScalar",
    "HalfInteger",
    "cg_asymptotic",
    "cg_exact",
    "cg_symmetry",
    "cg_value",
    "wigner_eckart_assemble",
    "SpinModelSpec",
    "build_hamiltonian",
    "build_spin_operators",
    "verify_symmetry",
    "SpectrumTable",
    "decompose",
    "degeneracy_report",
    "entropy_surface",
    "build_tensor",
    "reduced_elements",
    "build_state",
    "solve_nats",
    "thermal_average",
    "time_average",
]
