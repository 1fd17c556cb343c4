"""Spin-chain models with exact global SU(2) symmetry.

Hamiltonians are Heisenberg chains of spin-1/2 sites with site-dependent
nearest-neighbor exchange plus next-nearest-neighbor exchange, both SU(2)
scalars, so the total-spin components are conserved by construction.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ResourceError, ValidationError

__all__ = [
    "SpinModelSpec",
    "SpinOperators",
    "SymmetryReport",
    "DEFAULT_MAX_SITES",
    "build_hamiltonian",
    "build_spin_operators",
    "site_operator",
    "exchange_term",
    "verify_symmetry",
    "max_abs",
]

DEFAULT_MAX_SITES = 14

# single-site spin-1/2 matrices (hbar = 1)
_SX = np.array([[0.0, 0.5], [0.5, 0.0]])
_SY = np.array([[0.0, -0.5j], [0.5j, 0.0]])
_SZ = np.array([[0.5, 0.0], [0.0, -0.5]])
_SP = np.array([[0.0, 1.0], [0.0, 0.0]])
_SM = np.array([[0.0, 0.0], [1.0, 0.0]])


@dataclass(frozen=True)
class SpinModelSpec:
    """Couplings of one chain: H = sum_j J1_j s_j.s_{j+1} + sum_j J2_j s_j.s_{j+2}."""

    n_sites: int
    nn_couplings: tuple[float, ...]
    nnn_couplings: tuple[float, ...] = ()
    boundary: str = "open"
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_sites < 2:
            raise ValidationError(f"n_sites must be >= 2, got {self.n_sites}")
        if self.boundary not in ("open", "periodic"):
            raise ValidationError(f"boundary must be open|periodic, got {self.boundary}")
        n = self.n_sites
        want_nn = n if self.boundary == "periodic" else n - 1
        want_nnn = n if self.boundary == "periodic" else max(n - 2, 0)
        if len(self.nn_couplings) != want_nn:
            raise ValidationError(
                f"expected {want_nn} nearest-neighbor couplings, got {len(self.nn_couplings)}"
            )
        if self.nnn_couplings and len(self.nnn_couplings) != want_nnn:
            raise ValidationError(
                f"expected {want_nnn} next-nearest couplings, got {len(self.nnn_couplings)}"
            )

    @classmethod
    def default(cls, n_sites: int, seed: int = 0, j2: float = 0.4) -> "SpinModelSpec":
        """Nonintegrable preset: J1 ~ U[0.8, 1.2] per bond, uniform J2."""
        rng = np.random.default_rng([seed, n_sites])
        j1 = tuple(float(x) for x in rng.uniform(0.8, 1.2, n_sites - 1))
        return cls(n_sites, j1, tuple([j2] * max(n_sites - 2, 0)), "open", seed)

    @classmethod
    def ferromagnetic(cls, n_sites: int, seed: int = 0) -> "SpinModelSpec":
        """Preset with binding couplings for the bound-cluster slope test."""
        rng = np.random.default_rng([seed + 1, n_sites])
        j1 = tuple(float(x) for x in rng.uniform(-1.1, -0.9, n_sites - 1))
        return cls(n_sites, j1, tuple([-0.3] * max(n_sites - 2, 0)), "open", seed)

    @property
    def nonintegrable_hint(self) -> bool:
        """Heuristic flag: couplings break the integrable uniform-chain point."""
        j1 = self.nn_couplings
        return any(j != 0.0 for j in self.nnn_couplings) or len(set(j1)) > 1

    def canonical_dict(self) -> dict:
        return {
            "n_sites": self.n_sites,
            "nn_couplings": [repr(float(j)) for j in self.nn_couplings],
            "nnn_couplings": [repr(float(j)) for j in self.nnn_couplings],
            "boundary": self.boundary,
            "rng_seed": self.rng_seed,
        }

    def hash_hex(self) -> str:
        payload = json.dumps(self.canonical_dict(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()


def _check_size(n_sites: int, max_sites: int) -> None:
    if n_sites > max_sites:
        raise ResourceError(
            f"n_sites={n_sites} exceeds the configured maximum of {max_sites} "
            f"(full eigenbasis would need ~{(2 ** n_sites) ** 2 * 8 / 2 ** 30:.1f} GiB)"
        )


def site_operator(n_sites: int, j: int, local: np.ndarray) -> sp.csr_matrix:
    """Embed a single-site operator at site j into the n-site chain."""
    if not 0 <= j < n_sites:
        raise ValidationError(f"site {j} outside chain of {n_sites} sites")
    op = sp.identity(1, format="csr", dtype=local.dtype)
    for site in range(n_sites):
        factor = sp.csr_matrix(local) if site == j else sp.identity(2, dtype=local.dtype)
        op = sp.kron(op, factor, format="csr")
    return op


def exchange_term(n_sites: int, i: int, j: int) -> sp.csr_matrix:
    """The SU(2) scalar s_i . s_j as a sparse matrix on the full chain."""
    if i == j:
        raise ValidationError("exchange term needs two distinct sites")
    term = (
        0.5 * site_operator(n_sites, i, _SP) @ site_operator(n_sites, j, _SM)
        + 0.5 * site_operator(n_sites, i, _SM) @ site_operator(n_sites, j, _SP)
        + site_operator(n_sites, i, _SZ) @ site_operator(n_sites, j, _SZ)
    )
    return sp.csr_matrix(term.real)


def build_hamiltonian(spec: SpinModelSpec, max_sites: int = DEFAULT_MAX_SITES) -> sp.csr_matrix:
    """Assemble H for the given couplings; real, Hermitian, SU(2)-invariant."""
    _check_size(spec.n_sites, max_sites)
    n = spec.n_sites
    dim = 2 ** n
    ham = sp.csr_matrix((dim, dim))
    for b, j1 in enumerate(spec.nn_couplings):
        if j1 != 0.0:
            ham = ham + j1 * exchange_term(n, b, (b + 1) % n)
    for b, j2 in enumerate(spec.nnn_couplings):
        if j2 != 0.0:
            ham = ham + j2 * exchange_term(n, b, (b + 2) % n)
    return sp.csr_matrix(ham)


@dataclass(frozen=True)
class SpinOperators:
    """Global spin operators S_a = sum_j s_{j,a} and derived combinations."""

    n_sites: int
    sx: sp.csr_matrix
    sy: sp.csr_matrix
    sz: sp.csr_matrix
    sp: sp.csr_matrix = field(repr=False, default=None)
    sm: sp.csr_matrix = field(repr=False, default=None)
    s2: sp.csr_matrix = field(repr=False, default=None)


def build_spin_operators(n_sites: int, max_sites: int = DEFAULT_MAX_SITES) -> SpinOperators:
    _check_size(n_sites, max_sites)
    dim = 2 ** n_sites
    sx = sp.csr_matrix((dim, dim))
    sy = sp.csr_matrix((dim, dim), dtype=complex)
    sz = sp.csr_matrix((dim, dim))
    for j in range(n_sites):
        sx = sx + site_operator(n_sites, j, _SX)
        sy = sy + site_operator(n_sites, j, _SY)
        sz = sz + site_operator(n_sites, j, _SZ)
    splus = sp.csr_matrix((sx + 1j * sy).real)
    sminus = sp.csr_matrix((sx - 1j * sy).real)
    s2 = sp.csr_matrix((sx @ sx + (sy @ sy).real + sz @ sz).real)
    return SpinOperators(n_sites, sp.csr_matrix(sx), sp.csr_matrix(sy), sp.csr_matrix(sz), splus, sminus, s2)


def max_abs(a) -> float:
    """Largest entry magnitude of a sparse or dense matrix."""
    if sp.issparse(a):
        return 0.0 if a.nnz == 0 else float(np.max(np.abs(a.data)))
    return float(np.max(np.abs(a))) if a.size else 0.0


def _comm(a, b):
    return a @ b - b @ a


@dataclass(frozen=True)
class SymmetryReport:
    commutator_norms: dict[str, float]
    algebra_residual: float
    noncommutation_witness: float
    passed: bool

    def __str__(self):
        pieces = [f"[H,S_{a}]={v:.3e}" for a, v in self.commutator_norms.items()]
        return (
            f"SymmetryReport({', '.join(pieces)}, "
            f"algebra={self.algebra_residual:.3e}, "
            f"witness={self.noncommutation_witness:.3e}, passed={self.passed})"
        )


def verify_symmetry(
    ham: sp.spmatrix,
    ops: SpinOperators,
    tol: float = 1e-12,
) -> SymmetryReport:
    """Check [H, S_a] = 0 and the noncommuting-charge witness [S_x, S_y] != 0."""
    if ham.shape != ops.sz.shape:
        raise ValidationError(
            f"dimension mismatch: H is {ham.shape}, spin operators are {ops.sz.shape}"
        )
    norms = {
        "x": max_abs(_comm(ham, ops.sx)),
        "y": max_abs(_comm(ham.astype(complex), ops.sy)),
        "z": max_abs(_comm(ham, ops.sz)),
    }
    algebra = max_abs(_comm(ops.sx, ops.sy) - 1j * ops.sz.astype(complex))
    witness = max_abs(_comm(ops.sx, ops.sy))
    passed = all(v <= tol for v in norms.values()) and witness > 0.0
    return SymmetryReport(norms, algebra, witness, passed)
