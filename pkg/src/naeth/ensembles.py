"""Thermal ensembles, initial states, and infinite-time averages.

The non-Abelian thermal state is exp(-beta(H - mu S_z))/Z after aligning
the z-axis with the magnetization; (beta, mu) are fixed by the target
energy and magnetization. Infinite-time averages are evaluated
algebraically (dephasing of unequal energies), never by numerical time
integration, and cross terms between accidentally degenerate multiplets
are retained so the identity with the explicit long-time limit survives
finite-size energy collisions.

Internally the constraint solver iterates in (beta, lambda = beta*mu):
in those variables the Jacobian is the negative covariance matrix of
(E_alpha, m) under the current weights and stays invertible at beta = 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    InfeasibleTargetError,
    ConsistencyError,
    SolverError,
    ValidationError,
)
from .model import SpinModelSpec, SpinOperators
from .spectral import SpectrumTable, degeneracy_report
from .spin_algebra import _cg_float_tw
from .tensors import ReducedElementTable, SphericalTensorFamily

__all__ = [
    "NatsParams",
    "StateCoefficients",
    "AmcReport",
    "MomentReport",
    "solve_nats",
    "nats_weights",
    "thermal_average",
    "time_average",
    "dephased_average",
    "time_average_bound",
    "build_state",
    "amc_check",
    "amc_scaling",
    "moment_check",
    "moment_scaling",
]


@dataclass(frozen=True)
class NatsParams:
    """Solved thermal-state parameters for targets (E, M)."""

    beta: float
    mu: float
    target_e: float
    target_m: float
    residual_e: float
    residual_m: float
    iterations: int
    beta_mu: float  # beta * mu, the solver's native second variable


def _flat_arrays(table: SpectrumTable):
    es, tms, idx = table.flat_levels()
    return es, tms / 2.0, idx


def _weight_distribution(es, ms, beta, lam):
    x = -beta * es + lam * ms
    x = x - x.max()
    w = np.exp(x)
    return w / w.sum()


def _moments(p, es, ms):
    e_mean = float(p @ es)
    m_mean = float(p @ ms)
    de = es - e_mean
    dm = ms - m_mean
    var_e = float(p @ (de * de))
    var_m = float(p @ (dm * dm))
    cov = float(p @ (de * dm))
    return e_mean, m_mean, var_e, var_m, cov


def _feasible(es, ms, target_e, target_m) -> bool:
    """Convex-hull membership of the target in the (E, m) support."""
    points = np.unique(np.column_stack([es, ms]), axis=0)
    if len(points) < 3:
        return bool(np.min(es) <= target_e <= np.max(es) and
                    np.min(ms) <= target_m <= np.max(ms))
    try:
        from scipy.spatial import Delaunay, QhullError

        hull = Delaunay(points)
    except QhullError:
        return bool(np.min(es) <= target_e <= np.max(es) and
                    np.min(ms) <= target_m <= np.max(ms))
    return bool(hull.find_simplex(np.array([[target_e, target_m]]))[0] >= 0)


def _solve_beta_1d(es, ms, target_e, tol, max_iter):
    """Monotone solve of <E>(beta) = target at lambda = 0."""
    from scipy.optimize import brentq

    def f(beta):
        p = _weight_distribution(es, ms, beta, 0.0)
        return float(p @ es) - target_e

    scale = max(float(np.max(np.abs(es - es.mean()))), 1e-12)
    lo, hi = -1.0 / scale, 1.0 / scale
    for _ in range(200):
        if f(lo) > 0 > f(hi) or f(lo) >= 0 >= f(hi):
            break
        lo *= 2.0
        hi *= 2.0
        if abs(lo) > 1e8:
            raise SolverError(
                f"could not bracket beta for target E={target_e}; "
                f"residual at beta={hi:.3g} is {f(hi):.3e}"
            )
    beta = brentq(f, lo, hi, xtol=1e-15, rtol=8.9e-16, maxiter=max_iter)
    return float(beta)


def solve_nats(
    table: SpectrumTable,
    target_e: float,
    target_m: float,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> NatsParams:
    """Find (beta, mu) reproducing the target energy and magnetization.

    target_m = 0 sets mu = 0 analytically (the m-sum is then symmetric)
    and reduces to a one-dimensional monotone solve for beta.
    """
    es, ms, _ = _flat_arrays(table)
    e_lo, e_hi = float(es.min()), float(es.max())
    m_hi = float(ms.max())
    if not e_lo <= target_e <= e_hi:
        raise InfeasibleTargetError(
            f"target energy {target_e} outside spectrum [{e_lo:.6g}, {e_hi:.6g}]",
            e_bounds=(e_lo, e_hi), m_bound=m_hi,
        )
    if not 0 <= target_m < table.n_sites / 2:
        raise ValidationError(
            f"target magnetization must lie in [0, N/2), got {target_m}"
        )
    if not _feasible(es, ms, target_e, target_m):
        raise InfeasibleTargetError(
            f"target (E={target_e}, M={target_m}) outside the attainable "
            f"(E, M) region; E in [{e_lo:.6g}, {e_hi:.6g}], |M| <= {m_hi:.6g}",
            e_bounds=(e_lo, e_hi), m_bound=m_hi,
        )

    if target_m == 0:
        beta = _solve_beta_1d(es, ms, target_e, tol, max_iter)
        p = _weight_distribution(es, ms, beta, 0.0)
        res_e = float(p @ es) - target_e
        res_m = float(p @ ms)
        params = NatsParams(beta, 0.0, target_e, target_m, res_e, res_m, 1, 0.0)
        _check_residuals(params, tol)
        return params

    beta = _solve_beta_1d(es, ms, target_e, tol, max_iter)
    lam = 0.0
    last = (math.inf, math.inf)
    for iteration in range(1, max_iter + 1):
        p = _weight_distribution(es, ms, beta, lam)
        e_mean, m_mean, var_e, var_m, cov = _moments(p, es, ms)
        res = np.array([e_mean - target_e, m_mean - target_m])
        last = (float(res[0]), float(res[1]))
        if abs(res[0]) <= tol * max(1.0, abs(target_e)) and abs(
            res[1]
        ) <= tol * max(1.0, abs(target_m)):
            mu = lam / beta if beta != 0.0 else math.inf * np.sign(lam)
            return NatsParams(
                beta, float(mu), target_e, target_m, last[0], last[1], iteration, lam
            )
        jac = np.array([[-var_e, cov], [-cov, var_m]])
        try:
            step = np.linalg.solve(jac, -res)
        except np.linalg.LinAlgError as exc:
            raise SolverError(
                f"singular covariance Jacobian at beta={beta:.6g}, lambda={lam:.6g}"
            ) from exc
        # backtracking damping on the residual norm
        norm0 = float(np.linalg.norm(res))
        t = 1.0
        while t > 1e-8:
            cand = (beta + t * step[0], lam + t * step[1])
            p_new = _weight_distribution(es, ms, cand[0], cand[1])
            r_new = np.array([
                float(p_new @ es) - target_e,
                float(p_new @ ms) - target_m,
            ])
            if np.linalg.norm(r_new) < norm0:
                beta, lam = cand
                break
            t /= 2.0
        else:
            raise SolverError(
                f"line search stalled; residuals (dE, dM) = {last}"
            )
    raise SolverError(
        f"no convergence after {max_iter} iterations; residuals (dE, dM) = {last}"
    )


def _check_residuals(params: NatsParams, tol: float) -> None:
    if abs(params.residual_e) > tol * max(1.0, abs(params.target_e)) or abs(
        params.residual_m
    ) > tol * max(1.0, abs(params.target_m)):
        raise SolverError(
            f"solver residuals too large: dE={params.residual_e:.3e}, "
            f"dM={params.residual_m:.3e}"
        )


def nats_weights(table: SpectrumTable, params: NatsParams):
    """Normalized weights over the flat (alpha, m) levels."""
    es, ms, idx = _flat_arrays(table)
    p = _weight_distribution(es, ms, params.beta, params.beta_mu)
    return p, es, ms, idx


def _diagonal_reduced(reduced) -> dict[int, float]:
    if isinstance(reduced, ReducedElementTable):
        return reduced.diagonal()
    if isinstance(reduced, dict):
        return reduced
    raise ValidationError("reduced elements must be a table or a dict")


def thermal_average(
    family: SphericalTensorFamily,
    q: int,
    reduced,
    table: SpectrumTable,
    params: NatsParams,
    *,
    cross_check: bool = False,
) -> float:
    """Thermal expectation of T^(k)_q in the solved ensemble.

    The q != 0 result is exactly zero (the coupling coefficient carries a
    Kronecker delta); the returned 0.0 is bit-exact, not a rounded sum.
    cross_check=True also evaluates the trace directly from the matrices
    and asserts agreement to 1e-10.
    """
    k = family.rank
    if abs(q) > k:
        raise ValidationError(f"|q| <= k required, got q={q}")
    if q != 0:
        if cross_check:
            direct = _direct_trace(family, q, table, params)
            if abs(direct) > 1e-10:
                raise ConsistencyError(
                    f"direct trace of q={q} component is {direct:.3e}, expected 0"
                )
        return 0.0
    diag = _diagonal_reduced(reduced)
    p, _, _, idx = nats_weights(table, params)
    tk = 2 * k
    total = 0.0
    pos = 0
    for i, mult in enumerate(table.multiplets):
        deg = mult.degeneracy
        if mult.label not in diag:
            raise ValidationError(
                f"missing diagonal reduced element for multiplet {mult.label}"
            )
        value = diag[mult.label]
        ts = mult.twice_spin
        for tm in mult.twice_m_values():
            total += p[pos] * _cg_float_tw(ts, tm, ts, tm, tk, 0) * value
            pos += 1
    if cross_check:
        direct = _direct_trace(family, 0, table, params)
        if abs(total - direct) > 1e-10 * max(1.0, abs(total), abs(direct)):
            raise ConsistencyError(
                f"ensemble sum {total!r} disagrees with direct trace {direct!r}"
            )
    return float(total)


def _direct_trace(family, q, table, params) -> float:
    p, _, _, _ = nats_weights(table, params)
    comp = family.component(q).tocsr()
    total = 0.0
    pos = 0
    for mult in table.multiplets:
        for tm in mult.twice_m_values():
            v = mult.vector(tm)
            total += p[pos] * float(v @ (comp @ v))
            pos += 1
    return total


@dataclass(frozen=True)
class StateCoefficients:
    """Expansion C_{alpha,m} of a normalized state over the eigenbasis."""

    n_sites: int
    model_hash: str
    coeffs: dict[tuple[int, int], complex] = field(repr=False)

    def __post_init__(self):
        total = sum(abs(c) ** 2 for c in self.coeffs.values())
        if abs(total - 1.0) > 1e-12:
            raise ValidationError(f"state norm^2 = {total!r}, expected 1")

    def matches(self, table: SpectrumTable) -> bool:
        return self.n_sites == table.n_sites and (
            not self.model_hash or not table.model_hash
            or self.model_hash == table.model_hash
        )

    def to_vector(self, table: SpectrumTable) -> np.ndarray:
        if not self.matches(table):
            raise ValidationError("state was built on a different spectrum table")
        any_imag = any(abs(c.imag) > 0 for c in self.coeffs.values())
        psi = np.zeros(table.dimension, dtype=complex if any_imag else float)
        for (label, tm), c in self.coeffs.items():
            psi += (c if any_imag else c.real) * table.multiplets[label].vector(tm)
        return psi

    def probabilities(self, table: SpectrumTable) -> np.ndarray:
        """|C|^2 aligned with the table's flat (alpha, m) level order."""
        if not self.matches(table):
            raise ValidationError("state was built on a different spectrum table")
        out = np.zeros(table.total_states())
        pos = 0
        for mult in table.multiplets:
            for tm in mult.twice_m_values():
                c = self.coeffs.get((mult.label, tm))
                if c is not None:
                    out[pos] = abs(c) ** 2
                pos += 1
        return out


def _require_match(state: StateCoefficients, table: SpectrumTable) -> None:
    if not state.matches(table):
        raise ValidationError("state was built on a different spectrum table")


def _energy_classes(table: SpectrumTable, tol: float):
    report = degeneracy_report(table, tol)
    grouped = set()
    for group in report.energy_groups:
        grouped.update(group)
    classes = [list(g) for g in report.energy_groups]
    classes.extend([m.label] for m in table.multiplets if m.label not in grouped)
    return classes


def time_average(
    family: SphericalTensorFamily,
    q: int,
    state: StateCoefficients,
    table: SpectrumTable,
    reduced,
    *,
    degeneracy_tol: float | None = None,
    cross_check: bool = False,
) -> float:
    """Infinite-time average of <T^(k)_q> in the given initial state.

    Within-multiplet terms use the Wigner-Eckart factorization with the
    diagonal reduced elements; accidental equal-energy cross terms are
    added from direct matrix elements. cross_check=True compares against
    the explicit dephasing of the time-dependent sum.

    Returns a float for q = 0 or real-coefficient states; for q != 0 on
    complex states the average of the non-Hermitian component is a
    genuine complex number and is returned as such.
    """
    _require_match(state, table)
    k = family.rank
    if abs(q) > k:
        raise ValidationError(f"|q| <= k required, got q={q}")
    tq = 2 * q
    tk = 2 * k
    diag = _diagonal_reduced(reduced)
    if degeneracy_tol is None:
        scale = max(abs(m.energy) for m in table.multiplets)
        degeneracy_tol = 1e-10 * max(scale, 1.0)

    total = 0.0 + 0.0j
    for (label, tm), c in state.coeffs.items():
        partner = state.coeffs.get((label, tm + tq))
        if partner is None:
            continue
        mult = table.multiplets[label]
        if abs(tm + tq) > mult.twice_spin:
            continue
        if label not in diag:
            raise ValidationError(
                f"missing diagonal reduced element for multiplet {label}"
            )
        cg = _cg_float_tw(mult.twice_spin, tm + tq, mult.twice_spin, tm, tk, tq)
        total += np.conj(partner) * c * cg * diag[label]

    # cross terms inside accidental energy collisions
    support = {label for (label, _tm) in state.coeffs}
    comp = None
    for group in _energy_classes(table, degeneracy_tol):
        in_support = [g for g in group if g in support]
        if len(in_support) < 2:
            continue
        if comp is None:
            comp = family.component(q).tocsr()
        for a in in_support:
            for b in in_support:
                if a == b:
                    continue
                ma, mb = table.multiplets[a], table.multiplets[b]
                for tm in mb.twice_m_values():
                    cb = state.coeffs.get((b, tm))
                    ca = state.coeffs.get((a, tm + tq))
                    if cb is None or ca is None or abs(tm + tq) > ma.twice_spin:
                        continue
                    elem = float(ma.vector(tm + tq) @ (comp @ mb.vector(tm)))
                    total += np.conj(ca) * cb * elem

    result = float(total.real) if total.imag == 0.0 else complex(total)
    if cross_check:
        oracle = dephased_average(family, q, state, table, degeneracy_tol)
        if abs(result - oracle) > 1e-10 * max(1.0, abs(result), abs(oracle)):
            raise ConsistencyError(
                f"time average {result!r} disagrees with dephased oracle {oracle!r}"
            )
    return result


def dephased_average(
    family: SphericalTensorFamily,
    q: int,
    state: StateCoefficients,
    table: SpectrumTable,
    degeneracy_tol: float,
) -> float:
    """Long-time limit of the time-dependent sum by explicit dephasing.

    Projects the state onto each equal-energy class and sums the class
    expectation values; independent of the Wigner-Eckart factorization.
    """
    _require_match(state, table)
    comp = family.component(q).tocsr()
    by_label: dict[int, list[tuple[int, complex]]] = {}
    for (label, tm), c in state.coeffs.items():
        by_label.setdefault(label, []).append((tm, c))
    total = 0.0 + 0.0j
    for group in _energy_classes(table, degeneracy_tol):
        members = [g for g in group if g in by_label]
        if not members:
            continue
        u = np.zeros(table.dimension, dtype=complex)
        for label in members:
            mult = table.multiplets[label]
            for tm, c in by_label[label]:
                u += c * mult.vector(tm)
        total += np.vdot(u, comp @ u)
    return float(total.real) if total.imag == 0.0 else complex(total)


def time_average_bound(
    family: SphericalTensorFamily,
    q: int,
    state: StateCoefficients,
    table: SpectrumTable,
    reduced,
) -> float:
    """Cauchy-Schwarz upper bound on |time average| for q != 0.

    max of the two |C|^2-weighted sums of |CG * T| obtained by shifting
    the magnetic index through the coefficient product.
    """
    if q == 0:
        raise ValidationError("bound applies to q != 0 components")
    _require_match(state, table)
    diag = _diagonal_reduced(reduced)
    tq, tk = 2 * q, 2 * family.rank
    sums = [0.0, 0.0]
    for (label, tm), c in state.coeffs.items():
        mult = table.multiplets[label]
        ts = mult.twice_spin
        value = abs(diag.get(label, 0.0)) * abs(c) ** 2
        # shifted sum: CG with m as the upper index
        if abs(tm - tq) <= ts:
            sums[0] += value * abs(_cg_float_tw(ts, tm, ts, tm - tq, tk, tq))
        if abs(tm + tq) <= ts:
            sums[1] += value * abs(_cg_float_tw(ts, tm + tq, ts, tm, tk, tq))
    return max(sums)


def _pick_multiplet(table, spin_filter, s_target, e_target):
    candidates = [m for m in table.multiplets if spin_filter(m.twice_spin)]
    if not candidates:
        raise ValidationError("no multiplet matches the requested spin family")
    best_spin = min(abs(m.twice_spin / 2.0 - s_target) for m in candidates)
    near = [m for m in candidates if abs(m.twice_spin / 2.0 - s_target) == best_spin]
    return min(near, key=lambda m: abs(m.energy - e_target))


def _mid_energy(table) -> float:
    es = table.energies()
    return 0.5 * (float(es.min()) + float(es.max()))


def build_state(kind: str, table: SpectrumTable, **params) -> StateCoefficients:
    """Construct initial-state coefficient maps.

    kinds: 'eigenstate' (one |alpha, m>), 'anomalous_a' (the two-component
    rotationally noninvariant M=0 state), 'anomalous_b' (the
    four-component M=0 state), 'low_spin' (equal weight on minimal-spin
    multiplets near a target energy), 'product' (tunable two-sublattice
    product state, optionally scrambled by an SU(2)-scalar brickwork).
    """
    n = table.n_sites
    if kind == "eigenstate":
        label = params["label"]
        tm = params["twice_m"]
        mult = table.multiplets[label]
        if abs(tm) > mult.twice_spin:
            raise ValidationError("requested m outside the multiplet")
        return StateCoefficients(n, table.model_hash, {(label, tm): 1.0 + 0.0j})

    if kind == "anomalous_a":
        c = params.get("c", 1.0)
        e_target = params.get("energy", _mid_energy(table))
        # needs s even so m = -s/2 is a valid magnetic number
        mult = _pick_multiplet(
            table, lambda ts: ts > 0 and ts % 4 == 0, c * math.sqrt(n), e_target
        )
        ts = mult.twice_spin
        coeffs = {
            (mult.label, ts): complex(math.sqrt(1.0 / 3.0)),
            (mult.label, -ts // 2): complex(math.sqrt(2.0 / 3.0)),
        }
        return StateCoefficients(n, table.model_hash, coeffs)

    if kind == "anomalous_b":
        c = params.get("c", 1.0)
        e_target = params.get("energy", _mid_energy(table))
        mult = _pick_multiplet(
            table, lambda ts: ts >= 4 and ts % 2 == 0, c * math.sqrt(n), e_target
        )
        s = mult.twice_spin // 2
        mbar = params.get("mbar", max(1, s // 2))
        if not 1 <= mbar <= s - 1:
            raise ValidationError(f"mbar must lie in [1, s-1]; got {mbar}, s={s}")
        tmb = 2 * mbar
        half = 0.5 + 0.0j
        coeffs = {
            (mult.label, tmb): half,
            (mult.label, tmb + 2): half,
            (mult.label, -tmb): half,
            (mult.label, -tmb - 2): -half,
        }
        return StateCoefficients(n, table.model_hash, coeffs)

    if kind == "low_spin":
        count = params.get("n_components", 3)
        e_target = params.get("energy", _mid_energy(table))
        ts_min = int(min(m.twice_spin for m in table.multiplets))
        if ts_min % 2 != 0:
            raise ValidationError(
                "low_spin states need integer minimal spin (even site count)"
            )
        pool = sorted(
            (m for m in table.multiplets if m.twice_spin == ts_min),
            key=lambda m: abs(m.energy - e_target),
        )[:count]
        if not pool:
            raise ValidationError("no minimal-spin multiplets available")
        amp = complex(1.0 / math.sqrt(len(pool)))
        return StateCoefficients(
            n, table.model_hash, {(m.label, 0): amp for m in pool}
        )

    if kind == "product":
        return _product_state(table, **params)

    raise ValidationError(f"unknown state kind {kind!r}")


def _su2_scalar_gate(theta: float) -> np.ndarray:
    """exp(-i theta s_i.s_j) on two sites; commutes with all global S_a."""
    sdots = np.array(
        [
            [0.25, 0, 0, 0],
            [0, -0.25, 0.5, 0],
            [0, 0.5, -0.25, 0],
            [0, 0, 0, 0.25],
        ]
    )
    evals, evecs = np.linalg.eigh(sdots)
    return (evecs * np.exp(-1j * theta * evals)) @ evecs.T


def _apply_two_site(psi: np.ndarray, gate: np.ndarray, i: int, n: int) -> np.ndarray:
    left = 2 ** i
    right = 2 ** (n - i - 2)
    tensor = psi.reshape(left, 4, right)
    return np.einsum("ab,xbz->xaz", gate, tensor).reshape(-1)


def _product_angles(n: int, pair_angles) -> np.ndarray:
    """Polar angles (t_1, -t_1, t_2, -t_2, ...) with exact sin cancellation.

    Signs are paired so sum_j sin(theta_j) = 0 identically, keeping the
    frame conditions <S_x> = <S_y> = 0 of the aligned z-axis; for odd
    chain lengths the last site points along +z."""
    out = np.zeros(n)
    for j, t in enumerate(pair_angles):
        out[2 * j] = t
        out[2 * j + 1] = -t
    return out


def _product_classical_em(spec: SpinModelSpec, thetas) -> tuple[float, float]:
    """Exact (E, M) of the product state with the given polar angles."""
    n = spec.n_sites
    nx = np.sin(thetas)
    nz = np.cos(thetas)
    energy = 0.0
    for b, j1 in enumerate(spec.nn_couplings):
        j = (b + 1) % n
        energy += j1 * 0.25 * (nx[b] * nx[j] + nz[b] * nz[j])
    for b, j2 in enumerate(spec.nnn_couplings):
        j = (b + 2) % n
        energy += j2 * 0.25 * (nx[b] * nx[j] + nz[b] * nz[j])
    return energy, 0.5 * float(np.sum(nz))


def _product_state(
    table: SpectrumTable,
    *,
    spec: SpinModelSpec,
    target_m: float,
    target_e: float | None = None,
    layers: int = 0,
    twist_scale: float = 0.3,
    seed: int = 0,
    coeff_floor: float = 1e-16,
) -> StateCoefficients:
    """Sign-paired product state hitting (target_e, target_m).

    One polar angle per site pair keeps the transverse magnetization
    identically zero while leaving enough freedom to solve the exact
    classical (E, M) constraints. target_e=None selects the homogeneous
    family (one common pair angle fixed by the magnetization alone),
    whose moments are smooth in N. An optional shallow brickwork of
    SU(2)-scalar two-site rotations adds short-range correlations without
    touching M, the spin variances, or the frame conditions (the gates
    commute with every global S_a).
    """
    from scipy.optimize import least_squares

    n = table.n_sites
    if spec.n_sites != n:
        raise ValidationError("model spec and table disagree on the chain length")
    n_pairs = n // 2
    if target_e is None:
        cos_t = target_m / n_pairs
        if not -1.0 <= cos_t <= 1.0:
            raise InfeasibleTargetError(
                f"|M| <= {n_pairs} for the homogeneous family, got {target_m}",
                m_bound=float(n_pairs),
            )
        return _finish_product_state(
            table, spec, _product_angles(n, [math.acos(cos_t)] * n_pairs),
            layers, twist_scale, seed, coeff_floor,
        )

    def residual(x):
        e, m = _product_classical_em(spec, _product_angles(n, x))
        return [e - target_e, m - target_m]

    # deterministic staggered starts around the angle matching M alone
    t0 = math.acos(min(1.0, max(-1.0, 2.0 * target_m / n)))
    solution = None
    for stagger in (0.4, 0.8, 0.15, 1.2):
        start = np.clip(
            [t0 + stagger * math.sin(2.4 * j + 0.7) for j in range(n_pairs)],
            0.0,
            math.pi,
        )
        fit = least_squares(
            residual, start, bounds=(np.zeros(n_pairs), np.full(n_pairs, math.pi)),
            xtol=1e-15, ftol=1e-15, gtol=None,
        )
        if np.linalg.norm(fit.fun) <= 1e-10 * max(1.0, abs(target_e), abs(target_m)):
            solution = fit.x
            break
    if solution is None:
        # report the attainable band on the uniform/staggered 2-angle slice
        grid = np.linspace(0.0, math.pi, 41)
        es, ms = [], []
        for t in grid:
            for d in np.linspace(-1.2, 1.2, 25):
                angles = np.clip([t + d * (-1.0) ** j for j in range(n_pairs)], 0.0, math.pi)
                e, m = _product_classical_em(spec, _product_angles(n, angles))
                es.append(e)
                ms.append(m)
        es, ms = np.array(es), np.array(ms)
        near = np.abs(ms - target_m) <= 0.05 * n
        bounds = (
            (float(es[near].min()), float(es[near].max())) if near.any() else None
        )
        raise InfeasibleTargetError(
            f"product family cannot reach (E={target_e}, M={target_m}); "
            f"attainable E near this M: {bounds}, |M| <= {n / 2}",
            e_bounds=bounds, m_bound=n / 2,
        )

    return _finish_product_state(
        table, spec, _product_angles(n, solution), layers, twist_scale, seed, coeff_floor
    )


def _finish_product_state(table, spec, thetas, layers, twist_scale, seed, coeff_floor):
    n = table.n_sites
    psi = np.ones(1)
    for theta in thetas:
        psi = np.kron(psi, np.array([math.cos(theta / 2.0), math.sin(theta / 2.0)]))
    psi = psi.astype(complex)

    rng = np.random.default_rng([seed, n, 0x5CA1])
    for layer in range(layers):
        start = layer % 2
        for i in range(start, n - 1, 2):
            gate = _su2_scalar_gate(rng.uniform(-twist_scale, twist_scale))
            psi = _apply_two_site(psi, gate, i, n)

    coeffs: dict[tuple[int, int], complex] = {}
    for mult in table.multiplets:
        for tm in mult.twice_m_values():
            c = complex(mult.vector(tm) @ psi)
            if abs(c) > coeff_floor:
                coeffs[(mult.label, tm)] = c
    total = sum(abs(c) ** 2 for c in coeffs.values())
    if abs(total - 1.0) > 1e-10:
        raise ConsistencyError(
            f"eigenbasis decomposition lost norm: sum |C|^2 = {total!r}"
        )
    norm = math.sqrt(total)
    coeffs = {key: c / norm for key, c in coeffs.items()}
    return StateCoefficients(n, table.model_hash, coeffs)


@dataclass(frozen=True)
class AmcReport:
    """Charge means and variances of one state (approximate microcanonical
    subspace membership check)."""

    n_sites: int
    e: float
    m: float
    mean_sx: float
    mean_sy: float
    var_h: float
    var_sx: float
    var_sy: float
    var_sz: float

    def variances(self) -> dict[str, float]:
        return {
            "var_h": self.var_h,
            "var_sx": self.var_sx,
            "var_sy": self.var_sy,
            "var_sz": self.var_sz,
        }


def amc_check(
    state: StateCoefficients,
    ham,
    ops: SpinOperators,
    table: SpectrumTable,
) -> AmcReport:
    psi = state.to_vector(table).astype(complex)
    out = {}
    for name, op in (("h", ham.astype(complex)), ("sx", ops.sx.astype(complex)),
                     ("sy", ops.sy), ("sz", ops.sz.astype(complex))):
        applied = op @ psi
        mean = float(np.real(np.vdot(psi, applied)))
        var = float(np.real(np.vdot(applied, applied))) - mean * mean
        out[name] = (mean, var)
    for name, (_, var) in out.items():
        if var < -1e-10:
            raise ConsistencyError(f"negative variance for {name}: {var}")
    return AmcReport(
        table.n_sites,
        e=out["h"][0],
        m=out["sz"][0],
        mean_sx=out["sx"][0],
        mean_sy=out["sy"][0],
        var_h=max(out["h"][1], 0.0),
        var_sx=max(out["sx"][1], 0.0),
        var_sy=max(out["sy"][1], 0.0),
        var_sz=max(out["sz"][1], 0.0),
    )


def amc_scaling(reports: list[AmcReport], floor: float = 1e-12) -> dict[str, tuple[float, float]]:
    """log-log slopes of each charge variance against N (expected <= 1)."""
    from .tensors import ols_line

    if len(reports) < 2:
        raise ValidationError("need reports at two or more sizes")
    ns = np.array([r.n_sites for r in reports], dtype=float)
    slopes = {}
    for name in ("var_h", "var_sx", "var_sy", "var_sz"):
        vals = np.array([getattr(r, name) for r in reports])
        if np.any(vals <= floor):
            slopes[name] = (0.0, 0.0)  # identically small variance family
            continue
        slope, _, se, _ = ols_line(np.log(ns), np.log(vals))
        slopes[name] = (slope, se)
    return slopes


@dataclass(frozen=True)
class MomentReport:
    """Centered moments of (E_alpha, m, s_alpha) under one distribution."""

    n_sites: int
    e_mean: float
    m_mean: float
    moments: dict[tuple[int, int, int], float] = field(repr=False)
    zero_floors: dict[tuple[int, int, int], float] = field(repr=False)


def moment_check(source, table: SpectrumTable, max_order: int = 3) -> MomentReport:
    """Moments <(E-E)^A (m-M)^B (s-M)^C> of the diagonal or thermal weights.

    source is either StateCoefficients (diagonal ensemble |C|^2) or
    NatsParams (thermal weights).
    """
    if isinstance(source, StateCoefficients):
        p = source.probabilities(table)
    elif isinstance(source, NatsParams):
        p, *_ = nats_weights(table, source)
    else:
        raise ValidationError("source must be a state or solved NATS parameters")
    es, ms, idx = _flat_arrays(table)
    spins = table.twice_spins()[idx] / 2.0
    e_mean = float(p @ es)
    m_mean = float(p @ ms)
    de = es - e_mean
    dm = ms - m_mean
    ds = spins - m_mean
    spread = {
        "e": max(float(np.max(np.abs(de))), 1.0),
        "m": max(float(np.max(np.abs(dm))), 1.0),
        "s": max(float(np.max(np.abs(ds))), 1.0),
    }
    moments = {}
    floors = {}
    for a in range(max_order + 1):
        for bb in range(max_order + 1 - a):
            for cc in range(max_order + 1 - a - bb):
                moments[(a, bb, cc)] = float(p @ (de ** a * dm ** bb * ds ** cc))
                floors[(a, bb, cc)] = 1e-9 * spread["e"] ** a * spread["m"] ** bb * spread["s"] ** cc
    return MomentReport(table.n_sites, e_mean, m_mean, moments, floors)


@dataclass(frozen=True)
class MomentScalingRecord:
    order: tuple[int, int, int]
    values: tuple[float, ...]
    slope: float | None
    slope_se: float | None
    bound: int
    exceeds_bound: bool


_SUBLEADING_FIT_TOL = 0.03


def _bound_model_misfit(ns: np.ndarray, vals: np.ndarray, bound: int) -> float:
    """Worst relative residual of a*N^bound + b*N^(bound-1) against vals."""
    design = np.column_stack([ns ** bound, ns ** (bound - 1)])
    coef, *_ = np.linalg.lstsq(design, vals, rcond=None)
    resid = design @ coef - vals
    return float(np.max(np.abs(resid) / np.maximum(np.abs(vals), 1e-300)))


def moment_scaling(reports: list[MomentReport]) -> list[MomentScalingRecord]:
    """Fit log |moment| against log N and compare with the A+B+C-1 bound.

    Moments below their noise floor at any size are counted as identically
    small and excluded from fitting. At 6-12 sites every bounded moment
    carries subleading corrections one power of N down (boundary terms,
    O(1) offsets) that inflate the raw log-log slope above its asymptotic
    exponent, so a record is flagged only when the slope exceeds the bound
    by more than two standard errors AND the values cannot be reproduced
    by a bound-power law with one subleading correction (3% worst relative
    residual; an N^(bound + 1/2) trend misfits that model by ~6% or more
    over this size range).
    """
    from .tensors import ols_line

    if len(reports) < 2:
        raise ValidationError("need moment reports at two or more sizes")
    ns = np.array([r.n_sites for r in reports], dtype=float)
    records = []
    for order in sorted(reports[0].moments):
        if order == (0, 0, 0):
            continue
        vals = np.array([r.moments[order] for r in reports])
        floors = np.array([r.zero_floors[order] for r in reports])
        bound = sum(order) - 1
        if np.any(np.abs(vals) <= floors):
            records.append(MomentScalingRecord(order, tuple(vals), None, None, bound, False))
            continue
        slope, _, se, _ = ols_line(np.log(ns), np.log(np.abs(vals)))
        exceeds = slope > bound + 2.0 * se and (
            len(reports) < 3
            or _bound_model_misfit(ns, vals, bound) > _SUBLEADING_FIT_TOL
        )
        records.append(MomentScalingRecord(order, tuple(vals), slope, se, bound, exceeds))
    return records
