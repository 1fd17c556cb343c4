"""Spherical tensor operators and non-Abelian ETH diagnostics.

A rank-k family holds the 2k+1 components T^(k)_q. Reduced matrix
elements <a||T^(k)||a'> are extracted by dividing probe matrix elements
<a,m|T^(k)_q|a',m'> by the corresponding coupling coefficient and
averaging over probes; the spread across probes doubles as a unit test of
the Wigner-Eckart factorization, which must hold to solver precision
independently of any thermalization hypothesis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .errors import ConsistencyError, ValidationError
from .model import exchange_term, max_abs, site_operator, SpinOperators
from .model import _SP, _SM, _SZ  # single-site matrices
from .spectral import EntropySurface, SpectrumTable
from .spin_algebra import _cg_float_tw

__all__ = [
    "SphericalTensorFamily",
    "build_tensor",
    "tensor_algebra_residuals",
    "ReducedElementTable",
    "reduced_elements",
    "DiagonalFit",
    "eth_diagonal_fit",
    "OffDiagonalStats",
    "eth_offdiagonal_stats",
    "SlopeReport",
    "spin_density_slope",
    "ols_line",
]

# Probe ratios for near-zero reduced elements sit at the solver's absolute
# noise (~1e-14); spreads are therefore measured relative to the pair scale
# floored at this fraction of the table's largest element, so a vanishing
# element cannot masquerade as a Wigner-Eckart violation.
_SPREAD_FLOOR_FRACTION = 1e-5


@dataclass(frozen=True)
class SphericalTensorFamily:
    """The 2k+1 components of a rank-k spherical tensor operator."""

    rank: int
    components: dict[int, sp.csr_matrix] = field(repr=False)
    locality: int
    description: str

    def component(self, q: int) -> sp.csr_matrix:
        if abs(q) > self.rank:
            raise ValidationError(f"|q| <= k required, got q={q}, k={self.rank}")
        return self.components[q]

    @property
    def dimension(self) -> int:
        return self.components[0].shape[0]


def _ladder_coeff(k: int, q: int, up: bool) -> float:
    step = 1 if up else -1
    return math.sqrt(k * (k + 1) - q * (q + step))


def build_tensor(kind: str, sites: tuple[int, ...], n_sites: int,
                 ops: SpinOperators | None = None) -> SphericalTensorFamily:
    """Construct a local tensor family.

    kind 'dipole' (k=1, one site), 'quadrupole' (k=2, two sites),
    'scalar' (k=0, two sites: -s_i.s_j), or 'identity' (k=0 calibration
    operator). Components with q != 0 are generated from the q=0 seed by
    ladder commutators where needed.
    """
    for j in sites:
        if not 0 <= j < n_sites:
            raise ValidationError(f"site {j} outside chain of {n_sites} sites")
    if kind == "dipole":
        (j,) = sites
        comps = {
            0: sp.csr_matrix(site_operator(n_sites, j, _SZ)),
            1: sp.csr_matrix(-site_operator(n_sites, j, _SP) / math.sqrt(2)),
            -1: sp.csr_matrix(site_operator(n_sites, j, _SM) / math.sqrt(2)),
        }
        return SphericalTensorFamily(1, comps, 1, f"dipole(site {j})")
    if kind == "scalar":
        i, j = sites
        comps = {0: sp.csr_matrix(-exchange_term(n_sites, i, j))}
        return SphericalTensorFamily(0, comps, 2, f"scalar(-s{i}.s{j})")
    if kind == "identity":
        dim = 2 ** n_sites
        return SphericalTensorFamily(0, {0: sp.identity(dim, format="csr")}, 0, "identity")
    if kind == "quadrupole":
        i, j = sites
        t0 = 3.0 * (site_operator(n_sites, i, _SZ) @ site_operator(n_sites, j, _SZ)) \
            - exchange_term(n_sites, i, j)
        if ops is None:
            from .model import build_spin_operators

            ops = build_spin_operators(n_sites)
        comps = {0: sp.csr_matrix(t0)}
        for q in (0, 1):
            c = _ladder_coeff(2, q, up=True)
            comps[q + 1] = sp.csr_matrix(
                (ops.sp @ comps[q] - comps[q] @ ops.sp) / c
            )
        for q in (0, -1):
            c = _ladder_coeff(2, q, up=False)
            comps[q - 1] = sp.csr_matrix(
                (ops.sm @ comps[q] - comps[q] @ ops.sm) / c
            )
        return SphericalTensorFamily(2, comps, 2, f"quadrupole(sites {i},{j})")
    raise ValidationError(f"unknown tensor kind {kind!r}")


def tensor_algebra_residuals(family: SphericalTensorFamily, ops: SpinOperators) -> dict[str, float]:
    """Max deviations from the defining commutator and adjoint relations."""
    k = family.rank
    res = {}
    worst_z = worst_up = worst_down = worst_adj = 0.0
    for q in range(-k, k + 1):
        tq = family.component(q)
        worst_z = max(worst_z, max_abs(ops.sz @ tq - tq @ ops.sz - q * tq))
        comm_up = ops.sp @ tq - tq @ ops.sp
        target_up = _ladder_coeff(k, q, True) * family.component(q + 1) if q < k else None
        worst_up = max(worst_up, max_abs(comm_up - target_up) if target_up is not None
                       else max_abs(comm_up))
        comm_dn = ops.sm @ tq - tq @ ops.sm
        target_dn = _ladder_coeff(k, q, False) * family.component(q - 1) if q > -k else None
        worst_down = max(worst_down, max_abs(comm_dn - target_dn) if target_dn is not None
                         else max_abs(comm_dn))
        adj = tq.conj().T - (-1) ** q * family.component(-q)
        worst_adj = max(worst_adj, max_abs(adj))
    res["sz_commutator"] = worst_z
    res["raising_commutator"] = worst_up
    res["lowering_commutator"] = worst_down
    res["adjoint_pattern"] = worst_adj
    return res


@dataclass(frozen=True)
class ReducedElementTable:
    """<a||T^(k)||a'> for multiplet pairs, with probe-consistency spreads.

    Diagonal pairs whose coupling channel is closed (2s < k) store an
    exact 0.0 after the raw multiplet block is verified to vanish; their
    spread records the largest raw matrix element found.
    """

    rank: int
    n_sites: int
    entries: dict[tuple[int, int], float] = field(repr=False)
    spreads: dict[tuple[int, int], float] = field(repr=False)
    closed_diagonal: frozenset[int]
    mode: str

    def get(self, a: int, b: int):
        return self.entries.get((a, b))

    def diagonal(self) -> dict[int, float]:
        return {a: v for (a, b), v in self.entries.items() if a == b}

    def max_spread(self) -> float:
        return max(self.spreads.values(), default=0.0)


def _stack(mults, tm: int) -> np.ndarray:
    cols = [m.vector(tm) for m in mults]
    return np.column_stack(cols)


def reduced_elements(
    family: SphericalTensorFamily,
    table: SpectrumTable,
    *,
    mode: str = "all",
    cg_threshold: float = 0.1,
    closed_channel_tol: float = 1e-10,
) -> ReducedElementTable:
    """Extract reduced matrix elements by Wigner-Eckart inversion.

    mode 'all' fills every open pair with |s_a - s_b| <= k; 'diagonal'
    fills only a == a' (enough for thermal and time averages, and much
    cheaper at large sizes).
    """
    if family.dimension != table.dimension:
        raise ValidationError("tensor family and spectrum table sizes differ")
    if mode not in ("all", "diagonal"):
        raise ValidationError(f"unknown mode {mode!r}")
    k = family.rank
    tk = 2 * k
    by_spin = table.by_spin()
    spins = sorted(by_spin)
    entries: dict[tuple[int, int], float] = {}
    spreads: dict[tuple[int, int], float] = {}
    spans: dict[tuple[int, int], tuple[float, float]] = {}  # (span, scale)
    closed: set[int] = set()

    comps = {q: family.component(q).tocsr() for q in range(-k, k + 1)}

    for ts_a in spins:
        mults_a = by_spin[ts_a]
        for ts_b in spins:
            if abs(ts_a - ts_b) > tk:
                continue
            if mode == "diagonal" and ts_a != ts_b:
                continue
            mults_b = by_spin[ts_b]
            if ts_a + ts_b < tk:
                # coupling channel closed: Wigner-Eckart forces the whole
                # block to vanish; verify and store exact zeros on the
                # diagonal
                if ts_a != ts_b:
                    continue
                worst = 0.0
                for tq in range(-tk, tk + 1, 2):
                    for tm_b in range(-ts_b, ts_b + 1, 2):
                        tm_a = tm_b + tq
                        if abs(tm_a) > ts_a:
                            continue
                        va = _stack(mults_a, tm_a)
                        block = va.T @ (comps[tq // 2] @ _stack(mults_b, tm_b))
                        worst = max(worst, float(np.max(np.abs(block))))
                if worst > closed_channel_tol:
                    raise ConsistencyError(
                        f"closed coupling channel (s={ts_a}/2, k={k}) has "
                        f"matrix elements of size {worst:.3e}"
                    )
                for m in mults_a:
                    entries[(m.label, m.label)] = 0.0
                    spreads[(m.label, m.label)] = worst
                    closed.add(m.label)
                continue

            probes = []
            for tq in range(-tk, tk + 1, 2):
                for tm_b in range(-ts_b, ts_b + 1, 2):
                    tm_a = tm_b + tq
                    if abs(tm_a) > ts_a:
                        continue
                    cg = _cg_float_tw(ts_a, tm_a, ts_b, tm_b, tk, tq)
                    probes.append((cg, tq, tm_a, tm_b))
            cg_max = max(abs(p[0]) for p in probes)
            kept = [p for p in probes if abs(p[0]) > cg_threshold * cg_max]

            if mode == "diagonal":
                ratios = []
                for cg, tq, tm_a, tm_b in kept:
                    va = _stack(mults_a, tm_a)
                    w = comps[tq // 2] @ _stack(mults_b, tm_b)
                    diag = np.einsum("ij,ij->j", va, w)
                    ratios.append(diag / cg)
                block = np.array(ratios)  # (n_probes, n_mult)
                means = block.mean(axis=0)
                scale = np.max(np.abs(block), axis=0)
                span = block.max(axis=0) - block.min(axis=0)
                for col, m in enumerate(mults_a):
                    entries[(m.label, m.label)] = float(means[col])
                    spans[(m.label, m.label)] = (float(span[col]), float(scale[col]))
                continue

            blocks = []
            for cg, tq, tm_a, tm_b in kept:
                va = _stack(mults_a, tm_a)
                w = comps[tq // 2] @ _stack(mults_b, tm_b)
                blocks.append((va.T @ w) / cg)
            stack = np.stack(blocks)  # (n_probes, n_a, n_b)
            means = stack.mean(axis=0)
            scale = np.max(np.abs(stack), axis=0)
            span = stack.max(axis=0) - stack.min(axis=0)
            for ia, ma in enumerate(mults_a):
                for ib, mb in enumerate(mults_b):
                    entries[(ma.label, mb.label)] = float(means[ia, ib])
                    spans[(ma.label, mb.label)] = (
                        float(span[ia, ib]), float(scale[ia, ib])
                    )

    table_scale = max((s for _, s in spans.values()), default=0.0)
    floor = max(_SPREAD_FLOOR_FRACTION * table_scale, 1e-300)
    for key, (span_v, scale_v) in spans.items():
        spreads[key] = span_v / max(scale_v, floor)
    return ReducedElementTable(k, table.n_sites, entries, spreads, frozenset(closed), mode)


@dataclass(frozen=True)
class BinStat:
    e_center: float
    s_center: float
    mean: float
    std: float
    count: int


@dataclass(frozen=True)
class DiagonalFit:
    """Binned estimate of the smooth diagonal function over (E, S)."""

    n_sites: int
    de: float
    ds: float
    bins: dict[tuple[int, int], BinStat] = field(repr=False)
    n_sparse_bins: int = 0

    def records(self):
        return sorted(self.bins.values(), key=lambda b: (b.s_center, b.e_center))

    def mid_spectrum_fluctuation(self, fraction: float = 1.0 / 3.0) -> float:
        """Count-weighted bin standard deviation near the spectrum center."""
        stats = list(self.bins.values())
        if not stats:
            raise ValidationError("no populated bins")
        e_lo = min(b.e_center for b in stats)
        e_hi = max(b.e_center for b in stats)
        mid = 0.5 * (e_lo + e_hi)
        half_width = 0.5 * fraction * (e_hi - e_lo)
        chosen = [b for b in stats if abs(b.e_center - mid) <= half_width]
        if not chosen:
            chosen = stats
        weight = sum(b.count for b in chosen)
        return sum(b.std * b.count for b in chosen) / weight


def eth_diagonal_fit(
    reduced: ReducedElementTable,
    table: SpectrumTable,
    de: float = 0.5,
    ds: float = 1.0,
    min_count: int = 5,
) -> DiagonalFit:
    """Bin diagonal reduced elements over (E, S)."""
    diag = reduced.diagonal()
    if not diag:
        raise ValidationError("reduced table has no diagonal entries")
    if de <= 0 or ds <= 0:
        raise ValidationError("bin widths must be positive")
    e0 = min(m.energy for m in table.multiplets)
    groups: dict[tuple[int, int], list] = {}
    for label, value in diag.items():
        mult = table.multiplets[label]
        key = (int(np.floor((mult.energy - e0) / de)),
               int(np.floor((mult.twice_spin / 2.0) / ds)))
        groups.setdefault(key, []).append((mult.energy, mult.twice_spin / 2.0, value))
    bins = {}
    sparse = 0
    for key, rows in groups.items():
        if len(rows) < min_count:
            sparse += 1
            continue
        values = np.array([r[2] for r in rows])
        bins[key] = BinStat(
            e_center=e0 + (key[0] + 0.5) * de,
            s_center=(key[1] + 0.5) * ds,
            mean=float(values.mean()),
            std=float(values.std()),
            count=len(rows),
        )
    return DiagonalFit(table.n_sites, de, ds, bins, sparse)


@dataclass(frozen=True)
class OffDiagBin:
    nu: int
    omega_center: float
    count: int
    mean_abs: float
    rms: float


@dataclass(frozen=True)
class OffDiagonalStats:
    """Entropy-rescaled off-diagonal magnitudes binned by (omega, nu).

    mean_abs per bin estimates |f^(k)_nu|; residuals are the scaled
    elements normalized by their bin rms, pooled across populated bins.
    """

    bins: dict[tuple[int, int], OffDiagBin] = field(repr=False)
    residual_mean: float = 0.0
    residual_variance: float = 0.0
    n_samples: int = 0
    n_skipped: int = 0


def eth_offdiagonal_stats(
    reduced: ReducedElementTable,
    table: SpectrumTable,
    surface: EntropySurface,
    domega: float = 0.5,
    min_count: int = 5,
) -> OffDiagonalStats:
    if reduced.mode != "all":
        raise ValidationError("off-diagonal statistics need mode='all' extraction")
    samples: dict[tuple[int, int], list[float]] = {}
    skipped = 0
    for (a, b), value in reduced.entries.items():
        if a == b:
            continue
        ma, mb = table.multiplets[a], table.multiplets[b]
        mean_e = 0.5 * (ma.energy + mb.energy)
        mean_s = 0.25 * (ma.twice_spin + mb.twice_spin)
        log_rho = surface.log_density(mean_e, mean_s)
        if log_rho is None:
            skipped += 1
            continue
        omega = ma.energy - mb.energy
        nu = (ma.twice_spin - mb.twice_spin) // 2
        key = (nu, int(np.floor(omega / domega)))
        samples.setdefault(key, []).append(value * np.exp(0.5 * log_rho))

    bins = {}
    pooled = []
    for key, vals in samples.items():
        arr = np.array(vals)
        if len(arr) < min_count:
            continue
        rms = float(np.sqrt(np.mean(arr ** 2)))
        bins[key] = OffDiagBin(
            nu=key[0],
            omega_center=(key[1] + 0.5) * domega,
            count=len(arr),
            mean_abs=float(np.mean(np.abs(arr))),
            rms=rms,
        )
        if rms > 0:
            pooled.append(arr / rms)
    if pooled:
        allr = np.concatenate(pooled)
        mean = float(allr.mean())
        var = float(allr.var(ddof=1)) if len(allr) > 1 else 0.0
        n = len(allr)
    else:
        mean, var, n = 0.0, 0.0, 0
    return OffDiagonalStats(bins, mean, var, n, skipped)


def ols_line(x: np.ndarray, y: np.ndarray):
    """Least-squares line fit: (slope, intercept, slope_se, intercept_se)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = len(x)
    if n < 2:
        raise ValidationError("need at least two points to fit a line")
    design = np.column_stack([x, np.ones(n)])
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    resid = y - design @ coef
    dof = max(n - 2, 1)
    sigma2 = float(resid @ resid) / dof
    cov = sigma2 * np.linalg.inv(design.T @ design)
    return float(coef[0]), float(coef[1]), float(np.sqrt(cov[0, 0])), float(np.sqrt(cov[1, 1]))


@dataclass(frozen=True)
class SlopeReport:
    slope: float
    slope_se: float
    intercept: float
    intercept_se: float
    n_points: int
    rank: int

    @property
    def intercept_consistent_with_zero(self) -> bool:
        return abs(self.intercept) <= 2.0 * self.intercept_se


def spin_density_slope(
    per_size: list[tuple[int, ReducedElementTable, SpectrumTable]],
    energy_density_window: tuple[float, float],
) -> SlopeReport:
    """Fit diagonal elements against spin density s/N in an energy window.

    Pools multiplets whose energy density falls inside the window across
    all supplied sizes; needs at least three sizes.
    """
    if len(per_size) < 3:
        raise ValidationError("need diagonal data at >= 3 sizes")
    lo, hi = energy_density_window
    xs, ys = [], []
    rank = per_size[0][1].rank
    for n, reduced, table in per_size:
        for label, value in reduced.diagonal().items():
            mult = table.multiplets[label]
            if lo <= mult.energy / n <= hi:
                xs.append(mult.twice_spin / 2.0 / n)
                ys.append(value)
    if len(xs) < 8:
        raise ValidationError(
            f"only {len(xs)} multiplets inside the energy window {energy_density_window}"
        )
    slope, intercept, slope_se, intercept_se = ols_line(np.array(xs), np.array(ys))
    return SlopeReport(slope, slope_se, intercept, intercept_se, len(xs), rank)
