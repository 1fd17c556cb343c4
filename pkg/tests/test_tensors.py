import numpy as np
import pytest
import scipy.sparse as sp

from naeth.errors import ValidationError
from naeth.model import (
    SpinModelSpec,
    build_hamiltonian,
    build_spin_operators,
    exchange_term,
    max_abs,
    site_operator,
)
from naeth.model import _SZ
from naeth.spectral import decompose, entropy_surface
from naeth.spin_algebra import cg_value
from naeth.tensors import (
    SphericalTensorFamily,
    build_tensor,
    eth_diagonal_fit,
    eth_offdiagonal_stats,
    ols_line,
    reduced_elements,
    spin_density_slope,
    tensor_algebra_residuals,
)


@pytest.fixture(scope="module")
def n6():
    spec = SpinModelSpec.default(6, seed=5)
    ham = build_hamiltonian(spec)
    ops = build_spin_operators(6)
    table = decompose(ham, ops, spec.hash_hex())
    return spec, ham, ops, table


def test_dipole_q0_is_sz(n6):
    *_, ops, _ = n6
    fam = build_tensor("dipole", (2,), 6)
    assert max_abs(fam.component(0) - site_operator(6, 2, _SZ)) == 0.0


def test_quadrupole_q0_form(n6):
    _, _, ops, _ = n6
    fam = build_tensor("quadrupole", (2, 3), 6, ops)
    want = 3.0 * site_operator(6, 2, _SZ) @ site_operator(6, 3, _SZ) - exchange_term(6, 2, 3)
    assert max_abs(fam.component(0) - want) <= 1e-14


def test_scalar_commutes_with_all_charges(n6):
    _, _, ops, _ = n6
    fam = build_tensor("scalar", (1, 2), 6)
    t0 = fam.component(0).astype(complex)
    for s_a in (ops.sx.astype(complex), ops.sy, ops.sz.astype(complex)):
        assert max_abs(t0 @ s_a - s_a @ t0) <= 1e-12


@pytest.mark.parametrize("kind,sites,k", [
    ("dipole", (1,), 1),
    ("quadrupole", (2, 3), 2),
    ("scalar", (0, 1), 0),
    ("identity", (), 0),
])
def test_tensor_algebra(n6, kind, sites, k):
    _, _, ops, _ = n6
    fam = build_tensor(kind, sites, 6, ops)
    assert fam.rank == k
    res = tensor_algebra_residuals(fam, ops)
    assert all(v <= 1e-12 for v in res.values()), res


def test_bad_sites_rejected():
    with pytest.raises(ValidationError):
        build_tensor("dipole", (9,), 6)
    with pytest.raises(ValidationError):
        build_tensor("wedge", (0,), 6)


def test_identity_calibration(n6):
    *_, table = n6
    fam = build_tensor("identity", (), 6)
    red = reduced_elements(fam, table)
    for (a, b), value in red.entries.items():
        if a == b:
            assert value == pytest.approx(1.0, abs=1e-12)
        else:
            assert abs(value) <= 1e-12
    assert red.max_spread() <= 1e-8


@pytest.mark.parametrize("kind,sites", [("dipole", (3,)), ("quadrupole", (2, 3)), ("scalar", (1, 2))])
def test_wigner_eckart_spread(n6, kind, sites):
    _, _, ops, table = n6
    fam = build_tensor(kind, sites, 6, ops)
    red = reduced_elements(fam, table)
    assert red.max_spread() <= 1e-8
    # triangle rule: no entries beyond |s - s'| <= k
    tk = 2 * fam.rank
    for (a, b) in red.entries:
        assert abs(table.multiplets[a].twice_spin - table.multiplets[b].twice_spin) <= tk


def test_triangle_rule_elements_vanish(n6):
    # raw probe elements for pairs with s_a - s_b = k + 1 are exact zeros
    _, _, ops, table = n6
    fam = build_tensor("dipole", (2,), 6, ops)
    by_spin = table.by_spin()
    a = by_spin[6][0]   # s = 3
    b = by_spin[2][0]   # s = 1, so |Delta s| = 2 > k = 1
    t0 = fam.component(0)
    worst = max(
        abs(float(a.vector(tm) @ (t0 @ b.vector(tm))))
        for tm in (-2, 0, 2)
    )
    assert worst <= 1e-12


def test_reduced_matches_direct_elements(n6):
    # reconstruct <a,m|T_q|a',m'> = CG * <a||T||a'> against direct values
    _, _, ops, table = n6
    fam = build_tensor("quadrupole", (2, 3), 6, ops)
    red = reduced_elements(fam, table)
    rng = np.random.default_rng(3)
    labels = rng.choice(len(table.multiplets), size=12)
    pairs = [(int(a), int(b)) for a, b in zip(labels[:6], labels[6:])]
    for a, b in pairs:
        ma, mb = table.multiplets[a], table.multiplets[b]
        if (a, b) not in red.entries:
            continue
        for tq in (-4, -2, 0, 2, 4):
            for tmb in mb.twice_m_values():
                tma = tmb + tq
                if abs(tma) > ma.twice_spin:
                    continue
                direct = float(ma.vector(tma) @ (fam.component(tq // 2) @ mb.vector(tmb)))
                cg = cg_value(*[x / 2 for x in (ma.twice_spin, tma, mb.twice_spin, tmb, 4, tq)])
                assert direct == pytest.approx(red.entries[(a, b)] * cg, abs=2e-10)


def test_diagonal_mode_matches_full(n6):
    _, _, ops, table = n6
    fam = build_tensor("dipole", (1,), 6, ops)
    full = reduced_elements(fam, table)
    diag = reduced_elements(fam, table, mode="diagonal")
    for label, value in diag.diagonal().items():
        assert value == pytest.approx(full.entries[(label, label)], abs=1e-12)
    assert set(diag.entries) == {(a, a) for a in range(len(table.multiplets))
                                 if (a, a) in full.entries}


def test_singlet_closed_channel_zeros(n6):
    _, _, ops, table = n6
    fam = build_tensor("quadrupole", (2, 3), 6, ops)
    red = reduced_elements(fam, table)
    singlets = [m.label for m in table.multiplets if m.twice_spin == 0]
    assert singlets
    for label in singlets:
        assert red.entries[(label, label)] == 0.0
        assert label in red.closed_diagonal
        assert red.spreads[(label, label)] <= 1e-10


def test_diagonal_fit_identity(n6):
    *_, table = n6
    fam = build_tensor("identity", (), 6)
    red = reduced_elements(fam, table, mode="diagonal")
    fit = eth_diagonal_fit(red, table, de=2.0, ds=10.0, min_count=2)
    for stat in fit.records():
        assert stat.mean == pytest.approx(1.0, abs=1e-12)
        assert stat.std <= 1e-12


def test_diagonal_fit_singlet_bins_vanish(n6):
    _, _, ops, table = n6
    fam = build_tensor("quadrupole", (2, 3), 6, ops)
    red = reduced_elements(fam, table, mode="diagonal")
    fit = eth_diagonal_fit(red, table, de=4.0, ds=1.0, min_count=1)
    s0_bins = [b for b in fit.records() if b.s_center < 1.0]
    assert s0_bins
    for stat in s0_bins:
        assert abs(stat.mean) <= max(stat.std, 1e-10)


def test_offdiagonal_stats_and_commuting_scalar(n6):
    _, ham, ops, table = n6
    fam = build_tensor("dipole", (2,), 6, ops)
    red = reduced_elements(fam, table)
    surf = entropy_surface(table, de=1.0)
    stats = eth_offdiagonal_stats(red, table, surf, domega=1.0, min_count=5)
    assert stats.n_samples > 0
    assert abs(stats.residual_mean) < 1.0
    assert stats.residual_variance > 0.0

    # a scalar built from H itself commutes with H: off-diagonals vanish
    hfam = SphericalTensorFamily(0, {0: sp.csr_matrix(ham)}, 0, "H")
    hred = reduced_elements(hfam, table)
    off = [v for (a, b), v in hred.entries.items() if a != b]
    assert max(abs(v) for v in off) <= 1e-12
    # and its diagonal reduced elements are the energies themselves
    for label, value in hred.diagonal().items():
        assert value == pytest.approx(table.multiplets[label].energy, abs=1e-10)

    with pytest.raises(ValidationError):
        eth_offdiagonal_stats(
            reduced_elements(fam, table, mode="diagonal"), table, surf
        )


def test_ols_line_recovers_slope():
    rng = np.random.default_rng(0)
    x = np.linspace(0, 1, 40)
    y = 0.7 * x - 0.2 + rng.normal(0, 1e-3, 40)
    slope, intercept, slope_se, intercept_se = ols_line(x, y)
    assert slope == pytest.approx(0.7, abs=5e-3)
    assert intercept == pytest.approx(-0.2, abs=5e-3)
    assert slope_se < 5e-3 and intercept_se < 5e-3


def test_spin_density_slope_needs_three_sizes(n6):
    _, _, ops, table = n6
    fam = build_tensor("quadrupole", (2, 3), 6, ops)
    red = reduced_elements(fam, table, mode="diagonal")
    with pytest.raises(ValidationError):
        spin_density_slope([(6, red, table)], (-1.0, 1.0))
