import math

import numpy as np
import pytest
import scipy.sparse as sp

from naeth.ensembles import (
    amc_check,
    amc_scaling,
    build_state,
    dephased_average,
    moment_check,
    moment_scaling,
    nats_weights,
    solve_nats,
    thermal_average,
    time_average,
    time_average_bound,
    StateCoefficients,
)
from naeth.errors import (
    ConsistencyError,
    InfeasibleTargetError,
    ValidationError,
)
from naeth.model import SpinModelSpec, build_hamiltonian, build_spin_operators
from naeth.spectral import decompose
from naeth.spin_algebra import cg_value
from naeth.tensors import build_tensor, reduced_elements


@pytest.fixture(scope="module")
def system6():
    spec = SpinModelSpec.default(6, seed=5)
    ham = build_hamiltonian(spec)
    ops = build_spin_operators(6)
    table = decompose(ham, ops, spec.hash_hex())
    return spec, ham, ops, table


@pytest.fixture(scope="module")
def quad6(system6):
    _, _, ops, table = system6
    fam = build_tensor("quadrupole", (2, 3), 6, ops)
    return fam, reduced_elements(fam, table, mode="diagonal")


class TestSolveNats:
    def test_mu_zero_at_zero_magnetization(self, system6):
        *_, table = system6
        params = solve_nats(table, target_e=-1.0, target_m=0.0)
        assert params.mu == 0.0
        assert params.beta_mu == 0.0
        assert abs(params.residual_e) <= 1e-8

    def test_infinite_temperature_limit(self, system6):
        _, ham, _, table = system6
        center = float(np.trace(ham.toarray())) / table.dimension
        params = solve_nats(table, target_e=center, target_m=0.0)
        assert abs(params.beta) <= 1e-9

    def test_round_trip(self, system6):
        *_, table = system6
        es, ms, _ = table.flat_levels()[0], table.flat_levels()[1] / 2.0, None
        beta, mu = 0.7, 0.3
        x = -beta * (es - mu * ms)
        w = np.exp(x - x.max())
        p = w / w.sum()
        target_e = float(p @ es)
        target_m = float(p @ ms)
        params = solve_nats(table, target_e, target_m)
        assert params.beta == pytest.approx(beta, abs=1e-6)
        assert params.mu == pytest.approx(mu, abs=1e-6)

    def test_randomized_round_trips(self, system6):
        *_, table = system6
        es, tms, _ = table.flat_levels()
        ms = tms / 2.0
        rng = np.random.default_rng(17)
        for _ in range(8):
            beta = rng.uniform(-1.2, 1.2)
            mu = rng.uniform(0.0, 0.6)
            x = -beta * es + beta * mu * ms
            w = np.exp(x - x.max())
            p = w / w.sum()
            te, tm = float(p @ es), float(p @ ms)
            if tm < 0 or tm >= table.n_sites / 2:
                continue
            params = solve_nats(table, te, tm)
            if tm > 1e-9:
                assert params.beta == pytest.approx(beta, abs=1e-6)
                assert params.mu * params.beta == pytest.approx(mu * beta, abs=1e-6)

    def test_energy_monotone_in_beta(self, system6):
        *_, table = system6
        es, tms, _ = table.flat_levels()
        means = []
        for beta in np.linspace(-1.5, 1.5, 21):
            x = -beta * es
            w = np.exp(x - x.max())
            means.append(float(w @ es / w.sum()))
        assert all(b < a + 1e-12 for a, b in zip(means, means[1:]))

    def test_out_of_range_energy(self, system6):
        *_, table = system6
        with pytest.raises(InfeasibleTargetError) as err:
            solve_nats(table, target_e=1e3, target_m=0.0)
        assert err.value.e_bounds is not None

    def test_infeasible_magnetization(self, system6):
        *_, table = system6
        e_min = float(table.energies().min())
        with pytest.raises((InfeasibleTargetError, ValidationError)):
            # ground-state energy cannot coexist with near-maximal M
            solve_nats(table, target_e=e_min, target_m=2.9)

    def test_magnetization_range_validated(self, system6):
        *_, table = system6
        with pytest.raises(ValidationError):
            solve_nats(table, target_e=-1.0, target_m=3.0)


class TestThermalAverage:
    def test_q_nonzero_is_bit_exact_zero(self, system6, quad6):
        *_, table = system6
        fam, red = quad6
        params = solve_nats(table, -1.0, 0.4)
        for q in (-2, -1, 1, 2):
            value = thermal_average(fam, q, red, table, params, cross_check=True)
            assert value == 0.0

    def test_identity_normalization(self, system6):
        *_, table = system6
        fam = build_tensor("identity", (), 6)
        red = reduced_elements(fam, table, mode="diagonal")
        params = solve_nats(table, -1.2, 0.7)
        assert thermal_average(fam, 0, red, table, params) == pytest.approx(1.0, abs=1e-12)

    def test_m_zero_kills_k_positive(self, system6, quad6):
        *_, table = system6
        fam, red = quad6
        params = solve_nats(table, -1.0, 0.0)
        assert abs(thermal_average(fam, 0, red, table, params)) <= 1e-10

    def test_sum_matches_direct_trace(self, system6, quad6):
        *_, table = system6
        fam, red = quad6
        params = solve_nats(table, -0.8, 0.9)
        value = thermal_average(fam, 0, red, table, params, cross_check=True)
        assert math.isfinite(value)

    def test_nats_transverse_means_vanish(self, system6):
        # mu_x = mu_y = 0 gives <S_x> = <S_y> = 0 in the thermal state
        _, _, ops, table = system6
        params = solve_nats(table, -1.0, 0.8)
        p, *_ = nats_weights(table, params)
        sx = ops.sx.tocsr()
        sy = ops.sy.tocsr()
        tot_x = tot_y = 0.0
        pos = 0
        for mult in table.multiplets:
            for tm in mult.twice_m_values():
                v = mult.vector(tm)
                tot_x += p[pos] * float(v @ (sx @ v))
                tot_y += p[pos] * float(np.real(np.vdot(v, sy @ v)))
                pos += 1
        assert abs(tot_x) <= 1e-10
        assert abs(tot_y) <= 1e-10

    def test_missing_reduced_entry(self, system6, quad6):
        *_, table = system6
        fam, _ = quad6
        params = solve_nats(table, -1.0, 0.0)
        with pytest.raises(ValidationError):
            thermal_average(fam, 0, {0: 1.0}, table, params)


class TestBuildState:
    def test_eigenstate(self, system6):
        *_, table = system6
        state = build_state("eigenstate", table, label=3, twice_m=table.multiplets[3].twice_spin)
        assert state.coeffs == {(3, table.multiplets[3].twice_spin): 1.0 + 0.0j}

    def test_anomalous_a_magnetization(self, system6):
        _, ham, ops, table = system6
        state = build_state("anomalous_a", table)
        labels = {label for label, _ in state.coeffs}
        assert len(labels) == 1
        mult = table.multiplets[labels.pop()]
        assert mult.twice_spin % 4 == 0 and mult.twice_spin > 0
        report = amc_check(state, ham, ops, table)
        assert report.m == pytest.approx(0.0, abs=1e-12)
        s_val = mult.twice_spin / 2.0
        assert report.var_sz == pytest.approx(s_val ** 2 / 2.0, abs=1e-10)
        assert report.var_h == pytest.approx(0.0, abs=1e-10)

    def test_anomalous_b_variances(self, system6):
        _, ham, ops, table = system6
        state = build_state("anomalous_b", table, mbar=1)
        report = amc_check(state, ham, ops, table)
        assert report.m == pytest.approx(0.0, abs=1e-12)
        assert report.var_sz == pytest.approx(0.5 * (1 + 4), abs=1e-10)
        assert report.mean_sx == pytest.approx(0.0, abs=1e-12)
        assert report.mean_sy == pytest.approx(0.0, abs=1e-12)

    def test_anomalous_b_mbar_validation(self, system6):
        *_, table = system6
        with pytest.raises(ValidationError):
            build_state("anomalous_b", table, mbar=40)

    def test_low_spin_state(self, system6):
        *_, table = system6
        state = build_state("low_spin", table, n_components=2)
        spins = {table.multiplets[l].twice_spin for l, _ in state.coeffs}
        assert spins == {0}

    def test_unknown_kind(self, system6):
        *_, table = system6
        with pytest.raises(ValidationError):
            build_state("garbage", table)


class TestProductState:
    def test_targets_hit(self, system6):
        spec, ham, ops, table = system6
        state = build_state("product", table, spec=spec, target_e=-0.2, target_m=1.0)
        report = amc_check(state, ham, ops, table)
        assert report.e == pytest.approx(-0.2, abs=1e-10)
        assert report.m == pytest.approx(1.0, abs=1e-10)

    def test_brickwork_preserves_charges(self, system6):
        spec, ham, ops, table = system6
        bare = build_state("product", table, spec=spec, target_e=-0.2, target_m=1.0)
        dressed = build_state(
            "product", table, spec=spec, target_e=-0.2, target_m=1.0, layers=3, seed=4
        )
        r0 = amc_check(bare, ham, ops, table)
        r1 = amc_check(dressed, ham, ops, table)
        assert r1.m == pytest.approx(r0.m, abs=1e-10)
        assert r1.var_sz == pytest.approx(r0.var_sz, abs=1e-10)
        assert r1.var_sx == pytest.approx(r0.var_sx, abs=1e-10)
        # the brickwork is allowed to move the energy a little
        assert abs(r1.e - r0.e) < 1.0

    def test_infeasible_energy(self, system6):
        spec, *_, table = system6
        with pytest.raises(InfeasibleTargetError):
            build_state("product", table, spec=spec, target_e=50.0, target_m=0.0)

    def test_infeasible_magnetization(self, system6):
        spec, *_, table = system6
        with pytest.raises(InfeasibleTargetError):
            build_state("product", table, spec=spec, target_e=-0.2, target_m=2.99)


class TestTimeAverage:
    def test_eigenstate_scalar_expectation(self, system6):
        *_, table = system6
        fam = build_tensor("scalar", (1, 2), 6)
        red = reduced_elements(fam, table, mode="diagonal")
        state = build_state("eigenstate", table, label=5, twice_m=table.multiplets[5].twice_spin)
        value = time_average(fam, 0, state, table, red, cross_check=True)
        assert value == pytest.approx(red.diagonal()[5], abs=1e-12)

    def test_anomalous_a_prefactor(self, system6, quad6):
        *_, table = system6
        fam, red = quad6
        state = build_state("anomalous_a", table)
        label = next(iter({l for l, _ in state.coeffs}))
        ts = table.multiplets[label].twice_spin
        s = ts / 2
        prefactor = (1.0 / 3.0) * cg_value(s, s, s, s, 2, 0) + (2.0 / 3.0) * cg_value(
            s, -s / 2, s, -s / 2, 2, 0
        )
        expected = prefactor * red.diagonal()[label]
        value = time_average(fam, 0, state, table, red, cross_check=True)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_anomalous_b_odd_k_vanishes(self, system6):
        _, _, ops, table = system6
        fam = build_tensor("dipole", (2,), 6, ops)
        red = reduced_elements(fam, table, mode="diagonal")
        state = build_state("anomalous_b", table, mbar=1)
        value = time_average(fam, 1, state, table, red, cross_check=True)
        assert abs(value) <= 1e-12

    def test_anomalous_b_even_k(self, system6, quad6):
        *_, table = system6
        fam, red = quad6
        state = build_state("anomalous_b", table, mbar=1)
        label = next(iter({l for l, _ in state.coeffs}))
        s = table.multiplets[label].twice_spin / 2
        expected = 0.5 * cg_value(s, 2, s, 1, 2, 1) * red.diagonal()[label]
        value = time_average(fam, 1, state, table, red, cross_check=True)
        assert value == pytest.approx(expected, rel=1e-10)

    def test_product_state_cross_check(self, system6, quad6):
        spec, *_, table = system6
        fam, red = quad6
        state = build_state(
            "product", table, spec=spec, target_e=-0.3, target_m=0.9, layers=2, seed=1
        )
        value = time_average(fam, 0, state, table, red, cross_check=True)
        oracle = dephased_average(fam, 0, state, table, 1e-10)
        assert value == pytest.approx(oracle, abs=1e-10)

    def test_cauchy_schwarz_bound(self, system6, quad6):
        spec, *_, table = system6
        fam, red = quad6
        state = build_state(
            "product", table, spec=spec, target_e=-0.3, target_m=1.2, seed=2
        )
        for q in (1, 2):
            value = time_average(fam, q, state, table, red)
            bound = time_average_bound(fam, q, state, table, red)
            assert abs(value) <= bound + 1e-12

    def test_accidental_degeneracy_cross_terms(self):
        # H = 0 makes every multiplet degenerate; production path must then
        # reproduce the full dephased average including cross terms.
        ops = build_spin_operators(4)
        zero = sp.csr_matrix((16, 16))
        table = decompose(zero, ops, "")
        fam = build_tensor("dipole", (1,), 4, ops)
        red = reduced_elements(fam, table, mode="diagonal")
        labels = [m.label for m in table.multiplets if m.twice_spin == 2][:2]
        amp = complex(1 / math.sqrt(2))
        state = StateCoefficients(
            4, "", {(labels[0], 0): amp, (labels[1], 2): amp}
        )
        value = time_average(fam, 1, state, table, red, cross_check=True)
        oracle = dephased_average(fam, 1, state, table, 1e-10)
        assert value == pytest.approx(oracle, abs=1e-12)
        # and the cross term is genuinely nonzero here
        assert abs(value) > 1e-3

    def test_mismatched_table_rejected(self, system6):
        *_, table = system6
        other = SpinModelSpec.default(6, seed=99)
        other_table = decompose(build_hamiltonian(other), build_spin_operators(6), other.hash_hex())
        state = build_state("eigenstate", other_table, label=0, twice_m=0)
        fam = build_tensor("scalar", (1, 2), 6)
        red = reduced_elements(fam, table, mode="diagonal")
        with pytest.raises(ValidationError):
            time_average(fam, 0, state, table, red)


class TestAmcAndMoments:
    def test_eigenstate_zero_energy_variance(self, system6):
        _, ham, ops, table = system6
        state = build_state("eigenstate", table, label=7, twice_m=table.multiplets[7].twice_spin)
        report = amc_check(state, ham, ops, table)
        assert report.var_h <= 1e-10

    def test_all_up_product(self, system6):
        _, ham, ops, table = system6
        top = max(table.multiplets, key=lambda m: m.twice_spin)
        state = build_state("eigenstate", table, label=top.label, twice_m=top.twice_spin)
        report = amc_check(state, ham, ops, table)
        assert report.m == pytest.approx(3.0, abs=1e-12)
        assert report.var_sz <= 1e-12

    def test_moment_normalization_and_centering(self, system6):
        *_, table = system6
        params = solve_nats(table, -1.0, 0.6)
        report = moment_check(params, table, max_order=3)
        assert report.moments[(0, 0, 0)] == pytest.approx(1.0, abs=1e-14)
        assert abs(report.moments[(1, 0, 0)]) <= 1e-10
        assert abs(report.moments[(0, 1, 0)]) <= 1e-10
        assert report.moments[(2, 0, 0)] > 0

    def test_moment_scaling_shapes(self):
        reports = []
        for n in (4, 5, 6):
            spec = SpinModelSpec.default(n, seed=3)
            table = decompose(build_hamiltonian(spec), build_spin_operators(n), spec.hash_hex())
            state = build_state("product", table, spec=spec,
                                target_e=-0.1 * n / 6, target_m=0.15 * n, seed=8)
            reports.append(moment_check(state, table, max_order=2))
        records = moment_scaling(reports)
        by_order = {r.order: r for r in records}
        assert (0, 0, 0) not in by_order
        var_e = by_order[(2, 0, 0)]
        assert var_e.slope is not None
        assert not var_e.exceeds_bound

    def test_amc_scaling(self):
        reports = []
        for n in (4, 5, 6):
            spec = SpinModelSpec.default(n, seed=3)
            ham = build_hamiltonian(spec)
            ops = build_spin_operators(n)
            table = decompose(ham, ops, spec.hash_hex())
            state = build_state("product", table, spec=spec,
                                target_e=-0.1 * n / 6, target_m=0.15 * n, seed=8)
            reports.append(amc_check(state, ham, ops, table))
        slopes = amc_scaling(reports)
        assert set(slopes) == {"var_h", "var_sx", "var_sy", "var_sz"}
        for slope, _ in slopes.values():
            assert slope <= 1.6
