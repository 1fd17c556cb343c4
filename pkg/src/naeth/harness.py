"""Experiment orchestration: configs, caching, sweeps, CSV emission.

Config files are JSON with the following shape (all paths relative to the
invoking directory; every field shown with its default):

    {
      "model":    {"preset": "default", "j2": 0.4, "boundary": "open"}
                  -- or explicit couplings {"j1": [...], "j2": [...]}
                     (explicit couplings restrict the run to one size),
      "sizes":    [8, 10, 12],
      "operator": {"kind": "quadrupole", "sites": "middle", "q": 0},
      "state":    {"kind": "product", "energy_density": -0.05,
                   "magnetization_density": 0.2, "layers": 1},
      "ensemble": {"energy_density": -0.05, "magnetization_density": 0.2},
      "binning":  {"de": 0.5, "ds": 1.0, "min_count": 5, "domega": 0.5},
      "out_dir":  "out",
      "cache_dir": null,
      "seed":     0,
      "max_size": 14,
      "threads":  1
    }

CSV files use a long layout, one record per (size, observable), with
floats printed to 17 significant digits so runs round-trip losslessly and
byte-identically for a fixed config and seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .ensembles import (
    amc_check,
    build_state,
    solve_nats,
    thermal_average,
    time_average,
)
from .errors import InfeasibleTargetError, ValidationError
from .model import (
    DEFAULT_MAX_SITES,
    SpinModelSpec,
    build_hamiltonian,
    build_spin_operators,
)
from .spectral import (
    SpectrumTable,
    decompose,
    entropy_surface,
    load_spectrum,
    save_spectrum,
)
from .spin_algebra import cg_value
from .tensors import (
    build_tensor,
    eth_diagonal_fit,
    eth_offdiagonal_stats,
    ols_line,
    reduced_elements,
    spin_density_slope,
)

__all__ = [
    "ExperimentConfig",
    "ScalingResult",
    "load_config",
    "prepare_system",
    "run_thermalization_sweep",
    "run_anomaly_experiment",
    "run_suppl7_thermal",
    "run_eth_stats",
    "format_float",
    "write_csv",
]

_ZERO_DEVIATION_FLOOR = 1e-14


@dataclass(frozen=True)
class ExperimentConfig:
    model: dict
    sizes: tuple[int, ...]
    operator: dict
    state: dict
    ensemble: dict
    binning: dict
    out_dir: Path
    cache_dir: Path | None
    seed: int
    max_size: int
    threads: int

    def model_for_size(self, n: int) -> SpinModelSpec:
        m = self.model
        preset = m.get("preset")
        if preset == "default":
            return SpinModelSpec.default(n, seed=self.seed, j2=m.get("j2", 0.4))
        if preset == "ferromagnetic":
            return SpinModelSpec.ferromagnetic(n, seed=self.seed)
        if preset is not None:
            raise ValidationError(f"unknown model preset {preset!r}")
        if len(self.sizes) != 1:
            raise ValidationError("explicit couplings are only valid for a single size")
        return SpinModelSpec(
            n,
            tuple(m["j1"]),
            tuple(m.get("j2", [])),
            m.get("boundary", "open"),
            self.seed,
        )

    def operator_sites(self, n: int) -> tuple[int, ...]:
        kind = self.operator.get("kind", "quadrupole")
        sites = self.operator.get("sites", "middle")
        if sites == "middle":
            if kind == "dipole":
                return (n // 2,)
            if kind in ("quadrupole", "scalar"):
                return (n // 2 - 1, n // 2)
            return ()
        return tuple(int(s) for s in sites)

    def operator_for(self, n: int, ops):
        kind = self.operator.get("kind", "quadrupole")
        return build_tensor(kind, self.operator_sites(n), n, ops)

    @property
    def operator_q(self) -> int:
        return int(self.operator.get("q", 0))


def load_config(path: str | Path, **overrides) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    return make_config(raw, **overrides)


def make_config(raw: dict, **overrides) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ValidationError("config root must be a JSON object")
    raw = dict(raw)
    raw.update({k: v for k, v in overrides.items() if v is not None})
    sizes = tuple(int(n) for n in raw.get("sizes", (8, 10, 12)))
    if not sizes or list(sizes) != sorted(sizes):
        raise ValidationError("sizes must be a nonempty ascending list")
    max_size = int(raw.get("max_size", DEFAULT_MAX_SITES))
    if sizes[-1] > max_size:
        raise ValidationError(
            f"size {sizes[-1]} exceeds configured maximum {max_size}"
        )
    binning = {"de": 0.5, "ds": 1.0, "min_count": 5, "domega": 0.5}
    binning.update(raw.get("binning", {}))
    cache_dir = raw.get("cache_dir")
    return ExperimentConfig(
        model=raw.get("model", {"preset": "default"}),
        sizes=sizes,
        operator=raw.get("operator", {"kind": "quadrupole", "sites": "middle", "q": 0}),
        state=raw.get("state", {"kind": "product"}),
        ensemble=raw.get("ensemble", {}),
        binning=binning,
        out_dir=Path(raw.get("out_dir", "out")),
        cache_dir=Path(cache_dir) if cache_dir else None,
        seed=int(raw.get("seed", 0)),
        max_size=max_size,
        threads=int(raw.get("threads", 1)),
    )


def format_float(x: float) -> str:
    return f"{x:.17g}"


def write_csv(path: Path, header: list[str], rows: list[tuple]) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(",".join(header) + "\n")
        for row in rows:
            fh.write(
                ",".join(
                    format_float(v) if isinstance(v, float) else str(v) for v in row
                )
                + "\n"
            )
    return path


def _records_to_long_rows(records: list[dict]) -> list[tuple]:
    rows = []
    for rec in records:
        n = rec["n_sites"]
        for key, value in rec.items():
            if key == "n_sites":
                continue
            rows.append((n, key, value))
    return rows


def prepare_system(config: ExperimentConfig, n: int):
    """Build (spec, H, spin ops, spectrum table) for one size, with caching."""
    spec = config.model_for_size(n)
    ham = build_hamiltonian(spec, max_sites=config.max_size)
    ops = build_spin_operators(n, max_sites=config.max_size)
    table = None
    cache_path = None
    if config.cache_dir is not None:
        cache_path = config.cache_dir / f"spectrum_{spec.hash_hex()[:16]}_N{n}.bin"
        if cache_path.exists():
            cached = load_spectrum(cache_path)
            if cached.model_hash == spec.hash_hex():
                table = cached
    if table is None:
        table = decompose(ham, ops, spec.hash_hex(), threads=config.threads)
        if cache_path is not None:
            save_spectrum(table, cache_path)
    return spec, ham, ops, table


@dataclass(frozen=True)
class ScalingResult:
    label: str
    records: list[dict] = field(repr=False)
    slope: float | None
    slope_se: float | None
    n_zero_excluded: int
    skipped: tuple[tuple[int, str], ...]
    csv_path: Path | None


def _fit_deviation_slope(records: list[dict]):
    xs, ys = [], []
    zeros = 0
    for rec in records:
        dev = math.hypot(rec["deviation"], rec.get("deviation_imag", 0.0))
        scale = max(1.0, abs(rec["time_avg"]), abs(rec["thermal_avg"]))
        if dev <= _ZERO_DEVIATION_FLOOR * scale:
            zeros += 1
            continue
        xs.append(math.log(rec["n_sites"]))
        ys.append(math.log(dev))
    if len(xs) < 2:
        return None, None, zeros
    slope, _, se, _ = ols_line(np.array(xs), np.array(ys))
    return slope, se, zeros


def run_thermalization_sweep(config: ExperimentConfig) -> ScalingResult:
    """Time vs thermal averages of T^(k)_q0 on short-range-correlated states.

    For each size: build/load the spectrum, construct the product state at
    the configured densities, solve the thermal state at the state's
    measured (E, M), and record both averages plus their deviation. Both
    averages are recomputed through their independent routes (direct trace
    and explicit dephasing) as a verification pass.
    """
    state_cfg = config.state
    e_density = state_cfg.get("energy_density", -0.05)
    m_density = state_cfg.get("magnetization_density", 0.2)
    q = config.operator_q
    records = []
    skipped = []
    for n in config.sizes:
        spec, ham, ops, table = prepare_system(config, n)
        fam = config.operator_for(n, ops)
        try:
            state = build_state(
                "product",
                table,
                spec=spec,
                target_e=e_density * n,
                target_m=m_density * n,
                layers=state_cfg.get("layers", 1),
                twist_scale=state_cfg.get("twist_scale", 0.3),
                seed=config.seed,
            )
            report = amc_check(state, ham, ops, table)
            params = solve_nats(table, report.e, max(report.m, 0.0))
        except InfeasibleTargetError as exc:
            skipped.append((n, str(exc)))
            continue
        red = reduced_elements(fam, table, mode="diagonal")
        t_avg = complex(time_average(fam, q, state, table, red, cross_check=True))
        th_avg = thermal_average(fam, q, red, table, params, cross_check=True)
        records.append(
            {
                "n_sites": n,
                "target_e": e_density * n,
                "target_m": m_density * n,
                "state_e": report.e,
                "state_m": report.m,
                "beta": params.beta,
                "mu": params.mu,
                "time_avg": t_avg.real,
                "time_avg_imag": t_avg.imag,
                "thermal_avg": th_avg,
                "deviation": t_avg.real - th_avg,
                "deviation_imag": t_avg.imag,
            }
        )
    slope, se, zeros = _fit_deviation_slope(records)
    csv_path = write_csv(
        config.out_dir / "sweep.csv",
        ["n_sites", "observable", "value"],
        _records_to_long_rows(records),
    )
    return ScalingResult("thermalization_sweep", records, slope, se, zeros,
                         tuple(skipped), csv_path)


def _anomaly_prefactor(kind: str, rank: int, q: int, twice_spin: int, mbar: int | None):
    """Exact coupling-coefficient prefactor of the factorized time average."""
    s = twice_spin / 2.0
    if kind == "anomalous_a":
        return (1.0 / 3.0) * cg_value(s, s, s, s, rank, 0) + (2.0 / 3.0) * cg_value(
            s, -s / 2.0, s, -s / 2.0, rank, 0
        )
    if kind == "anomalous_b":
        if rank % 2 == 1:
            return 0.0
        return 0.5 * cg_value(s, mbar + 1, s, mbar, rank, 1)
    if kind == "low_spin":
        return 1.0
    raise ValidationError(f"unsupported anomaly state kind {kind!r}")


def run_anomaly_experiment(config: ExperimentConfig) -> ScalingResult:
    """Anomalous-thermalization scan for the rotationally noninvariant states.

    Emits, per size, the exact coupling prefactor, the diagonal reduced
    element it multiplies, both averages, and the residual of the
    factorization time_avg = prefactor * reduced.
    """
    kind = config.state.get("kind", "anomalous_a")
    q = config.operator_q
    rank_wanted = {"anomalous_a": 2, "anomalous_b": None, "low_spin": 0}
    records = []
    skipped = []
    for n in config.sizes:
        spec, ham, ops, table = prepare_system(config, n)
        fam = config.operator_for(n, ops)
        if kind == "anomalous_a" and (fam.rank != 2 or q != 0):
            raise ValidationError("anomalous_a expects a rank-2 operator with q = 0")
        if kind == "anomalous_b" and (fam.rank < 1 or q != 1):
            raise ValidationError("anomalous_b expects q = 1 and k >= 1")
        if kind == "low_spin" and (fam.rank != 0 or q != 0):
            raise ValidationError("low_spin expects a rank-0 operator with q = 0")
        try:
            state = build_state(
                kind,
                table,
                c=config.state.get("c", 1.0),
                **(
                    {"mbar": config.state["mbar"]}
                    if kind == "anomalous_b" and "mbar" in config.state
                    else {}
                ),
            )
        except ValidationError as exc:
            skipped.append((n, str(exc)))
            continue
        report = amc_check(state, ham, ops, table)
        params = solve_nats(table, report.e, 0.0)
        red = reduced_elements(fam, table, mode="diagonal")
        diag = red.diagonal()
        t_avg = complex(time_average(fam, q, state, table, red, cross_check=True))
        th_avg = thermal_average(fam, q, red, table, params, cross_check=True)

        support = sorted({label for label, _ in state.coeffs})
        weights = {label: 0.0 for label in support}
        for (label, _tm), c in state.coeffs.items():
            weights[label] += abs(c) ** 2
        if kind == "low_spin":
            reduced_val = sum(weights[l] * diag[l] for l in support)
            twice_spin = table.multiplets[support[0]].twice_spin
            mbar = None
        else:
            (label,) = support
            reduced_val = diag[label]
            twice_spin = table.multiplets[label].twice_spin
            mbar = None
            if kind == "anomalous_b":
                mbar = min(tm for _, tm in state.coeffs if tm > 0) // 2
        prefactor = _anomaly_prefactor(kind, fam.rank, q, twice_spin, mbar)
        records.append(
            {
                "n_sites": n,
                "spin": twice_spin / 2.0,
                "state_e": report.e,
                "cg_prefactor": prefactor,
                "reduced_element": reduced_val,
                "time_avg": t_avg,
                "thermal_avg": th_avg,
                "deviation": t_avg - th_avg,
                "decomposition_residual": t_avg - prefactor * reduced_val,
            }
        )
    slope, se, zeros = _fit_deviation_slope(records)
    csv_path = write_csv(
        config.out_dir / "anomaly.csv",
        ["n_sites", "observable", "value"],
        _records_to_long_rows(records),
    )
    return ScalingResult("anomaly_experiment", records, slope, se, zeros,
                         tuple(skipped), csv_path)


def run_suppl7_thermal(config: ExperimentConfig) -> ScalingResult:
    """Exact vs entropy-surface estimates of the k=0 thermal average at M=0.

    The exact column is the finite-size ensemble sum; the estimate column
    is intercept + slope * <S>, with (intercept, slope) from a linear fit
    of the diagonal elements against s in an energy window and <S> from
    the (2S+1)-weighted Boltzmann measure over entropy-surface bins.
    """
    q = config.operator_q
    e_density = config.ensemble.get("energy_density", -0.05)
    records = []
    skipped = []
    for n in config.sizes:
        spec, ham, ops, table = prepare_system(config, n)
        fam = config.operator_for(n, ops)
        if fam.rank != 0 or q != 0:
            raise ValidationError("this experiment needs a rank-0 operator with q = 0")
        target_e = e_density * n
        try:
            params = solve_nats(table, target_e, 0.0)
        except InfeasibleTargetError as exc:
            skipped.append((n, str(exc)))
            continue
        red = reduced_elements(fam, table, mode="diagonal")
        exact = thermal_average(fam, 0, red, table, params, cross_check=True)

        de = config.binning["de"]
        surface = entropy_surface(table, de=de, ds=config.binning["ds"])
        if len(surface.counts) < 3:
            raise ValidationError("entropy surface too sparse for the estimate")
        window = config.ensemble.get("fit_window", 4.0 * de)
        pts = [
            (m.twice_spin / 2.0, red.diagonal()[m.label])
            for m in table.multiplets
            if abs(m.energy - target_e) <= window
        ]
        if len(pts) < 8:
            skipped.append((n, f"only {len(pts)} multiplets in the fit window"))
            continue
        xs = np.array([p[0] for p in pts])
        ys = np.array([p[1] for p in pts])
        slope_s, intercept, *_ = ols_line(xs, ys)
        wsum = s_sum = 0.0
        for e_c, s_c, log_rho, count in surface.occupied_bins():
            w = count * (2.0 * s_c + 1.0) * math.exp(-params.beta * (e_c - target_e))
            wsum += w
            s_sum += w * s_c
        s_mean = s_sum / wsum
        estimate = intercept + slope_s * s_mean
        records.append(
            {
                "n_sites": n,
                "beta": params.beta,
                "exact_thermal": exact,
                "laplace_estimate": estimate,
                "gap": exact - estimate,
                "fit_intercept": intercept,
                "fit_slope": slope_s,
                "s_mean": s_mean,
            }
        )
    csv_path = write_csv(
        config.out_dir / "suppl7.csv",
        ["n_sites", "observable", "value"],
        _records_to_long_rows(records),
    )
    return ScalingResult("suppl7_thermal", records, None, None, 0,
                         tuple(skipped), csv_path)


def run_eth_stats(config: ExperimentConfig) -> dict:
    """Diagonal/off-diagonal ETH diagnostics, exported as CSV per size."""
    out = {"sizes": {}, "slope": None}
    per_size = []
    for n in config.sizes:
        spec, ham, ops, table = prepare_system(config, n)
        fam = config.operator_for(n, ops)
        red = reduced_elements(fam, table, mode="all")
        de = config.binning["de"] * float(np.median(np.abs(spec.nn_couplings)))
        fit = eth_diagonal_fit(red, table, de=de, ds=config.binning["ds"],
                               min_count=config.binning["min_count"])
        surface = entropy_surface(table, de=de, ds=config.binning["ds"])
        stats = eth_offdiagonal_stats(red, table, surface,
                                      domega=config.binning["domega"],
                                      min_count=config.binning["min_count"])
        e0 = min(m.energy for m in table.multiplets)
        element_rows = []
        for label, value in sorted(red.diagonal().items()):
            mult = table.multiplets[label]
            element_rows.append(
                (
                    label,
                    mult.energy,
                    mult.twice_spin / 2.0,
                    value,
                    int(np.floor((mult.energy - e0) / de)),
                    int(np.floor(mult.twice_spin / 2.0 / config.binning["ds"])),
                )
            )
        write_csv(
            config.out_dir / f"diag_elements_N{n}.csv",
            ["alpha", "energy", "spin", "value", "bin_e", "bin_s"],
            element_rows,
        )
        write_csv(
            config.out_dir / f"diag_fit_N{n}.csv",
            ["bin_e_center", "bin_s_center", "mean", "std", "count"],
            [(b.e_center, b.s_center, b.mean, b.std, b.count) for b in fit.records()],
        )
        write_csv(
            config.out_dir / f"offdiag_N{n}.csv",
            ["nu", "omega_center", "count", "mean_abs", "rms"],
            [
                (b.nu, b.omega_center, b.count, b.mean_abs, b.rms)
                for b in sorted(stats.bins.values(), key=lambda b: (b.nu, b.omega_center))
            ],
        )
        out["sizes"][n] = {
            "fit": fit,
            "offdiag": stats,
            "mid_spectrum_std": fit.mid_spectrum_fluctuation(),
            "residual_mean": stats.residual_mean,
            "residual_variance": stats.residual_variance,
        }
        per_size.append((n, red, table))
    if len(per_size) >= 3 and per_size[0][1].rank > 0:
        densities = np.concatenate(
            [t.energies() / n for n, _, t in per_size]
        )
        mid = 0.5 * (densities.min() + densities.max())
        span = densities.max() - densities.min()
        window = tuple(config.ensemble.get(
            "slope_window", (mid - 0.2 * span, mid + 0.2 * span)
        ))
        report = spin_density_slope(per_size, window)
        out["slope"] = report
        write_csv(
            config.out_dir / "spin_density_slope.csv",
            ["quantity", "value"],
            [
                ("slope", report.slope),
                ("slope_se", report.slope_se),
                ("intercept", report.intercept),
                ("intercept_se", report.intercept_se),
                ("n_points", report.n_points),
                ("rank", report.rank),
                ("window_lo", float(window[0])),
                ("window_hi", float(window[1])),
            ],
        )
    return out
