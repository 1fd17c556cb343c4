"""Command-line entry point.

Subcommands: spectrum, cg, eth-stats, thermal, time-avg, sweep, anomaly.
Exit codes: 0 success, 1 validation/usage error, 2 solver or resource
error. The worker-pool width comes from --threads, the NAETH_THREADS
environment variable, or the config, in that order of precedence.
"""

from __future__ import annotations

import argparse
import os
import sys

from .errors import NaethError, ValidationError
from .harness import (
    format_float,
    load_config,
    prepare_system,
    run_anomaly_experiment,
    run_eth_stats,
    run_suppl7_thermal,
    run_thermalization_sweep,
)
from .spin_algebra import CGKey, cg_asymptotic, cg_exact


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _add_config_options(parser):
    parser.add_argument("--config", required=True, help="JSON experiment config")
    parser.add_argument("--cache-dir", default=None, help="spectrum cache directory")
    parser.add_argument("--out-dir", default=None, help="CSV output directory")
    parser.add_argument("--seed", type=int, default=None, help="override config seed")
    parser.add_argument("--threads", type=int, default=None, help="worker pool width")


def build_parser() -> _Parser:
    parser = _Parser(prog="naeth", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_spec = sub.add_parser("spectrum", help="diagonalize and cache spectra")
    _add_config_options(p_spec)

    p_cg = sub.add_parser("cg", help="print a coupling coefficient")
    p_cg.add_argument("--s", required=True)
    p_cg.add_argument("--m", required=True)
    p_cg.add_argument("--sp", required=True)
    p_cg.add_argument("--mp", required=True)
    p_cg.add_argument("--k", required=True)
    p_cg.add_argument("--q", required=True)

    for name, help_text in (
        ("eth-stats", "diagonal/off-diagonal ETH diagnostics"),
        ("thermal", "thermal averages of the configured operator"),
        ("time-avg", "infinite-time averages in the configured state"),
        ("sweep", "thermalization sweep across sizes"),
        ("anomaly", "anomalous-thermalization experiment"),
    ):
        p = sub.add_parser(name, help=help_text)
        _add_config_options(p)
    return parser


def _resolve_config(args):
    threads = args.threads
    if threads is None and "NAETH_THREADS" in os.environ:
        try:
            threads = int(os.environ["NAETH_THREADS"])
        except ValueError as exc:
            raise ValidationError(
                f"NAETH_THREADS must be an integer, got {os.environ['NAETH_THREADS']!r}"
            ) from exc
    return load_config(
        args.config,
        cache_dir=args.cache_dir,
        out_dir=args.out_dir,
        seed=args.seed,
        threads=threads,
    )


def _cmd_cg(args) -> int:
    key = CGKey.of(args.s, args.m, args.sp, args.mp, args.k, args.q)
    value = cg_exact(key)
    print(format_float(float(value)))
    print(f"exact: sign={value.sign} square={value.rational_square}")
    if (
        key.s == key.s_prime
        and key.k.is_integer
        and key.s.twice_value >= max(2, key.k.twice_value)
        and abs(key.q.twice_value) <= key.k.twice_value
    ):
        approx = cg_asymptotic(key.s, key.m_prime, key.k, key.q)
        flag = " (outside regime)" if approx.regime_warning else ""
        print(
            f"asymptotic: {format_float(approx.value)} "
            f"rel-err~{format_float(approx.error_estimate)}{flag}"
        )
    return 0


def _cmd_spectrum(args) -> int:
    config = _resolve_config(args)
    for n in config.sizes:
        spec, _, _, table = prepare_system(config, n)
        counts = {}
        for mult in table.multiplets:
            counts[mult.twice_spin] = counts.get(mult.twice_spin, 0) + 1
        summary = ", ".join(f"s={ts / 2:g}: {c}" for ts, c in sorted(counts.items()))
        print(f"N={n} hash={spec.hash_hex()[:16]} multiplets: {summary}")
    return 0


def _cmd_sweep(args) -> int:
    result = run_thermalization_sweep(_resolve_config(args))
    _print_scaling(result)
    return 0


def _cmd_anomaly(args) -> int:
    config = _resolve_config(args)
    if config.state.get("kind") == "suppl7":
        result = run_suppl7_thermal(config)
        for rec in result.records:
            print(
                f"N={rec['n_sites']} exact={format_float(rec['exact_thermal'])} "
                f"estimate={format_float(rec['laplace_estimate'])} "
                f"gap={format_float(rec['gap'])}"
            )
        _print_skips(result)
        print(f"wrote {result.csv_path}")
        return 0
    result = run_anomaly_experiment(config)
    _print_scaling(result)
    return 0


def _cmd_eth_stats(args) -> int:
    config = _resolve_config(args)
    out = run_eth_stats(config)
    for n, info in out["sizes"].items():
        print(
            f"N={n} mid-spectrum bin std={format_float(info['mid_spectrum_std'])} "
            f"residual mean={format_float(info['residual_mean'])} "
            f"variance={format_float(info['residual_variance'])}"
        )
    if out["slope"] is not None:
        rep = out["slope"]
        print(
            f"spin-density slope={format_float(rep.slope)} "
            f"+- {format_float(rep.slope_se)} "
            f"intercept={format_float(rep.intercept)} +- {format_float(rep.intercept_se)}"
        )
    print(f"CSV written to {config.out_dir}")
    return 0


def _cmd_thermal(args) -> int:
    from .ensembles import solve_nats, thermal_average
    from .tensors import reduced_elements

    config = _resolve_config(args)
    e_density = config.ensemble.get("energy_density", -0.05)
    m_density = config.ensemble.get("magnetization_density", 0.0)
    for n in config.sizes:
        _, _, ops, table = prepare_system(config, n)
        fam = config.operator_for(n, ops)
        params = solve_nats(table, e_density * n, m_density * n)
        red = reduced_elements(fam, table, mode="diagonal")
        values = {
            q: thermal_average(fam, q, red, table, params)
            for q in range(-fam.rank, fam.rank + 1)
        }
        printable = " ".join(f"q={q}: {format_float(v)}" for q, v in values.items())
        print(f"N={n} beta={format_float(params.beta)} mu={format_float(params.mu)} {printable}")
    return 0


def _cmd_time_avg(args) -> int:
    from .ensembles import build_state, time_average
    from .tensors import reduced_elements

    config = _resolve_config(args)
    q = config.operator_q
    for n in config.sizes:
        spec, ham, ops, table = prepare_system(config, n)
        fam = config.operator_for(n, ops)
        red = reduced_elements(fam, table, mode="diagonal")
        state_cfg = dict(config.state)
        kind = state_cfg.pop("kind", "product")
        if kind == "product":
            state_cfg = {
                "spec": spec,
                "target_e": state_cfg.get("energy_density", -0.05) * n,
                "target_m": state_cfg.get("magnetization_density", 0.2) * n,
                "layers": state_cfg.get("layers", 1),
                "seed": config.seed,
            }
        value = time_average(fam, q, build_state(kind, table, **state_cfg), table, red)
        print(f"N={n} time_avg[q={q}]={format_float(value)}")
    return 0


def _print_scaling(result) -> None:
    for rec in result.records:
        print(
            f"N={rec['n_sites']} time={format_float(rec['time_avg'])} "
            f"thermal={format_float(rec['thermal_avg'])} "
            f"deviation={format_float(rec['deviation'])}"
        )
    if result.slope is not None:
        print(
            f"log-log slope of |deviation| vs N: {format_float(result.slope)} "
            f"+- {format_float(result.slope_se)} "
            f"({result.n_zero_excluded} zero deviations excluded)"
        )
    _print_skips(result)
    print(f"wrote {result.csv_path}")


def _print_skips(result) -> None:
    for n, reason in result.skipped:
        print(f"warning: N={n} skipped: {reason}", file=sys.stderr)


_COMMANDS = {
    "cg": _cmd_cg,
    "spectrum": _cmd_spectrum,
    "sweep": _cmd_sweep,
    "anomaly": _cmd_anomaly,
    "eth-stats": _cmd_eth_stats,
    "thermal": _cmd_thermal,
    "time-avg": _cmd_time_avg,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return _COMMANDS[args.command](args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NaethError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
