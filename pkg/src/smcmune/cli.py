"""Command-line interface.

Subcommands: simulate (synthetic data with ground truth), fit (one filter run
at a fixed unit count), select (stability protocol across unit counts),
report (summaries and bound-adjusted evidence from a fit result), oracle
(exact enumeration on tiny instances). Every output file gets a sidecar
``<name>.manifest.json`` carrying provenance and wall-clock timings; the
result files themselves are timing-free and byte-reproducible.

Exit codes: 0 success, 2 invalid input or config, 3 numerical failure,
4 resource cap hit. Failures print a one-line JSON error to stderr.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from .dataio import (
    fit_result_payload,
    levels_payload,
    load_config,
    load_series_csv,
    read_json,
    result_from_payload,
    save_series_csv,
    selection_payload,
    summaries_payload,
    write_json,
    write_manifest,
)
from .engine import smc_run
from .errors import NumericalError, ResourceCapError, SmcMuneError, ValidationError
from .model import ModelConfig
from .oracle import exact_log_ml
from .postprocess import (
    mixture_fire_curve,
    mixture_response_density,
    modal_firing_by_level,
    posterior_mixture_summaries,
    posterior_orthant,
    prior_orthant_log,
)
from .selection import select
from .simulate import detect_alternation, simulate_dataset, simulate_params

__all__ = ["main"]


def _print_error(kind: str, message, code: int) -> None:
    doc = {"error": {"type": kind, "message": str(message), "exit_code": code}}
    sys.stderr.write(json.dumps(doc, sort_keys=True) + "\n")


class _Parser(argparse.ArgumentParser):
    """argparse that reports its own errors in the same JSON shape."""

    def error(self, message):  # noqa: D102 - argparse hook
        _print_error("validation", f"{self.prog}: {message}", 2)
        raise SystemExit(2)


def _add_common(p: _Parser, *names: str) -> None:
    if "input" in names:
        p.add_argument("--input", required=True, help="input file path")
    if "output" in names:
        p.add_argument("--output", required=True, help="output file path")
    if "units" in names:
        p.add_argument("--units", type=int, required=True, help="number of motor units")
    if "u-max" in names:
        p.add_argument("--u-max", type=int, default=None, help="largest unit count considered")
    if "particles" in names:
        p.add_argument("--particles", type=int, default=None, help="particle count")
    if "grid" in names:
        p.add_argument("--grid", type=int, default=None, help="grid nodes per axis")
    if "seed" in names:
        p.add_argument("--seed", type=int, default=None, help="master seed")
    if "mu-min" in names:
        p.add_argument(
            "--mu-min", type=float, default=None,
            help="twitch-force lower bound in mN (0 disables the adjustment)",
        )
    if "lambda-max" in names:
        p.add_argument("--lambda-max", type=float, default=None, help="grid upper bound for lambda")
    if "config" in names:
        p.add_argument("--config", default=None, help="key=value config file")
    if "threads" in names:
        p.add_argument(
            "--threads", type=int, default=1,
            help="worker threads across runs (SMC_MUNE_THREADS overrides)",
        )


def _build_parser() -> _Parser:
    parser = _Parser(prog="smcmune", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset with known truth")
    p.add_argument("--units", type=int, required=True, help="true number of motor units")
    p.add_argument("--seed", type=int, default=0, help="generator seed")
    p.add_argument("--out", "--output", dest="out", required=True, help="output CSV path")
    p.add_argument("--truth", default=None, help="ground-truth JSON path (default: <out>.truth.json)")
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("fit", help="run the filter once at a fixed unit count")
    _add_common(p, "input", "output", "units", "particles", "grid", "seed", "mu-min", "lambda-max", "config")
    p.set_defaults(func=_cmd_fit)

    p = sub.add_parser("select", help="stability protocol and model posterior over unit counts")
    _add_common(p, "input", "output", "u-max", "particles", "grid", "seed", "mu-min", "lambda-max", "config", "threads")
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("report", help="summaries and adjusted evidence from a fit result")
    _add_common(p, "input", "output", "mu-min", "seed")
    p.set_defaults(func=_cmd_report)

    p = sub.add_parser("oracle", help="exact log evidence by enumeration (tiny instances)")
    _add_common(p, "input", "units", "grid", "config")
    p.add_argument("--output", default=None, help="optional JSON output (default: print)")
    p.set_defaults(func=_cmd_oracle)
    return parser


def _resolve_config(args) -> ModelConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ModelConfig()
    over = {}
    for attr, field in (
        ("particles", "n_particles0"),
        ("grid", "grid_n0"),
        ("seed", "seed"),
        ("mu_min", "mu_min"),
        ("lambda_max", "lambda_max"),
        ("u_max", "u_max"),
    ):
        v = getattr(args, attr, None)
        if v is not None:
            over[field] = v
    return cfg.with_overrides(**over) if over else cfg


def _thread_count(args) -> int:
    env = os.environ.get("SMC_MUNE_THREADS")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise ValidationError(
                f"SMC_MUNE_THREADS must be an integer, got {env!r}"
            ) from None
    return int(getattr(args, "threads", 1))


# ---------------------------------------------------------------------------
# subcommands


def _cmd_simulate(args) -> int:
    started = time.perf_counter()
    if args.units < 1:
        raise ValidationError("--units must be >= 1")
    rng = np.random.default_rng(args.seed)
    system = simulate_params(args.units, rng)
    series, latents = simulate_dataset(system, None, rng, return_latents=True)
    save_series_csv(args.out, series)
    truth_path = args.truth or str(Path(args.out).with_suffix("")) + ".truth.json"
    alternating, intervals = detect_alternation(system)
    write_json(
        truth_path,
        {
            "format": "smcmune-truth/1",
            "u_star": system.u_star,
            "etas": system.etas,
            "lams": system.lams,
            "mus": system.mus,
            "nu_inv": system.nu_inv,
            "mu_bar": system.mu_bar,
            "nu_bar_inv": system.nu_bar_inv,
            "curve": system.curve,
            "seed": args.seed,
            "alternating": alternating,
            "alternation_intervals": [list(iv) for iv in intervals],
            "tau": series.tau,
            "latents": {
                "firing": latents.firing,
                "unit_draws": latents.unit_draws,
                "baseline_draws": latents.baseline_draws,
            },
        },
    )
    write_manifest(
        args.out, command="simulate", config=None, outputs=[args.out, truth_path],
        seed=args.seed, started=started,
    )
    return 0


def _cmd_fit(args) -> int:
    started = time.perf_counter()
    series = load_series_csv(args.input)
    cfg = _resolve_config(args)
    run = smc_run(series, args.units, config=cfg, rng_seed=cfg.seed)
    if run.annihilated:
        raise NumericalError(
            f"every particle weight vanished at observation {run.diagnostics.annihilated_at}; "
            "the model cannot explain the series at this unit count"
        )
    summaries = posterior_mixture_summaries(run)
    write_json(args.output, fit_result_payload(run, series, summaries))
    write_manifest(
        args.output, command="fit", config=cfg, inputs=[args.input],
        outputs=[args.output], seed=cfg.seed, started=started,
    )
    return 0


def _cmd_select(args) -> int:
    started = time.perf_counter()
    series = load_series_csv(args.input)
    cfg = _resolve_config(args)
    sel = select(series, cfg, threads=_thread_count(args))
    write_json(args.output, selection_payload(sel))
    write_manifest(
        args.output, command="select", config=cfg, inputs=[args.input],
        outputs=[args.output], seed=cfg.seed, started=started,
    )
    if sel.capped:
        _print_error(
            "resource_cap",
            "stability protocol hit a particle or grid cap; results written but not converged",
            4,
        )
        return 4
    return 0


def _write_levels_csv(path, rows, u: int) -> None:
    import csv as _csv

    with Path(path).open("w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(
            ["level", "n_obs", "response_mean_mN", "response_min_mN", "response_max_mN"]
            + [f"fires_unit_{k}" for k in range(1, u + 1)]
        )
        for r in rows:
            w.writerow(
                [r.level, r.n_obs, repr(r.response_mean), repr(r.response_min), repr(r.response_max)]
                + list(r.firing)
            )


def _write_excitability_csv(path, run, series) -> None:
    import csv as _csv

    s_grid = np.linspace(0.0, float(series.supramax_stimulus), 85)[1:]
    curves = mixture_fire_curve(run, s_grid)
    with Path(path).open("w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["unit", "stimulus_volts", "fire_probability"])
        for k in range(curves.shape[0]):
            for s, p in zip(s_grid, curves[k]):
                w.writerow([k + 1, repr(float(s)), repr(float(p))])


def _write_predictive_csv(path, run, series) -> None:
    import csv as _csv

    s_star = float(np.median(series.post_stimuli))
    y = series.responses
    pad = 0.05 * float(y.max() - y.min()) + 1.0
    y_grid = np.linspace(float(y.min()) - pad, float(y.max()) + pad, 241)
    dens = mixture_response_density(run, s_star, y_grid)
    with Path(path).open("w", newline="") as f:
        w = _csv.writer(f)
        w.writerow(["response_mN", "predictive_density", "stimulus_volts"])
        for yv, dv in zip(y_grid, dens):
            w.writerow([repr(float(yv)), repr(float(dv)), repr(s_star)])


def _cmd_report(args) -> int:
    started = time.perf_counter()
    payload = read_json(args.input)
    run, series = result_from_payload(payload)
    if run.annihilated:
        raise NumericalError("fit result is annihilated; nothing to report")
    mu_min = run.config.mu_min if args.mu_min is None else float(args.mu_min)
    seed = run.seed if args.seed is None else int(args.seed)

    summaries = posterior_mixture_summaries(run)
    levels = modal_firing_by_level(run, series)

    if mu_min == 0.0 or mu_min == -math.inf:
        adjusted = run.log_ml
        log_prior = 0.0
        post_p, post_se = 1.0, 0.0
    else:
        log_prior = prior_orthant_log(run.u, run.config, run.nu_prior_b, mu_min)
        post_p, post_se = posterior_orthant(run, mu_min, np.random.default_rng(seed))
        log_post = math.log(post_p) if post_p > 0.0 else -math.inf
        adjusted = run.log_ml + log_post - log_prior

    stem = str(args.output)
    if stem.endswith(".json"):
        stem = stem[: -len(".json")]
    levels_csv = stem + "_levels.csv"
    excit_csv = stem + "_excitability.csv"
    pred_csv = stem + "_predictive.csv"
    _write_levels_csv(levels_csv, levels, run.u)
    _write_excitability_csv(excit_csv, run, series)
    _write_predictive_csv(pred_csv, run, series)

    write_json(
        args.output,
        {
            "format": "smcmune-report/1",
            "u": run.u,
            "log_ml": run.log_ml,
            "adjusted_log_ml": adjusted,
            "mu_min": mu_min,
            "prior_orthant_log": log_prior,
            "posterior_orthant": {"prob": post_p, "se": post_se},
            "parameter_summaries": summaries_payload(summaries),
            "levels": levels_payload(levels),
            "sidecars": {
                "levels_csv": levels_csv,
                "excitability_csv": excit_csv,
                "predictive_csv": pred_csv,
            },
        },
    )
    write_manifest(
        args.output, command="report", config=run.config, inputs=[args.input],
        outputs=[args.output, levels_csv, excit_csv, pred_csv],
        seed=seed, started=started,
    )
    return 0


def _cmd_oracle(args) -> int:
    started = time.perf_counter()
    series = load_series_csv(args.input)
    cfg = _resolve_config(args)
    grid_n = args.grid if args.grid is not None else cfg.grid_n0
    value = exact_log_ml(series, args.units, grid_n, cfg)
    if args.output:
        write_json(
            args.output,
            {"format": "smcmune-oracle/1", "u": args.units, "grid_n": grid_n, "log_ml": value},
        )
        write_manifest(
            args.output, command="oracle", config=cfg, inputs=[args.input],
            outputs=[args.output], seed=None, started=started,
        )
    else:
        print(repr(float(value)))
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except ValidationError as e:
        _print_error("validation", e, 2)
        return 2
    except ResourceCapError as e:
        _print_error("resource_cap", e, 4)
        return 4
    except NumericalError as e:
        _print_error("numerical", e, 3)
        return 3
    except SmcMuneError as e:  # pragma: no cover - base-class safety net
        _print_error("error", e, 2)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
