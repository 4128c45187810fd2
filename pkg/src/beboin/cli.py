"""Command-line entry point.

Subcommands: boundaries, table, estimate, decide, select, simulate,
scenarios.  Output goes to stdout in csv by default (``--format json|md``
switches renderers, ``--out`` redirects to a file); the resolved
configuration is echoed to stderr as one JSON line so every run is
reproducible from its own transcript.  Exit codes: 0 success, 1 domain
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys

import jsonschema

from .boundaries import boin_boundaries
from .core import (
    ConfigError,
    DesignConfig,
    summarize_all,
    validate_config,
)
from .document import config_to_dict, document_to_state
from .engine import (
    StateError,
    backfill_eligibility,
    conflict_to_dict,
    de_decision,
    decision_due,
    decision_event,
    selection_report,
)
from .estimator import imputed_dlt_rate
from .sim import (
    MODE_BE_BOIN,
    MODE_BF_BOIN,
    MODE_TITE_BOIN,
    Accrual,
    CalibrationError,
    load_scenario,
    oc_to_dict,
    run_oc,
    scenario_library,
    scenario_to_dict,
)
from .tablegen import generate_table, parse_csv, render_csv, render_table

MODES = (MODE_BE_BOIN, MODE_TITE_BOIN, MODE_BF_BOIN)


# --------------------------------------------------------------------------
# output helpers


def _csv_line(values: list) -> str:
    out = []
    for v in values:
        if v is None:
            out.append("")
        elif isinstance(v, float):
            out.append(repr(v))
        else:
            out.append(str(v))
    return ",".join(out)


def _csv(header: list[str], rows: list[list]) -> str:
    lines = [",".join(header)]
    lines.extend(_csv_line(row) for row in rows)
    return "\n".join(lines) + "\n"


def _md(header: list[str], rows: list[list]) -> str:
    lines = ["| " + " | ".join(header) + " |"]
    lines.append("|" + "|".join([" --- "] * len(header)) + "|")
    for row in rows:
        cells = ["" if v is None else str(v) for v in row]
        lines.append("| " + " | ".join(cells) + " |")
    return "\n".join(lines) + "\n"


def _render(fmt: str, header: list[str], rows: list[list], payload: dict) -> str:
    if fmt == "json":
        return json.dumps(payload, sort_keys=True, indent=1) + "\n"
    if fmt == "md":
        return _md(header, rows)
    return _csv(header, rows)


def _emit(text: str, out_path: str | None) -> None:
    if out_path:
        with open(out_path, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def _echo_config(name: str, resolved: dict) -> None:
    print(
        "config " + json.dumps({"subcommand": name, **resolved}, sort_keys=True),
        file=sys.stderr,
    )


# --------------------------------------------------------------------------
# shared flag groups


def _design_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--phi", type=float, default=0.25, help="target DLT rate")
    parser.add_argument(
        "--phi1-factor",
        type=float,
        default=0.6,
        help="sub-therapeutic rate as a multiple of phi",
    )
    parser.add_argument(
        "--phi2-factor",
        type=float,
        default=1.4,
        help="over-toxic rate as a multiple of phi",
    )


def _io_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--format", choices=("csv", "json", "md"), default="csv", help="output renderer"
    )
    parser.add_argument("--out", default=None, help="write output to this path")


def _load_state(path: str):
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    return document_to_state(doc)


# --------------------------------------------------------------------------
# subcommands


def _cmd_boundaries(args: argparse.Namespace) -> int:
    phi = args.phi
    phi1 = args.phi1_factor * phi
    phi2 = args.phi2_factor * phi
    b = boin_boundaries(phi, phi1, phi2)
    _echo_config("boundaries", {"phi": phi, "phi1": phi1, "phi2": phi2})
    header = ["phi", "phi1", "phi2", "lambda_e", "lambda_d"]
    row = [phi, phi1, phi2, b.lambda_e, b.lambda_d]
    payload = dict(zip(header, row))
    _emit(_render(args.format, header, [row], payload), args.out)
    return 0


def _table_config(args: argparse.Namespace) -> DesignConfig:
    return validate_config(
        DesignConfig(
            num_doses=1,
            phi=args.phi,
            phi1=args.phi1_factor * args.phi,
            phi2=args.phi2_factor * args.phi,
            cohort_size=args.cohort,
            n_stage1=args.nmax,
        )
    )


def _cmd_table(args: argparse.Namespace) -> int:
    cfg = _table_config(args)
    _echo_config("table", config_to_dict(cfg))
    rows = generate_table(cfg, n_max=args.nmax)
    if args.format == "json":
        text = json.dumps(parse_csv(render_csv(rows)), sort_keys=True, indent=1) + "\n"
    else:
        text = render_table(rows, fmt="markdown" if args.format == "md" else args.format)
    _emit(text, args.out)
    return 0


def _cmd_estimate(args: argparse.Namespace) -> int:
    state = _load_state(args.state)
    cfg = state.config
    _echo_config("estimate", {**config_to_dict(cfg), "state": args.state})
    observed_only = args.mode == MODE_BF_BOIN
    summaries = summarize_all(state, state.clock, include_pending=not observed_only)
    header = [
        "dose",
        "n",
        "dlt_observed",
        "pending",
        "completed",
        "tf",
        "mf",
        "responses",
        "observed_fraction",
        "posterior_mean",
        "imputed_rate",
    ]
    rows = []
    for s in summaries:
        est = imputed_dlt_rate(s, cfg.phi)
        rows.append(
            [
                s.dose,
                s.n,
                s.dlt_observed,
                s.pending,
                s.completed,
                s.tf,
                s.mf,
                s.responses,
                s.observed_fraction,
                est.posterior_mean,
                est.imputed_rate,
            ]
        )
    payload = {
        "clock": state.clock,
        "doses": [dict(zip(header, row)) for row in rows],
    }
    _emit(_render(args.format, header, rows, payload), args.out)
    return 0


def _cmd_decide(args: argparse.Namespace) -> int:
    state = _load_state(args.state)
    _echo_config(
        "decide",
        {**config_to_dict(state.config), "state": args.state, "mode": args.mode},
    )
    observed_only = args.mode == MODE_BF_BOIN
    decision = de_decision(state, state.clock, observed_only=observed_only)
    eligibility = backfill_eligibility(state, state.clock, observed_only=observed_only)
    header = [
        "verdict",
        "target_dose",
        "current_dose",
        "time",
        "due",
        "suspend_reason",
        "conflict",
        "pooled_estimate",
    ]
    conflict = decision.conflict
    row = [
        decision.verdict.value,
        decision.target_dose,
        decision.current_dose,
        decision.at_time,
        decision_due(state),
        decision.suspend_reason,
        conflict.b_star if conflict and conflict.conflict else None,
        decision.pooled_estimate,
    ]
    payload = dict(zip(header, row))
    payload["trace"] = list(decision.trace)
    payload["backfill_eligibility"] = [dataclasses.asdict(e) for e in eligibility]
    if conflict:
        payload["conflict"] = conflict_to_dict(conflict)
    payload["event"] = decision_event(decision)
    _emit(_render(args.format, header, [row], payload), args.out)
    return 0


def _cmd_select(args: argparse.Namespace) -> int:
    state = _load_state(args.state)
    cfg = state.config
    _echo_config("select", {**config_to_dict(cfg), "state": args.state})
    report = selection_report(state)
    header = [
        "dose",
        "n",
        "dlt",
        "raw_rate",
        "fitted_rate",
        "utility",
        "is_mtd",
        "is_obd",
    ]
    fit = report["fit"]
    raw = dict(zip(fit["doses"], fit["raw_rates"]))
    fitted = dict(zip(fit["doses"], fit["fitted"]))
    utility = {u["dose"]: u["utility"] for u in report["utilities"]}
    rows = []
    for d in range(1, cfg.num_doses + 1):
        rows.append(
            [
                d,
                report["n"][d - 1],
                report["dlt"][d - 1],
                raw.get(d),
                fitted.get(d),
                utility.get(d),
                d == report["mtd"],
                d == report["obd"],
            ]
        )
    payload = {**report, "doses": [dict(zip(header, row)) for row in rows]}
    _emit(_render(args.format, header, rows, payload), args.out)
    return 0


def _cmd_simulate(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    if args.rate is not None:
        scenario = dataclasses.replace(
            scenario, accrual=Accrual(kind=scenario.accrual.kind, rate=args.rate)
        )
    window = args.window
    if window is None:
        window = scenario.dlt_window_months or 3.0
    cfg = validate_config(
        DesignConfig(
            num_doses=len(scenario.p_tox),
            phi=args.phi,
            phi1=args.phi1_factor * args.phi,
            phi2=args.phi2_factor * args.phi,
            cohort_size=args.cohort,
            n_stage1=args.nmax,
            backfill_cap=args.ncap,
            dlt_window_months=window,
        )
    )
    _echo_config(
        "simulate",
        {
            **config_to_dict(cfg),
            "scenario": scenario.id,
            "mode": args.mode,
            "reps": args.reps,
            "seed": args.seed,
            "accrual_rate": scenario.accrual.rate,
        },
    )
    oc = run_oc(cfg, scenario, args.mode, replicates=args.reps, seed=args.seed)
    doc = oc_to_dict(oc)
    if args.format == "json":
        text = json.dumps(doc, sort_keys=True, indent=1) + "\n"
    else:
        header, row = [], []
        for key, value in sorted(doc.items()):
            if isinstance(value, (list, tuple)):
                for i, v in enumerate(value, start=1):
                    header.append(f"{key}_{i}")
                    row.append(v)
            else:
                header.append(key)
                row.append(value)
        text = _md(["metric", "value"], list(zip(header, row))) if args.format == "md" else _csv(header, [row])
    _emit(text, args.out)
    return 0


def _cmd_scenarios(args: argparse.Namespace) -> int:
    library = scenario_library()
    _echo_config("scenarios", {"count": len(library)})
    header = [
        "id",
        "p_tox",
        "p_eff",
        "true_mtd",
        "true_obd",
        "tte_model",
        "late_fraction",
        "accrual_rate",
        "dlt_window_months",
    ]
    rows = []
    for sid in sorted(library, key=lambda k: (len(k), k)):
        s = library[sid]
        rows.append(
            [
                s.id,
                ";".join(repr(p) for p in s.p_tox),
                ";".join(repr(p) for p in s.p_eff),
                s.true_mtd,
                s.true_obd,
                s.tte_model,
                s.late_fraction,
                s.accrual.rate,
                s.dlt_window_months,
            ]
        )
    payload = {
        "scenarios": [
            scenario_to_dict(library[sid])
            for sid in sorted(library, key=lambda k: (len(k), k))
        ]
    }
    _emit(_render(args.format, header, rows, payload), args.out)
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="beboin",
        description=(
            "BOIN-family dose-finding tools: interval boundaries, decision "
            "tables, imputed estimates, live-trial decisions, MTD/OBD "
            "selection, and Monte Carlo operating characteristics."
        ),
    )
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("boundaries", help="escalation/de-escalation boundaries")
    _design_flags(p)
    _io_flags(p)
    p.set_defaults(func=_cmd_boundaries)

    p = sub.add_parser("table", help="pre-tabulated decision table")
    _design_flags(p)
    p.add_argument("--cohort", type=int, default=3, help="cohort size")
    p.add_argument("--nmax", type=int, default=9, help="largest per-dose count tabulated")
    _io_flags(p)
    p.set_defaults(func=_cmd_table)

    p = sub.add_parser("estimate", help="per-dose imputed DLT estimates from a trial state")
    p.add_argument("--state", required=True, help="trial-state document (json)")
    p.add_argument("--mode", choices=MODES, default=MODE_BE_BOIN)
    _io_flags(p)
    p.set_defaults(func=_cmd_estimate)

    p = sub.add_parser("decide", help="dose-transition decision for a trial state")
    p.add_argument("--state", required=True, help="trial-state document (json)")
    p.add_argument("--mode", choices=MODES, default=MODE_BE_BOIN)
    _io_flags(p)
    p.set_defaults(func=_cmd_decide)

    p = sub.add_parser("select", help="MTD/OBD selection from a final trial state")
    p.add_argument("--state", required=True, help="trial-state document (json)")
    _io_flags(p)
    p.set_defaults(func=_cmd_select)

    p = sub.add_parser("simulate", help="Monte Carlo operating characteristics")
    _design_flags(p)
    p.add_argument("--cohort", type=int, default=3, help="cohort size")
    p.add_argument("--nmax", type=int, default=None, help="stage-I escalation sample size")
    p.add_argument("--ncap", type=int, default=12, help="per-dose sample cap for backfill")
    p.add_argument("--window", type=float, default=None, help="DLT window (months)")
    p.add_argument("--rate", type=float, default=None, help="accrual rate (patients/month)")
    p.add_argument("--reps", type=int, default=1000, help="Monte Carlo replicates")
    p.add_argument("--seed", type=int, default=0, help="random seed")
    p.add_argument("--mode", choices=MODES, default=MODE_BE_BOIN)
    p.add_argument("--scenario", required=True, help="library id or a scenario json path")
    _io_flags(p)
    p.set_defaults(func=_cmd_simulate)

    p = sub.add_parser("scenarios", help="list the built-in scenario library")
    _io_flags(p)
    p.set_defaults(func=_cmd_scenarios)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse exits 2 on usage errors, 0 on --help
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error config: {exc}", file=sys.stderr)
    except StateError as exc:
        print(f"error state: {exc}", file=sys.stderr)
    except jsonschema.ValidationError as exc:
        print(f"error state: {exc.message}", file=sys.stderr)
    except CalibrationError as exc:
        print(f"error calibration: {exc}", file=sys.stderr)
    except FileNotFoundError as exc:
        print(f"error io: {exc}", file=sys.stderr)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error io: {exc}", file=sys.stderr)
    except KeyError as exc:
        print(f"error value: {exc.args[0] if exc.args else exc}", file=sys.stderr)
    except ValueError as exc:
        print(f"error value: {exc}", file=sys.stderr)
    return 1


if __name__ == "__main__":
    sys.exit(main())
