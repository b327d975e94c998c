"""Command-line entry point: ``softbct <command> [options]``.

Exit status is 0 on success, 1 for usage, config or data errors and 2 when
the numerics fail (non-finite values, a posterior rate that collapses).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import RunConfig, available_presets, load_config, load_preset
from .data import DEFAULT_REGIMES, load_csv, simulate_lstar, simulate_setar
from .errors import CapExceededError, ConfigError, DataError, NumericalError
from .inference import fit, sequential_update
from .predict import evaluate_mse, format_map_report, predict, report_map_model
from .serialize import dumps, load_model

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 by default; 2 is reserved for numeric failures here
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _float_list(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _grid(text: str) -> list[float]:
    values = _float_list(text)
    if not values:
        raise argparse.ArgumentTypeError("the threshold grid is empty")
    return values


def _add_config_options(p: argparse.ArgumentParser) -> None:
    src = p.add_mutually_exclusive_group()
    src.add_argument("--config", type=Path, help="TOML or JSON run config")
    src.add_argument("--preset", help="named preset (" + ", ".join(available_presets()) + ")")
    p.add_argument("--mode", choices=("soft", "hard"), help="gating mode")
    p.add_argument("--restricted-weights", action="store_true", help="gate node at depth d on lag d+1 only")
    th = p.add_mutually_exclusive_group()
    th.add_argument("--thresholds", type=_float_list, help="comma-separated gate thresholds (M-1 values)")
    th.add_argument("--threshold-grid", type=_grid, help="candidate thresholds; the best is chosen on training data")
    p.add_argument("--max-iters", type=int, help="maximum number of sweeps")
    p.add_argument("--tol", type=float, help="convergence tolerance")
    p.add_argument("--seed", type=int, help="recorded in the output for provenance")


def _add_data_options(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", type=Path, required=True, help="one-column CSV series")
    p.add_argument(
        "--context-rows",
        type=int,
        default=0,
        help="treat the first N rows as initial context; without it the context is mean-padded",
    )


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="softbct", description="Soft Bayesian context tree models for time series.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic regime-switching series")
    p.add_argument("--kind", choices=("setar", "lstar"), default="setar")
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--thresholds", type=_float_list, default=[0.0], help="SETAR thresholds")
    p.add_argument("--threshold", type=float, default=0.0, help="LSTAR transition point")
    p.add_argument("--steepness", type=float, default=2.0, help="LSTAR transition steepness")
    p.add_argument("--delay", type=int, default=1)
    p.add_argument("--regimes", type=Path, help="JSON list of {coef, sd} regimes")
    p.add_argument("--n-context", type=int, default=10, help="leading context rows written to the CSV")
    p.add_argument("--out", type=Path, required=True, help="CSV to write (context rows first)")
    p.add_argument("--truth", type=Path, help="JSON file for the generator spec and regime labels")

    p = sub.add_parser("fit", help="fit a model and write it as JSON")
    _add_config_options(p)
    _add_data_options(p)
    p.add_argument("--out", type=Path, required=True, help="model JSON to write")

    p = sub.add_parser("predict", help="one-step forecasts from a fitted model")
    p.add_argument("--model", type=Path, required=True)
    _add_data_options(p)
    p.add_argument("--update", action="store_true", help="absorb each observation after predicting it")
    p.add_argument("--out", type=Path, required=True, help="CSV with columns t, actual, prediction")

    p = sub.add_parser("evaluate", help="fit on a prefix, then predict and update on the rest")
    _add_config_options(p)
    _add_data_options(p)
    p.add_argument("--split", type=float, default=0.5, help="training fraction")
    p.add_argument("--batch", action="store_true", help="do not update the model on test points")
    p.add_argument("--inner-iters", type=int, help="routing refinements per streamed point")
    p.add_argument("--out", type=Path, help="JSON report")
    p.add_argument("--text", type=Path, help="plain-text report")
    p.add_argument("--predictions-csv", type=Path, help="per-point predictions")
    p.add_argument("--timing", action="store_true", help="include wall-clock runtime in the reports")

    p = sub.add_parser("map-tree", help="print the MAP tree of a fitted model")
    p.add_argument("--model", type=Path, required=True)
    p.add_argument("--json", type=Path, help="also write the report as JSON")

    p = sub.add_parser("inspect", help="summarize a model file")
    p.add_argument("--model", type=Path, required=True)
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        cfg = load_config(args.config)
    elif args.preset is not None:
        cfg = load_preset(args.preset)
    else:
        cfg = RunConfig()
    changes = {}
    if args.mode is not None:
        changes["mode"] = args.mode
    if args.restricted_weights:
        changes["restricted"] = True
    if args.thresholds is not None:
        changes["thresholds"] = args.thresholds
        changes["threshold_grid"] = None
    if args.threshold_grid is not None:
        changes["threshold_grid"] = args.threshold_grid
        changes["thresholds"] = None
    if args.max_iters is not None:
        changes["max_iters"] = args.max_iters
    if args.tol is not None:
        changes["tol"] = args.tol
    if args.seed is not None:
        changes["seed"] = args.seed
    return cfg.replace(**changes) if changes else cfg


def _load_series(args, lags: int):
    return load_csv(args.data, lags, context_rows=args.context_rows)


def _write_text(path: Path, text: str) -> None:
    path.write_text(text if text.endswith("\n") else text + "\n")


def cmd_simulate(args) -> int:
    regimes = DEFAULT_REGIMES
    if args.regimes is not None:
        regimes = json.loads(args.regimes.read_text())
    if args.kind == "setar":
        sim = simulate_setar(
            args.n, args.seed, regimes, thresholds=args.thresholds, delay=args.delay, n_context=args.n_context
        )
    else:
        sim = simulate_lstar(
            args.n,
            args.seed,
            regimes,
            threshold=args.threshold,
            steepness=args.steepness,
            delay=args.delay,
            n_context=args.n_context,
        )
    with open(args.out, "w") as fh:
        fh.write("x\n")
        for v in sim.dataset.values:
            fh.write(f"{v:.17g}\n")
    if args.truth is not None:
        truth = dict(sim.spec, context_rows=args.n_context, labels=sim.labels.tolist())
        _write_text(args.truth, json.dumps(truth, indent=1, sort_keys=True))
    print(f"wrote {args.n} points after {args.n_context} context rows to {args.out}")
    return EXIT_OK


def cmd_fit(args) -> int:
    cfg = _resolve_config(args)
    data = _load_series(args, cfg.n_lags)
    state = fit(data, cfg)
    args.out.write_text(dumps(state))
    status = "converged" if state.converged else "stopped"
    print(f"{status} after {state.iteration} sweeps; model written to {args.out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    state = load_model(args.model)
    cfg = state.config
    data = _load_series(args, cfg.n_lags)
    XA, XL = data.XA(cfg.K), data.XL(cfg.J)
    # one extra row: the forecast for the step after the last observation
    v = data.values
    nxt = np.concatenate([[1.0], v[::-1][: cfg.n_lags]])
    with open(args.out, "w") as fh:
        fh.write("t,actual,prediction\n")
        for t in range(data.n):
            pred = predict(state, XA[t], XL[t]).value
            fh.write(f"{t + 1},{data.x[t]:.17g},{pred:.17g}\n")
            if args.update:
                sequential_update(state, data.x[t], XA[t], XL[t])
        pred = predict(state, nxt[: cfg.K + 1], nxt[: cfg.J + 1]).value
        fh.write(f"{data.n + 1},,{pred:.17g}\n")
    print(f"wrote {data.n + 1} predictions to {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _resolve_config(args)
    data = _load_series(args, cfg.n_lags)
    report = evaluate_mse(data, cfg, split=args.split, sequential=not args.batch, inner_iters=args.inner_iters)
    doc = report.to_dict(include_timing=args.timing)
    doc["config"] = cfg.to_dict()
    text = report.format()
    if args.timing:
        text += f"\n{'runtime':<12}{report.runtime:.3f} s"
    if args.out is not None:
        _write_text(args.out, json.dumps(doc, indent=1, sort_keys=True))
    if args.text is not None:
        _write_text(args.text, text)
    if args.predictions_csv is not None:
        with open(args.predictions_csv, "w") as fh:
            fh.write("t,actual,prediction\n")
            for i, (a, p) in enumerate(zip(report.actual, report.predictions)):
                fh.write(f"{report.n_train + i + 1},{a:.17g},{p:.17g}\n")
    print(text)
    return EXIT_OK


def cmd_map_tree(args) -> int:
    state = load_model(args.model)
    report = report_map_model(state)
    if args.json is not None:
        _write_text(args.json, json.dumps(report, indent=1, sort_keys=True))
    print(format_map_report(report))
    return EXIT_OK


def cmd_inspect(args) -> int:
    state = load_model(args.model)
    cfg = state.config
    lines = [
        f"M={cfg.M} D_max={cfg.D_max} J={cfg.J} K={cfg.K} mode={cfg.mode} restricted={cfg.restricted}",
        f"sweeps={state.iteration} converged={state.converged} points={state.n_seen}",
        f"{'node':>6} {'depth':>5} {'g_prime':>10} {'weight':>12}",
    ]
    depth = state.shape.depth
    for s in range(min(state.shape.n_nodes, 63)):
        lines.append(
            f"{s:>6} {int(depth[s]):>5} {state.tree_post.g_prime[s]:>10.4f} {state.node_post.trace_q[s]:>12.3f}"
        )
    if state.shape.n_nodes > 63:
        lines.append(f"... {state.shape.n_nodes - 63} more nodes")
    print("\n".join(lines))
    return EXIT_OK


COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "evaluate": cmd_evaluate,
    "map-tree": cmd_map_tree,
    "inspect": cmd_inspect,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("always")
            return COMMANDS[args.command](args)
    except (NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, DataError, CapExceededError, OSError, json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
