"""``fleetlife`` command-line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error
(including stale artifacts), 3 numerical failure.  Failures print a JSON
error object on stderr and write ``error.json`` to the output directory.
"""

from __future__ import annotations

import argparse
import datetime as dt
import json
import os
import sys
from pathlib import Path

from . import __version__
from .config import ConfigError, load_config
from .data import DataError
from .likelihood import FitError
from .simulation import SimulationError
from .workflows import (
    MANIFEST,
    cmd_backtest,
    cmd_bootstrap,
    cmd_fit,
    cmd_predict,
    cmd_sensitivity,
    cmd_simulate,
    dumps,
    file_digest,
    load_ensemble,
    load_fit,
    load_inputs,
)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
RANDOMIZED = ("bootstrap", "predict", "backtest", "sensitivity", "simulate")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _levels(text: str):
    try:
        levels = tuple(float(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad level list {text!r}") from None
    if not levels or any(not (0 < lv < 1) for lv in levels):
        raise argparse.ArgumentTypeError("levels must lie in (0, 1)")
    return levels


def _years(text: str):
    out = []
    for part in text.split(","):
        part = part.strip()
        if "-" in part:
            a, b = part.split("-")
            out.extend(range(int(a), int(b) + 1))
        elif part:
            out.append(int(part))
    return out


def _date(text: str):
    try:
        return dt.date.fromisoformat(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not an ISO date: {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="study config (TOML)")
    common.add_argument("--data", help="fleet CSV")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--seed", type=int, help="master seed for randomized steps")
    common.add_argument("--jobs", type=int, help="worker processes (default $FLEETLIFE_THREADS or 1)")
    common.add_argument("--level", type=_levels, help="interval levels, e.g. 0.90,0.95")
    common.add_argument("--family", choices=("weibull", "lognormal", "both"))
    common.add_argument("--strict", action="store_true", help="require --seed for randomized commands")

    p = _Parser(prog="fleetlife", description="Lifetime fitting and failure forecasting for fleets with truncated records.")
    p.add_argument("--version", action="version", version=f"fleetlife {__version__}")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    sub.add_parser("fit", parents=[common], help="fit lifetime models")
    b = sub.add_parser("bootstrap", parents=[common], help="random weighted bootstrap of a fit")
    b.add_argument("--fit", dest="fit_path", help="fit artifact (default OUT/fit.json)")
    pr = sub.add_parser("predict", parents=[common], help="individual and fleet forecasts")
    pr.add_argument("--fit", dest="fit_path")
    pr.add_argument("--ensemble", dest="ensemble_path")
    bt = sub.add_parser("backtest", parents=[common], help="refit at an earlier freeze and compare")
    bt.add_argument("--pseudo-freeze", type=_date)
    se = sub.add_parser("sensitivity", parents=[common], help="forecasts under perturbed assumptions")
    se.add_argument("--axis", choices=("family", "cutting_year"), default="family")
    se.add_argument("--cutting-years", type=_years)
    si = sub.add_parser("simulate", parents=[common], help="synthetic fleet and coverage study")
    si.add_argument("--scenario", help="scenario config (TOML with a [scenario] table)")
    return p


def _jobs(args) -> int:
    if args.jobs is not None:
        return max(1, args.jobs)
    env = os.environ.get("FLEETLIFE_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"FLEETLIFE_THREADS must be an integer, not {env!r}") from None
    return 1


def _need(args, *names):
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n, None) is None]
    if missing:
        raise UsageError(f"{args.command} needs {' '.join(missing)}")


def _write(out: Path, outputs: dict, manifest: dict):
    out.mkdir(parents=True, exist_ok=True)
    for name, text in sorted(outputs.items()):
        (out / name).write_text(text, encoding="utf-8")
    manifest["outputs"] = {name: file_digest(out / name) for name in sorted(outputs)}
    manifest["finished"] = dt.datetime.now(dt.timezone.utc).isoformat()
    (out / MANIFEST).write_text(dumps(manifest), encoding="utf-8")


def run(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a command is required: fit, bootstrap, predict, backtest, sensitivity or simulate")
        if args.strict and args.command in RANDOMIZED and args.seed is None:
            raise UsageError(f"--strict: {args.command} needs --seed")
        seed = 0 if args.seed is None else args.seed
        jobs = _jobs(args)
        out = Path(args.out)
        manifest = {
            "tool": "fleetlife",
            "version": __version__,
            "command": args.command,
            "argv": list(argv),
            "seeds": {"master": seed},
            "jobs": jobs,
            "started": dt.datetime.now(dt.timezone.utc).isoformat(),
            "inputs": {},
        }
        if args.command == "simulate":
            path = args.scenario or args.config
            if path is None:
                raise UsageError("simulate needs --scenario")
            cfg = load_config(path)
            manifest["inputs"][str(path)] = file_digest(path)
            manifest["config_hash"] = cfg.digest()
            manifest["scenario"] = json.loads(dumps(cfg.scenario))
            outputs = cmd_simulate(cfg, seed=args.seed, jobs=jobs)
            _write(out, outputs, manifest)
            return EXIT_OK
        _need(args, "config", "data")
        cfg = load_config(args.config)
        if args.family:
            from dataclasses import replace

            raw = {**cfg.raw, "model": {**cfg.raw.get("model", {}), "family": args.family}}
            cfg = replace(cfg, model=replace(cfg.model, family=args.family), raw=raw)
        inputs = load_inputs(args.data, cfg)
        manifest["inputs"] = {str(args.config): file_digest(args.config), str(args.data): file_digest(args.data)}
        manifest["config_hash"] = inputs.hash
        levels = args.level or cfg.predict.levels
        if args.command == "fit":
            outputs = cmd_fit(inputs)
        elif args.command == "bootstrap":
            fit = load_fit(args.fit_path or out / "fit.json", inputs.hash)
            outputs = cmd_bootstrap(inputs, fit, seed, jobs)
        elif args.command == "predict":
            fit = load_fit(args.fit_path or out / "fit.json", inputs.hash)
            ens = load_ensemble(args.ensemble_path or out / "ensemble.json", inputs.hash)
            outputs = cmd_predict(inputs, fit, ens, seed, levels)
        elif args.command == "backtest":
            outputs = cmd_backtest(inputs, args.data, args.pseudo_freeze, seed, jobs, levels[0])
        else:
            outputs = cmd_sensitivity(inputs, args.data, args.axis, seed, jobs, args.cutting_years, None, levels[0])
        _write(out, outputs, manifest)
        return EXIT_OK
    except UsageError as exc:
        return _fail(argv, EXIT_USAGE, exc, parser)
    except ConfigError as exc:
        return _fail(argv, EXIT_USAGE, exc)
    except (DataError, FileNotFoundError) as exc:
        return _fail(argv, EXIT_DATA, exc)
    except (FitError, SimulationError, ArithmeticError) as exc:
        return _fail(argv, EXIT_NUMERIC, exc)
    except ValueError as exc:
        return _fail(argv, EXIT_DATA, exc)


def _fail(argv, code: int, exc: Exception, parser=None) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    if parser is not None and code == EXIT_USAGE:
        print(parser.format_usage(), file=sys.stderr, end="")
    out = _out_dir(argv)
    if out is not None:
        try:
            out.mkdir(parents=True, exist_ok=True)
            (out / "error.json").write_text(dumps(doc), encoding="utf-8")
        except OSError:
            pass
    return code


def _out_dir(argv):
    argv = list(argv)
    for i, a in enumerate(argv):
        if a == "--out" and i + 1 < len(argv):
            return Path(argv[i + 1])
        if a.startswith("--out="):
            return Path(a.split("=", 1)[1])
    return None


def main(argv=None) -> int:
    code = run(sys.argv[1:] if argv is None else argv)
    if argv is None:
        sys.exit(code)
    return code


if __name__ == "__main__":
    main()
