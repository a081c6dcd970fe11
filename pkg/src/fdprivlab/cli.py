"""``fdprivlab run`` / ``fdprivlab sweep`` entry points.

Exit codes: 0 success, 2 config error, 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .errors import ValidationError
from .harness import SWEEP_AXES, ConfigError, ExperimentSpec, load_spec, run_experiment, run_sweep

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def parse_values(text: str) -> list:
    values = [_parse_value(v.strip()) for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep values must be a non-empty comma-separated list")
    return values


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fdprivlab", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one experiment")
    run.add_argument("--config", required=True)
    run.add_argument("--seed", type=int)
    run.add_argument("--out")
    run.add_argument("--sweep", help="axis=v1,v2,... (turns the run into a sweep)")

    sw = sub.add_parser("sweep", help="run one experiment per value of an ablation axis")
    sw.add_argument("--config", required=True)
    sw.add_argument("--axis", required=True, help=f"one of: {', '.join(sorted(SWEEP_AXES))}")
    sw.add_argument("--values", required=True)
    sw.add_argument("--seed", type=int)
    sw.add_argument("--out")
    return p


def _apply_overrides(spec: ExperimentSpec, args) -> ExperimentSpec:
    if args.seed is not None:
        spec.seed = args.seed
    if args.out is not None:
        spec.output_dir = args.out
    return spec


def _summary(report: dict) -> str:
    parts = [f"seed={report['seed']}"]
    fd = report["fd"]
    if fd["federated_accuracy_final"] is not None:
        parts.append(f"local_acc0={fd['local_accuracy_round0']:.3f}")
        parts.append(f"fed_acc={fd['federated_accuracy_final']:.3f}")
    if "ldia" in report:
        parts.append(f"ldia_kl={report['ldia']['mean_kl']:.3f}")
    for name, by_round in report.get("attacks", {}).items():
        for t, sec in by_round.items():
            auc = sec["mean"]["auc"]
            parts.append(f"{name}[t={t}].auc=" + ("n/a" if auc is None else f"{auc:.3f}"))
    return " ".join(parts)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = _apply_overrides(load_spec(args.config), args)
        if args.command == "sweep":
            axis, values = args.axis, parse_values(args.values)
        elif args.sweep:
            axis, _, raw = args.sweep.partition("=")
            axis, values = axis.strip(), parse_values(raw)
        else:
            axis = None
        if axis is not None and axis not in SWEEP_AXES:
            raise ConfigError(f"unknown sweep axis {axis!r}; valid axes: {', '.join(sorted(SWEEP_AXES))}")
    except (ConfigError, ValidationError) as exc:
        print(f"fdprivlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(spec.output_dir)
    try:
        if axis is None:
            print(_summary(run_experiment(spec, out)))
        else:
            for report in run_sweep(spec, axis, values, out):
                print(f"{axis}={report['sweep']['value']} " + _summary(report))
    except (ConfigError, ValidationError) as exc:
        print(f"fdprivlab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - runtime abort, reported and mapped to exit 3
        print(f"fdprivlab: aborted: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"outputs in {out}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
