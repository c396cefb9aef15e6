"""Command-line entry point: ``forge run|sweep|export|report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .cost import CostError
from .experiment import (ConfigError, ExperimentConfig, flag_dominated, load_search, pareto_svg,
                         pipeline, read_records, records_csv, sweep)
from .graph import GraphError, save_graph
from .passes import pass_report
from .pit import PIT
from .checkpoint import CheckpointError

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 2, 3
log = logging.getLogger("forge")


def _write_json(path: Optional[str], payload) -> None:
    if path:
        Path(path).write_text(json.dumps(payload, indent=1, default=str))


def cmd_run(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    lam = args.strength if args.strength is not None else cfg.lambdas[0]
    _, record = pipeline(cfg, lam)
    print(json.dumps({"lambda": record.lam, "chain": record.chain, "accuracy": record.accuracy,
                      "params": record.params, "params_bytes": record.params_bytes,
                      "macs": record.macs, "export_path": record.export_path}))
    for stage in record.stages:
        print(f"{stage['stage']:>9}: params={stage['params']:.0f} "
              f"bytes={stage['params_bytes']:.1f} macs={stage['macs']:.0f}")
    _write_json(args.report, {"record": record.to_dict()})
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = ExperimentConfig.load(args.config)
    records = sweep(cfg, workers=args.workers)
    sys.stdout.write(records_csv(records))
    failed = [r for r in records if not r.ok]
    for r in failed:
        log.error("lambda=%g failed: %s", r.lam, r.error)
    _write_json(args.report, [r.to_dict() for r in records])
    return EXIT_RUNTIME if len(failed) == len(records) else EXIT_OK


def cmd_export(args) -> int:
    model = load_search(args.checkpoint)
    g = model.export(unfold=args.unfold) if isinstance(model, PIT) else model.export()
    save_graph(g, args.output)
    report = model.report()
    if isinstance(model, PIT):
        report = {**pass_report(model.groups, model.graph, model.last_summary),
                  "method": model.method}
    _write_json(args.report, report)
    print(f"exported {model.method or 'plain'} graph with {len(g)} nodes to {args.output}")
    return EXIT_OK


def cmd_report(args) -> int:
    records = read_records(args.directory)
    flag_dominated(records)
    csv_text = records_csv(records)
    if args.csv:
        Path(args.csv).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.svg:
        Path(args.svg).write_text(pareto_svg(records))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forge", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the method chain once")
    p.add_argument("config")
    p.add_argument("--lambda", dest="strength", type=float, default=None,
                   help="regularization strength (default: first configured)")
    p.add_argument("--report", help="write a JSON report here")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="run the chain once per configured strength")
    p.add_argument("config")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--report", help="write the records as JSON here")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("export", help="export a saved search checkpoint to a plain graph")
    p.add_argument("checkpoint")
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--unfold", action="store_true", help="restore folded BatchNorm layers")
    p.add_argument("--report", help="write the JSON pass report here")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="tabulate and plot the records of a sweep")
    p.add_argument("directory")
    p.add_argument("--csv")
    p.add_argument("--svg")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, GraphError, CostError, CheckpointError, FileNotFoundError,
            json.JSONDecodeError) as exc:
        print(f"forge: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:
        print(f"forge: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
