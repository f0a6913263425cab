"""Command-line entry point.

Exit codes: 0 success, 1 configuration error, 2 numeric failure,
3 verification failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from cagm.config import ConfigError, load_config, make_config
from cagm.errors import NumericError, ValidationError

log = logging.getLogger("cagm")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 1, 2, 3


def parse_seeds(text: str) -> tuple[int, ...]:
    try:
        seeds = tuple(int(s) for s in text.replace(" ", "").split(",") if s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if not seeds:
        raise argparse.ArgumentTypeError("at least one seed is needed")
    return seeds


def _config(args):
    cfg = load_config(args.config) if args.config else make_config()
    updates = {}
    if args.seeds is not None:
        updates["run.seeds"] = args.seeds
    if args.out is not None:
        updates["run.out"] = str(args.out)
    return cfg.with_values(**updates) if updates else cfg


def _status_code(summary: dict) -> int:
    return EXIT_OK if summary.get("status", "ok") == "ok" else EXIT_NUMERIC


def cmd_run(args) -> int:
    from cagm.harness import run_experiment

    cfg = _config(args)
    summary = run_experiment(cfg, cfg.out, resume=not args.fresh)
    print(f"{cfg.out}/summary.json  status={summary['status']}")
    return _status_code(summary)


def cmd_grid(args) -> int:
    from cagm.harness import grid_search

    cfg = _config(args)
    best, rows = grid_search(cfg, cfg.out)
    failed = sum(r["status"] != "ok" for r in rows)
    print(f"{cfg.out}/grid.csv  cells={len(rows)} failed={failed}")
    if best is None:
        log.error("every grid cell failed")
        return EXIT_NUMERIC
    print(f"best: eta={best.values['opt.eta']!r} batch_size={best.values['protocol.batch_size']} "
          f"lambda={best.values['opt.lambda']!r}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    from cagm.harness import run_ablations

    cfg = _config(args)
    rows = run_ablations(cfg, cfg.out)
    print(f"{cfg.out}/ablations.csv  variants={len(rows)}")
    return EXIT_OK if all(r["status"] == "ok" for r in rows) else EXIT_NUMERIC


def cmd_suite(args) -> int:
    from cagm.suite import run_paper_suite

    if args.config:
        load_config(args.config)
        log.warning("suite uses built-in presets; %s was only validated", args.config)
    out = args.out or Path("suite-out")
    summary = run_paper_suite(out, seeds=args.seeds or (0, 1, 2))
    print(f"{out}: {len(summary['reports'])} reports")
    return EXIT_OK


def cmd_plotdata(args) -> int:
    from cagm.harness import emit_plotdata

    run_dir = args.run or (load_config(args.config).out if args.config else None)
    if run_dir is None:
        raise ConfigError("run.out", "plotdata needs --run DIR or a config whose run.out points at a finished run")
    written = emit_plotdata(run_dir, args.out or run_dir)
    for path in written.values():
        print(path)
    return EXIT_OK


def cmd_verify(args) -> int:
    from cagm import verify

    if args.config:
        load_config(args.config)
    checks = verify.run_all(smoke=not args.no_smoke, smoke_seeds=args.seeds or tuple(range(10)))
    for c in checks:
        tag = "PASS" if c.passed else ("WARN" if not c.gating else "FAIL")
        print(f"{tag}  {c.name}  ({c.seconds:.1f}s)")
        if c.name == "directional smoke test":
            for row in c.detail["rows"]:
                print(f"      noise {row['noise_std']}: gap {row['gap_pp']:+.2f} pp ({row['direction']}, lambda={row['lambda']})")
    report = verify.report(checks)
    if args.out:
        Path(args.out).mkdir(parents=True, exist_ok=True)
        (Path(args.out) / "verify.json").write_text(json.dumps(report, indent=1, sort_keys=True, default=float) + "\n")
    return EXIT_OK if report["passed"] else EXIT_VERIFY


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value config file")
    common.add_argument("--out", type=Path, help="output directory (overrides run.out)")
    common.add_argument("--seeds", type=parse_seeds, help="comma-separated seed list, e.g. 0,1,2")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cagm", description="Context-aligned gradient mapping experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="two-phase training over every seed")
    p.add_argument("--fresh", action="store_true", help="ignore existing checkpoints")
    p.set_defaults(func=cmd_run)
    sub.add_parser("grid", parents=[common], help="grid search over grid.eta x grid.batch_size x grid.lambda").set_defaults(func=cmd_grid)
    sub.add_parser("ablate", parents=[common], help="alignment/curvature/hierarchy ablation lattice").set_defaults(func=cmd_ablate)
    sub.add_parser("suite", parents=[common], help="all built-in report tables and figure series").set_defaults(func=cmd_suite)
    p = sub.add_parser("plotdata", parents=[common], help="tidy per-figure CSVs from a finished run")
    p.add_argument("--run", type=Path, help="run directory to read")
    p.set_defaults(func=cmd_plotdata)
    p = sub.add_parser("verify", parents=[common], help="oracle and invariant battery")
    p.add_argument("--no-smoke", action="store_true", help="skip the directional smoke test")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValidationError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
