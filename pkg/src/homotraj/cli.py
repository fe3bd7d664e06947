"""Command-line benchmark runner.

    homotraj case1 --method ibuvs-r
    homotraj case2 --method all --out runs/case2
    homotraj run spec.yaml
    homotraj suite specs/ --jobs 4
    homotraj sweep case1 --seeds 20
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .bench import (CASES, METHODS, ExperimentSpec, noise_sweep, run_suite,
                    summary_table, write_outputs)

FAILED = ("diverged", "planning-failed")


def _overrides(args) -> dict:
    out = {}
    for key in ("seed", "noise", "samples", "budget", "gain"):
        value = getattr(args, key, None)
        if value is not None:
            out[key] = value
    if getattr(args, "half_turn_split", False):
        out["half_turn_split"] = True
    if getattr(args, "estimator", None):
        out["estimator"] = args.estimator
    return out


def _methods(name: str):
    return METHODS if name == "all" else (name,)


def _with(spec: ExperimentSpec, **kw) -> ExperimentSpec:
    return ExperimentSpec.from_dict({**spec.to_dict(), **kw})


def _load_dir(path: Path):
    files = sorted(p for p in path.iterdir() if p.suffix in (".json", ".yaml", ".yml"))
    return [ExperimentSpec.load(p) for p in files]


def _finish(reports, table: str, args) -> int:
    print(table)
    if args.out:
        write_outputs(reports, args.out, table)
    bad = [r for r in reports if r.status in FAILED]
    for r in bad:
        print(f"{r.name}/{r.method}: {r.status}: {r.message}", file=sys.stderr)
    return 1 if bad and not args.allow_failures else 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int)
    common.add_argument("--noise", type=float, help="pixel noise sigma (px)")
    common.add_argument("--samples", type=int, help="planned trajectory samples")
    common.add_argument("--budget", type=int, help="control tick budget")
    common.add_argument("--gain", type=float)
    common.add_argument("--estimator", choices=("rls", "broyden"))
    common.add_argument("--half-turn-split", action="store_true",
                        help="pre-rotate by pi/2 when the estimated rotation is near a half turn")
    common.add_argument("--out", type=Path, help="directory for JSON/CSV outputs")
    common.add_argument("--jobs", type=int, default=1)
    common.add_argument("--allow-failures", action="store_true",
                        help="exit 0 even if a run diverged or failed to plan")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="homotraj", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    for name in CASES:
        p = sub.add_parser(name, parents=[common], help=f"built-in scenario {name}")
        p.add_argument("--method", choices=(*METHODS, "all"), default="all")

    p = sub.add_parser("run", parents=[common], help="single spec file (JSON or YAML)")
    p.add_argument("spec", type=Path)
    p.add_argument("--method", choices=METHODS)

    p = sub.add_parser("suite", parents=[common], help="every spec file in a directory")
    p.add_argument("directory", type=Path)

    p = sub.add_parser("sweep", parents=[common], help="Monte-Carlo over seeds")
    p.add_argument("case", choices=tuple(CASES))
    p.add_argument("--method", choices=METHODS, default="ibuvs-r")
    p.add_argument("--seeds", type=int, default=20)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    kw = _overrides(args)

    if args.command in CASES:
        specs = [ExperimentSpec.case(args.command, method=m, **kw) for m in _methods(args.method)]
    elif args.command == "run":
        spec = _with(ExperimentSpec.load(args.spec), **kw)
        specs = [_with(spec, method=args.method) if args.method else spec]
    elif args.command == "suite":
        if not args.directory.is_dir():
            parser.error(f"{args.directory} is not a directory")
        specs = [_with(s, **kw) for s in _load_dir(args.directory)]
        if not specs:
            parser.error(f"no spec files in {args.directory}")
    else:
        kw.pop("seed", None)
        base = ExperimentSpec.case(args.case, method=args.method, **kw)
        stats = noise_sweep(base, range(args.seeds))
        reports = stats.pop("reports")
        print(summary_table(reports))
        print(json.dumps(stats, indent=2))
        if args.out:
            write_outputs(reports, args.out, summary_table(reports))
            (Path(args.out) / "sweep.json").write_text(json.dumps(stats, indent=2))
        return 0

    reports, table = run_suite(specs, jobs=args.jobs)
    return _finish(reports, table, args)


if __name__ == "__main__":
    sys.exit(main())
