"""Command-line front end.

Exit codes: 0 ok, 1 runtime error, 2 validation error, 3 solver non-convergence.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

import yaml

from .dopf import DOPFNotConverged, DOPFSolver, LocalInfeasibleError, LocalSolveError
from .grid import CaseError, load_case
from .probing import read_probes
from .sim import ScenarioError, SimulationError, check_scenario, load_scenario, run, write_trace

EXIT_OK, EXIT_RUNTIME, EXIT_VALIDATION, EXIT_NOT_CONVERGED = 0, 1, 2, 3


def _resolve(path: str) -> Path:
    """A path on disk, or the name of a bundled data file (``five_bus``, ``two_anomaly``)."""
    p = Path(path)
    if p.exists():
        return p
    bundled = files("gridwatch") / "data" / (p.name if p.suffix else p.name + ".yaml")
    if bundled.is_file():
        return Path(str(bundled))
    return p


def _fail(code: int, kind: str, errors) -> int:
    errors = errors if isinstance(errors, list) else [str(errors)]
    print(json.dumps({"status": "error", "kind": kind, "errors": errors}, indent=2))
    return code


def _load_case(path):
    try:
        return load_case(_resolve(path)), None
    except FileNotFoundError as exc:
        return None, [f"case: cannot read {exc.filename}"]
    except CaseError as exc:
        return None, list(exc.errors)


def _load_scenario(path, net):
    try:
        scn = load_scenario(_resolve(path))
    except FileNotFoundError as exc:
        return None, [f"scenario: cannot read {exc.filename}"]
    except ScenarioError as exc:
        return None, list(exc.errors)
    errors = check_scenario(scn, net) if net is not None else []
    return (None, errors) if errors else (scn, None)


def cmd_validate(args) -> int:
    net, errors = _load_case(args.case)
    if errors:
        return _fail(EXIT_VALIDATION, "validation", errors)
    report = {"status": "ok", "case": {"prosumers": len(net.prosumers), "lines": len(net.lines),
                                       "slack": net.slack, "warnings": list(net.warnings)}}
    if args.scenario:
        scn, errors = _load_scenario(args.scenario, net)
        if errors:
            return _fail(EXIT_VALIDATION, "validation", errors)
        report["scenario"] = {"K": scn.K, "injections": len(scn.injections), "mode": scn.reference.mode}
    print(json.dumps(report, indent=2))
    return EXIT_OK


def cmd_solve(args) -> int:
    net, errors = _load_case(args.case)
    if errors:
        return _fail(EXIT_VALIDATION, "validation", errors)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "solver_report.yaml"
    solver = DOPFSolver(net, args.eps_consensus, args.max_iters)
    try:
        result = solver.solve()
    except DOPFNotConverged as exc:
        doc = {"converged": False, "error": str(exc),
               "residual_history": [{"iteration": r.iteration, "max_consensus_residual": float(r.max_residual)}
                                    for r in exc.history]}
        report_path.write_text(yaml.safe_dump(doc, sort_keys=False))
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    except (LocalInfeasibleError, LocalSolveError) as exc:
        report_path.write_text(yaml.safe_dump({"converged": False, "error": str(exc)}, sort_keys=False))
        print(f"not converged: {exc}", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    text = result.report()
    report_path.write_text(text)
    print(text, end="")
    return EXIT_OK


def cmd_run(args) -> int:
    net, errors = _load_case(args.case)
    if errors:
        return _fail(EXIT_VALIDATION, "validation", errors)
    scn, errors = _load_scenario(args.scenario, net)
    if errors:
        return _fail(EXIT_VALIDATION, "validation", errors)
    if args.seed_override is not None:
        scn = replace(scn, seed=args.seed_override)
    ref = scn.reference
    if args.max_iters is not None or args.eps_consensus is not None:
        scn = replace(scn, reference=replace(
            ref,
            max_iters=ref.max_iters if args.max_iters is None else args.max_iters,
            eps_consensus=ref.eps_consensus if args.eps_consensus is None else args.eps_consensus))
    probes = None
    if args.probes:
        try:
            probes = read_probes(args.probes)
        except (OSError, ValueError) as exc:
            return _fail(EXIT_VALIDATION, "validation", [f"probes: {exc}"])
    try:
        trace = run(scn, net, probes)
    except SimulationError as exc:
        if isinstance(exc.cause, DOPFNotConverged):
            return _fail(EXIT_NOT_CONVERGED, "solver", [str(exc)])
        return _fail(EXIT_RUNTIME, "runtime", [str(exc)])
    paths = write_trace(trace, args.out)
    summary = trace.summary()
    summary["status"] = "ok"
    summary["files"] = {k: str(p) for k, p in sorted(paths.items())}
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="gridwatch", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    v = sub.add_parser("validate", help="check case and scenario files")
    v.add_argument("--case", required=True)
    v.add_argument("--scenario")
    v.set_defaults(func=cmd_validate)

    s = sub.add_parser("solve", help="distributed OPF on a case")
    s.add_argument("--case", required=True)
    s.add_argument("--out", default=".")
    s.add_argument("--max-iters", type=int, default=100)
    s.add_argument("--eps-consensus", type=float, default=1e-4)
    s.set_defaults(func=cmd_solve)

    r = sub.add_parser("run", help="simulate a scenario and write traces")
    r.add_argument("--case", required=True)
    r.add_argument("--scenario", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--probes", help="replay probe samples from a recorded probes.csv")
    r.add_argument("--max-iters", type=int)
    r.add_argument("--eps-consensus", type=float)
    r.add_argument("--seed-override", type=int)
    r.set_defaults(func=cmd_run)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # last-resort guard keeps the exit-code contract
        return _fail(EXIT_RUNTIME, "runtime", [f"{type(exc).__name__}: {exc}"])


if __name__ == "__main__":
    sys.exit(main())
