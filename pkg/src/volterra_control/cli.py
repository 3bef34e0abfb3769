"""Batch front-end: load a scenario, run one named experiment, emit
machine-readable reports.

Reports are JSON records plus CSV tables written to the output directory
under ``<command>-<hash>.{json,csv}`` where the hash digests the full run
configuration; identical configurations therefore produce byte-identical
files, and existing reports are never modified (append-only audit trail).

Exit codes: 0 pass, 1 check failure, 2 usage or scenario errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import sys
from pathlib import Path

import numpy as np

from .lattice import AdaptedProcess
from .scenario import Scenario, ScenarioError, load_scenario
from .verify import (
    check_duality_1, check_duality_2, check_pointwise_nc, convergence_test,
    degenerate_fbsde_check, evaluate_cost, full_pipeline, projected_gradient,
    smooth_duality_instance, solve_state,
)

COMMANDS = ("simulate", "check-duality", "check-nc", "optimize", "converge",
            "degenerate-fbsde")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="volterra-control",
        description="lattice experiments for Volterra control problems")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--scenario", required=True, help="scenario JSON file")
    p.add_argument("--N", type=int, default=None, help="override grid steps")
    p.add_argument("--out", default="reports", help="report directory")
    p.add_argument("--seed", type=int, default=None, help="override the seed")
    p.add_argument("--tol", type=float, default=None,
                   help="override the pass/fail tolerance")
    p.add_argument("--mode", choices=("transpose", "continuum"),
                   default="transpose", help="duality convention")
    p.add_argument("--eps-sweep", type=int, default=6,
                   help="perturbation sweep down to eps = 2^-k")
    return p


def _random_direction(scenario: Scenario, tree, seed: int) -> AdaptedProcess:
    rng = np.random.default_rng(seed)
    return AdaptedProcess([rng.standard_normal((1 << i, scenario.l))
                           for i in range(tree.N)])


def _run_simulate(scenario, tree, args):
    u = scenario.default_control(tree)
    fwd, bwd = solve_state(scenario, u, tree)
    cost = evaluate_cost(scenario, u, tree, state=(fwd, bwd))
    rows = [(i, float(np.abs(fwd.X.level(i)).max()),
             float(np.abs(bwd.Y.level(i)).max())) for i in range(tree.N + 1)]
    report = {"cost": cost,
              "picard_sweeps": len(bwd.residual_history),
              "final_picard_residual": bwd.residual_history[-1]}
    return 0, report, ("level", "sup_X", "sup_Y"), rows


def _run_check_duality(scenario, tree, args, seed):
    inst = smooth_duality_instance(tree.grid.horizon, tree.N, scenario.m, seed)
    r1 = check_duality_1(inst, args.mode)
    r2 = check_duality_2(inst, args.mode)
    tol = args.tol if args.tol is not None else (
        1e-9 if args.mode == "transpose" else tree.dt)
    passed = abs(r1.gap) <= tol and abs(r2.gap) <= tol
    report = {"mode": args.mode, "tolerance": tol,
              "identity1": {"lhs": r1.lhs, "rhs": r1.rhs, "gap": r1.gap},
              "identity2": {"lhs": r2.lhs, "rhs": r2.rhs, "gap": r2.gap},
              "passed": passed}
    rows = [("identity1", r1.lhs, r1.rhs, r1.gap),
            ("identity2", r2.lhs, r2.rhs, r2.gap)]
    return (0 if passed else 1), report, ("identity", "lhs", "rhs", "gap"), rows


def _nc_rows(rep):
    return [(level, node, val, kind, resid)
            for level, node, val, kind, resid in rep.rows]


def _run_check_nc(scenario, tree, args):
    u = scenario.default_control(tree)
    rep = check_pointwise_nc(scenario, u, tree)
    tol = args.tol if args.tol is not None else scenario.tolerances.nc_tol
    scale_tol = tol * (1.0 + rep.sup_gradient)
    passed = rep.certified(scale_tol)
    report = dict(rep.to_json(), tolerance=scale_tol, passed=passed)
    return (0 if passed else 1), report, (
        "level", "node", "minValue", "cone_kind", "residual"), _nc_rows(rep)


def _run_optimize(scenario, tree, args):
    u0 = scenario.default_control(tree)
    u_star, history = projected_gradient(scenario, u0, tree=tree)
    rep = check_pointwise_nc(scenario, u_star, tree)
    tol = args.tol if args.tol is not None else scenario.tolerances.nc_tol
    scale_tol = tol * (1.0 + rep.sup_gradient)
    passed = rep.certified(scale_tol)
    report = {"initial_cost": history[0], "final_cost": history[-1],
              "iterations": len(history) - 1,
              "nc": rep.to_json(), "tolerance": scale_tol, "passed": passed}
    rows = [(k, val) for k, val in enumerate(history)]
    return (0 if passed else 1), report, ("iteration", "cost"), rows


def _run_converge(scenario, tree, args, seed):
    u = scenario.default_control(tree)
    v = _random_direction(scenario, tree, seed)
    eps = [2.0 ** -k for k in range(1, max(args.eps_sweep, 2) + 1)]
    rep = convergence_test(scenario, u, v, eps, tree)
    passed = rep.monotone()
    report = {"eps": rep.eps, "err_x": rep.err_x, "err_yz": rep.err_yz,
              "slope_x": rep.slope("x"), "slope_yz": rep.slope("yz"),
              "monotone": passed, "passed": passed}
    rows = list(zip(rep.eps, rep.err_x, rep.err_yz))
    return (0 if passed else 1), report, ("eps", "err_x", "err_yz"), rows


def _run_degenerate(scenario, tree, args):
    if not scenario.coeffs.time_invariant:
        raise ScenarioError(
            "degenerate-fbsde needs a time-invariant scenario "
            "(constant kernels, no psi time slope)")
    u = scenario.default_control(tree)
    gaps = degenerate_fbsde_check(scenario, u, tree)
    tol = args.tol if args.tol is not None else 1e-10
    passed = all(g <= tol for g in gaps.values())
    report = dict(gaps, tolerance=tol, passed=passed)
    rows = sorted(gaps.items())
    return (0 if passed else 1), report, ("check", "gap"), rows


def _write_reports(out_dir: Path, command: str, config: dict, report: dict,
                   header, rows) -> Path:
    canon = json.dumps(config, sort_keys=True)
    digest = hashlib.sha256(canon.encode()).hexdigest()[:12]
    out_dir.mkdir(parents=True, exist_ok=True)
    base = out_dir / f"{command}-{digest}"
    payload = json.dumps({"config": config, "report": report},
                         sort_keys=True, indent=2) + "\n"
    json_path = base.with_suffix(".json")
    if not json_path.exists():
        json_path.write_text(payload)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    csv_path = base.with_suffix(".csv")
    if not csv_path.exists():
        csv_path.write_text(buf.getvalue())
    return json_path


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 2 if exc.code not in (0, None) else 0
    try:
        scenario = load_scenario(args.scenario)
        if args.N is not None:
            scenario = Scenario(
                grid=type(scenario.grid)(scenario.grid.horizon, args.N),
                coeffs=scenario.coeffs, cost=scenario.cost,
                constraint=scenario.constraint, tolerances=scenario.tolerances,
                seed=scenario.seed, initial_control=scenario.initial_control)
        tree = scenario.tree()
        seed = args.seed if args.seed is not None else scenario.seed
        if args.command == "simulate":
            code, report, header, rows = _run_simulate(scenario, tree, args)
        elif args.command == "check-duality":
            code, report, header, rows = _run_check_duality(
                scenario, tree, args, seed)
        elif args.command == "check-nc":
            code, report, header, rows = _run_check_nc(scenario, tree, args)
        elif args.command == "optimize":
            code, report, header, rows = _run_optimize(scenario, tree, args)
        elif args.command == "converge":
            code, report, header, rows = _run_converge(scenario, tree, args, seed)
        else:
            code, report, header, rows = _run_degenerate(scenario, tree, args)
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, RuntimeError) as exc:
        print(f"run failed: {exc}", file=sys.stderr)
        return 1
    config = {
        "command": args.command,
        "scenario": scenario.to_json(),
        "overrides": {"N": args.N, "seed": args.seed, "tol": args.tol,
                      "mode": args.mode, "eps_sweep": args.eps_sweep},
    }
    path = _write_reports(Path(args.out), args.command, config, report,
                          header, rows)
    status = "PASS" if code == 0 else "FAIL"
    print(f"{args.command}: {status} -> {path}")
    for key in ("cost", "final_cost"):
        if key in report:
            print(f"  {key} = {report[key]:.12g}")
    if "identity1" in report:
        print(f"  gap1 = {report['identity1']['gap']:.3e}  "
              f"gap2 = {report['identity2']['gap']:.3e}")
    if "worst_value" in report:
        print(f"  worst minValue = {report['worst_value']:.3e}")
    return code


if __name__ == "__main__":
    sys.exit(main())
