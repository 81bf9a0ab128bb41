"""Command-line entry points: gen-data, simulate, bench, lp-solve.

Configs are JSON documents.  An ``instance`` section either inlines a
validated spec (``{"kind": "spec", "spec": {...}, "theta_star": [...]}``) or
asks for the synthetic loan instance (``{"kind": "loan", ...overrides}``).
A ``policy`` section selects and parameterizes a policy by its config id.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from cbwk import bench
from cbwk.core import validate_spec
from cbwk.lp import LPProblem, check_kkt, solve_lp


def _load_json(path):
    if path == "-":
        return json.load(sys.stdin)
    with open(path) as fh:
        return json.load(fh)


def _resolve_instance(doc: dict):
    """Return (spec, theta_star, loan_instance_or_none) from a config."""
    kind = doc.get("kind", "loan")
    if kind == "spec":
        spec = validate_spec(doc["spec"])
        theta = np.asarray(doc["theta_star"], dtype=float)
        return spec, theta, None
    if kind == "loan":
        cfg = bench.LoanInstanceConfig.from_dict(doc)
        inst = bench.gen_loan_instance(cfg)
        return inst.spec, inst.theta_star, inst
    raise ValueError(f"unknown instance kind {kind!r}")


def _resolve_policy(policy_doc: dict, spec, theta, inst):
    """Expand config conveniences (auto Z, extended features) to raw values."""
    cfg = dict(policy_doc)
    if cfg.get("features") == "extended":
        if inst is None:
            raise ValueError("extended features need a loan instance")
        cfg.pop("features")
        cfg["feature_table"] = inst.features_extended
    elif "features" in cfg:
        cfg.pop("features")
    if cfg.get("Z") == "auto":
        cfg["Z"] = bench.compute_opt(spec, theta) / spec.budget
    return cfg


def cmd_gen_data(args) -> int:
    doc = _load_json(args.config)
    spec, theta, inst = _resolve_instance(doc.get("instance", doc))
    os.makedirs(args.out, exist_ok=True)
    out = spec.to_config()
    payload = {"spec": out, "theta_star": theta.tolist()}
    path = os.path.join(args.out, "instance.json")
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote {path}")
    return 0


def cmd_simulate(args) -> int:
    doc = _load_json(args.config)
    spec, theta, inst = _resolve_instance(doc["instance"])
    policy_cfg = _resolve_policy(doc["policy"], spec, theta, inst)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds \
        else [int(s) for s in doc.get("seeds", [0])]
    label = doc.get("label", policy_cfg.get("policy", "run"))
    result = bench.run_experiment(spec, theta, policy_cfg, seeds,
                                  out_dir=args.out, label=label,
                                  workers=args.workers)
    summary = bench.aggregate(result)
    paths = bench.emit_plot_data(summary, args.out)
    print(f"wrote {paths['curves']} and {paths['summary']}")
    print(f"final regret mean: {summary.final_regret_mean!r} "
          f"(opt={summary.opt_value!r}, seeds={summary.n_seeds})")
    return 0


def cmd_bench(args) -> int:
    doc = _load_json(args.config)
    instance_doc = doc.get("instance", {"kind": "loan"})
    kind = instance_doc.get("kind", "loan")
    if kind != "loan":
        raise ValueError("bench runs on the loan instance")
    cfg = bench.LoanInstanceConfig.from_dict(instance_doc)
    inst = bench.gen_loan_instance(cfg)
    seeds = doc.get("seeds", list(range(10)))
    report = bench.run_benchmark(
        inst,
        seeds=seeds,
        explore_scales=tuple(doc.get("explore_scales",
                                     bench.DEFAULT_EXPLORE_SCALES)),
        eta_grid=tuple(doc.get("eta_grid", bench.DEFAULT_ETA_GRID)),
        box_b_lambda=doc.get("box_b_lambda", 0.0129),
        box_d_lambda=doc.get("box_d_lambda", 0.2452),
        warm_start=doc.get("warm_start", 50),
        out_dir=args.out,
        workers=args.workers,
    )
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "benchmark.json")
    payload = {
        "opt": report["opt"],
        "Z": report["Z"],
        "eta_picked": report.get("eta_picked", {}),
        "audits": report["audits"],
        "configs": {k: v.to_config() for k, v in report["configs"].items()},
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")
    print(f"wrote {path}")
    for label, summary in report["configs"].items():
        print(f"{label}: final regret mean {summary.final_regret_mean!r}")
    return 0


def cmd_lp_solve(args) -> int:
    doc = _load_json(args.problem)
    lp = LPProblem.from_config(doc)
    sol = solve_lp(lp)
    payload = {
        "pi": sol.pi.tolist(),
        "value": sol.value,
        "dual_budget": sol.dual_budget.tolist(),
        "dual_simplex": sol.dual_simplex.tolist(),
        "dual_nonneg": sol.dual_nonneg.tolist(),
        "status": sol.status,
    }
    if sol.status == "optimal":
        payload["kkt"] = check_kkt(lp, sol, tol=args.tol).to_config()
    text = json.dumps(payload, indent=2) + "\n"
    if args.out == "-":
        sys.stdout.write(text)
    else:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {args.out}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cbwk",
        description="Budget-constrained contextual bandit simulation engine",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate an instance and write it out")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("simulate", help="run one policy config over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated, overrides config")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("bench", help="sweep the two policies on the loan instance")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("lp-solve", help="solve one sampling program from JSON")
    p.add_argument("--problem", required=True, help="path or - for stdin")
    p.add_argument("--out", default="-", help="path or - for stdout")
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_lp_solve)

    args = parser.parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
