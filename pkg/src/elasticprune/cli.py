"""Command-line entry point.

Every subcommand reads the same experiment INI (``--config``) and writes CSV
files into ``--out-dir``. Exit status is 0 on success, 1 when a rollout
breaks the budget contract, 2 for missing or stale inputs and bad options.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict, replace
from pathlib import Path

from . import dqn, harness, workload
from ._accel import backend_name
from .gsi import StaleCacheError, build_importance_table, load_importance, save_importance
from .harness import PolicyKind

IMPORTANCE_FILE = "importance.csv"
CHECKPOINT_FILE = "policy.bin"


def _setup(args):
    exp = harness.load_experiment(args.config)
    if args.seed is not None:
        exp.dqn = replace(exp.dqn, seed=args.seed)
    spec = exp.load_model()
    surrogate = exp.load_surrogate(spec)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return exp, spec, surrogate, out


def _tables(args, out, surrogate):
    path = Path(args.tables) if getattr(args, "tables", None) else out / IMPORTANCE_FILE
    return load_importance(path, expected_checksum=surrogate.checksum())


def _net(args, out):
    path = Path(args.checkpoint) if getattr(args, "checkpoint", None) else out / CHECKPOINT_FILE
    net, _ = dqn.load_checkpoint(path)
    return net


def _eval_trace(args, exp):
    if getattr(args, "trace", None):
        return list(workload.load(args.trace))
    return list(workload.generate(exp.eval_trace))


def cmd_gsi_build(args):
    exp, spec, surrogate, out = _setup(args)
    table = build_importance_table(surrogate, spec)
    path = out / IMPORTANCE_FILE
    save_importance(table, path)
    print(f"wrote {path} ({spec.n_blocks} blocks x {len(table.buckets) + 1} buckets, surrogate {table.checksum[:12]})")
    return 0


def cmd_train(args):
    exp, spec, surrogate, out = _setup(args)
    tables = _tables(args, out, surrogate)
    res = harness.train_policy(exp, spec, tables)
    dqn.save_checkpoint(res.net, out / CHECKPOINT_FILE, exp.dqn.seed, exp.dqn.digest())
    with open(out / "reward_curve.csv", "w") as fh:
        dqn.write_reward_curve(res.curve, fh)
    tail = res.returns()[-exp.window :].mean()
    print(
        f"trained {res.env_steps} steps / {len(res.curve)} episodes / {res.updates} updates "
        f"({res.net.n_params} params); trailing-{exp.window} return {tail:.4f}"
    )
    return 0


def cmd_eval(args):
    exp, spec, surrogate, out = _setup(args)
    tables = _tables(args, out, surrogate)
    kind = PolicyKind(args.policy)
    net = _net(args, out) if kind is PolicyKind.RAP else None
    report, logs = harness.run_eval(kind, _eval_trace(args, exp), spec, surrogate, tables, exp.reward, net, exp.dqn.seed, exp.norms)
    harness.write_csv(out / f"eval_{kind.value}.csv", logs, harness.ROLLOUT_FIELDS)
    harness.write_csv(out / f"eval_{kind.value}_summary.csv", [report])
    print(
        f"{kind.value}: n={report.n} log-ppl={report.mean_log_ppl:.4f} feasible={report.feasibility_rate:.3f} "
        f"pruned mha/ffn={report.mean_pruned_mha:.1f}/{report.mean_pruned_ffn:.1f} "
        f"decision={report.mean_latency_ms:.3f} ms"
    )
    return 0


def cmd_ablate(args):
    exp, spec, surrogate, out = _setup(args)
    tables = _tables(args, out, surrogate)
    net = _net(args, out)
    rows, logs = harness.ablation_compare(
        _eval_trace(args, exp), spec, surrogate, tables, net, exp.reward, exp.dqn.seed, exp.n_boot, norms=exp.norms
    )
    harness.write_csv(out / "ablation.csv", rows)
    for name, rollouts in logs.items():
        harness.write_csv(out / f"rollouts_{name}.csv", rollouts, harness.ROLLOUT_FIELDS)
    for r in rows:
        print(f"{r.policy:>10}  log-ppl {r.mean_log_ppl:.4f}  95% CI [{r.ci_low:.4f}, {r.ci_high:.4f}]  feasible {r.feasibility_rate:.3f}")
    return 0


def cmd_sweep(args):
    exp, spec, surrogate, out = _setup(args)
    tables = _tables(args, out, surrogate)
    kind = PolicyKind(args.policy)
    trace = _eval_trace(args, exp)[: args.records]

    def train_fn(params):
        return harness.train_policy(exp, spec, tables, params=params).net

    rows = harness.sweep_alpha_beta(
        exp.alphas, exp.betas, trace, spec, surrogate, tables, kind, exp.reward.infeasible_penalty, train_fn, exp.dqn.seed
    )
    harness.write_csv(out / "sweep.csv", rows)
    bad = harness.beta_monotonicity_violations(rows)
    print(f"{len(rows)} grid points, {bad} beta-monotonicity violations")
    return 0


def cmd_robustness(args):
    exp, spec, surrogate, out = _setup(args)
    tables = _tables(args, out, surrogate)
    seeds = exp.seeds if args.seeds is None else tuple(args.seeds)
    results, band = harness.seed_robustness(seeds, lambda s: harness.train_policy(exp, spec, tables, seed=s), exp.window)
    rows = []
    for seed, res in results.items():
        rows += [{"seed": seed, **asdict(r)} for r in res.curve]
    harness.write_csv(out / "robustness.csv", rows)
    for seed, res in results.items():
        print(f"seed {seed}: trailing-{exp.window} return {res.returns()[-exp.window:].mean():.4f}")
    print(f"max relative deviation from cross-seed mean: {band:.2%}")
    return 0


def cmd_trace_gen(args):
    cfg = workload.load_gen_config(args.config, seed=args.seed, count=args.count)
    if args.out in (None, "-"):
        workload.write(workload.generate(cfg), sys.stdout)
    else:
        with open(args.out, "w") as fh:
            n = workload.write(workload.generate(cfg), fh)
        print(f"wrote {n} records to {args.out}", file=sys.stderr)
    return 0


def cmd_overhead(args):
    exp, spec, surrogate, out = _setup(args)
    tables = _tables(args, out, surrogate)
    net = _net(args, out)
    trace = _eval_trace(args, exp)[: args.records]
    rep = harness.overhead_report(spec, tables, net, surrogate, trace, exp.reward, args.repeats)
    harness.write_csv(out / "overhead.csv", [{**asdict(rep), "backend": backend_name()}])
    print(
        f"{rep.n_params} params; decision over {rep.steps} steps: median {rep.median_decision_ms:.3f} ms, "
        f"p95 {rep.p95_decision_ms:.3f} ms ({backend_name()})"
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment INI file")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out-dir", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="elasticprune", parents=[common], description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help):
        sp = sub.add_parser(name, parents=[common], help=help)
        sp.set_defaults(fn=fn)
        return sp

    add("gsi-build", cmd_gsi_build, "build the per-bucket importance cache")

    sp = add("train", cmd_train, "train the DQN pruning policy")
    sp.add_argument("--tables")

    sp = add("eval", cmd_eval, "roll out one policy over a trace")
    sp.add_argument("--policy", default="RAP", choices=[k.value for k in PolicyKind])
    sp.add_argument("--trace", help="JSON-lines trace; default generates the eval trace")
    sp.add_argument("--tables")
    sp.add_argument("--checkpoint")

    sp = add("ablate", cmd_ablate, "compare all policies with bootstrap intervals")
    sp.add_argument("--trace")
    sp.add_argument("--tables")
    sp.add_argument("--checkpoint")

    sp = add("sweep", cmd_sweep, "alpha/beta grid")
    sp.add_argument("--policy", default="GsiStatic", choices=[k.value for k in PolicyKind])
    sp.add_argument("--trace")
    sp.add_argument("--tables")
    sp.add_argument("--records", type=int, default=200)

    sp = add("robustness", cmd_robustness, "train under several seeds")
    sp.add_argument("--seeds", type=int, nargs="+")
    sp.add_argument("--tables")

    sp = add("trace-gen", cmd_trace_gen, "generate a synthetic request/budget trace")
    sp.add_argument("--count", type=int)
    sp.add_argument("--out", help="output file (default stdout)")

    sp = add("overhead", cmd_overhead, "time one pruning decision")
    sp.add_argument("--tables")
    sp.add_argument("--checkpoint")
    sp.add_argument("--trace")
    sp.add_argument("--records", type=int, default=200)
    sp.add_argument("--repeats", type=int, default=50)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("config", None), ("seed", None), ("out-dir", "results")):
        attr = name.replace("-", "_")
        if not hasattr(args, attr):
            setattr(args, attr, default)
    try:
        return args.fn(args)
    except harness.InvariantViolation as exc:
        print(f"invariant violated: {exc}", file=sys.stderr)
        return 1
    except (FileNotFoundError, StaleCacheError, workload.TraceFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
