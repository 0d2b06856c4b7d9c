"""Experiment driver: policy rollouts, ablations, sweeps and overhead timing.

Final configurations are always scored through the surrogate oracle, not
through the importance sums the agent optimises, so a policy that games its
proxy reward shows up as worse surrogate perplexity.
"""

from __future__ import annotations

import configparser
import csv
import enum
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import dqn
from .env import PruningEnv, RewardParams, StateNorms
from .gsi import ImportanceTable
from .memory import ModelSpec, Request, load_spec, peak_memory
from .surrogate import SurrogateModel, SurrogateParams, gen_surrogate, load_surrogate
from .workload import TraceGenConfig, TraceRecord, generate


class PolicyKind(str, enum.Enum):
    RAP = "RAP"
    ONE_SHOT = "OneShot"
    RANDOM_DROP = "RandomDrop"
    GSI_STATIC = "GsiStatic"


ABLATION_ORDER = (PolicyKind.RAP, PolicyKind.GSI_STATIC, PolicyKind.ONE_SHOT, PolicyKind.RANDOM_DROP)


class InvariantViolation(AssertionError):
    pass


@dataclass
class RolloutLog:
    t: int
    batch: int
    seq_len: int
    budget_fraction: float
    budget_bytes: int
    final_peak_bytes: int
    feasible: bool
    flagged_infeasible: bool
    pruned_mha: int
    pruned_ffn: int
    final_log_ppl: float
    retained_ippl: float
    retained_mem: float
    final_reward: float
    episode_return: float
    latency_s: float


ROLLOUT_FIELDS = [f.name for f in fields(RolloutLog)]


@dataclass
class EvalReport:
    policy: str
    n: int
    mean_log_ppl: float
    mean_retained_ippl: float
    feasibility_rate: float
    mean_pruned_mha: float
    mean_pruned_ffn: float
    mean_latency_ms: float
    mean_reward: float
    mean_retained_mem: float

    @classmethod
    def from_logs(cls, policy: str, logs: list[RolloutLog]) -> "EvalReport":
        if not logs:
            nan = float("nan")
            return cls(policy, 0, nan, nan, nan, nan, nan, nan, nan, nan)

        def mean(attr):
            return float(np.mean([getattr(r, attr) for r in logs]))

        return cls(
            policy=policy,
            n=len(logs),
            mean_log_ppl=mean("final_log_ppl"),
            mean_retained_ippl=mean("retained_ippl"),
            feasibility_rate=mean("feasible"),
            mean_pruned_mha=mean("pruned_mha"),
            mean_pruned_ffn=mean("pruned_ffn"),
            mean_latency_ms=1e3 * mean("latency_s"),
            mean_reward=mean("final_reward"),
            mean_retained_mem=mean("retained_mem"),
        )


class Policy:
    """Chooses the next block to prune from a live :class:`PruningEnv`."""

    def __init__(self, kind: PolicyKind, net: dqn.QNetwork | None = None, seed: int = 0):
        kind = PolicyKind(kind)
        if kind is PolicyKind.RAP and net is None:
            raise FileNotFoundError("RAP policy needs a trained checkpoint; run 'elasticprune train' first")
        self.kind = kind
        self.net = net
        self.rng = np.random.default_rng(seed)

    def begin(self, env: PruningEnv) -> None:
        if self.kind in (PolicyKind.GSI_STATIC, PolicyKind.ONE_SHOT):
            orders = env.tables.gsi_order if self.kind is PolicyKind.GSI_STATIC else env.tables.oneshot_order
            self._order = iter(orders[env.tables.bucket_of(env.req.seq_len)].tolist())

    def choose(self, env: PruningEnv, state) -> int:
        if self.kind is PolicyKind.RAP:
            return dqn.greedy_action(self.net, state, env.mask)
        if self.kind is PolicyKind.RANDOM_DROP:
            idx = np.flatnonzero(env.mask)
            return int(idx[self.rng.integers(idx.size)])
        for i in self._order:
            if env.mask[i]:
                return i
        raise InvariantViolation("static order exhausted before the episode ended")


def rollout(policy: Policy, env: PruningEnv, rec: TraceRecord, surrogate: SurrogateModel) -> RolloutLog:
    req = Request(rec.batch_size, rec.seq_len)
    t0 = time.perf_counter()
    state = env.reset(req, rec.budget_fraction)
    policy.begin(env)
    ret = 0.0
    while not env.done:
        out = env.step(policy.choose(env, state))
        state = out.next_state
        ret += out.reward
    latency = time.perf_counter() - t0
    mask = env.mask
    check_rollout(env, req)
    i_me = env.i_me
    return RolloutLog(
        t=rec.t,
        batch=req.batch_size,
        seq_len=req.seq_len,
        budget_fraction=rec.budget_fraction,
        budget_bytes=env.budget,
        final_peak_bytes=env.peak,
        feasible=bool(env.feasible),
        flagged_infeasible=not env.feasible,
        pruned_mha=int((~mask[0::2]).sum()),
        pruned_ffn=int((~mask[1::2]).sum()),
        final_log_ppl=surrogate.log_ppl(mask, req.seq_len),
        retained_ippl=float(env.i_ppl[mask].sum() / env.i_ppl.sum()),
        retained_mem=int(i_me[mask].sum()) / int(i_me.sum()),
        final_reward=env.reward_value(),
        episode_return=ret,
        latency_s=latency,
    )


def check_rollout(env: PruningEnv, req: Request) -> None:
    """Budget-or-flagged contract, recomputed from scratch."""
    actual = peak_memory(env.spec, env.mask, req)
    if actual != env.peak:
        raise InvariantViolation(f"tracked peak {env.peak} != recomputed {actual}")
    if env.feasible and actual > env.budget:
        raise InvariantViolation(f"feasible rollout exceeds budget: {actual} > {env.budget}")
    if not env.feasible and env.mask.any():
        raise InvariantViolation("rollout stopped over budget with blocks left to prune")


def run_eval(
    policy: PolicyKind,
    trace,
    spec: ModelSpec,
    surrogate: SurrogateModel,
    tables: ImportanceTable,
    params: RewardParams = RewardParams(),
    net: dqn.QNetwork | None = None,
    seed: int = 0,
    norms: StateNorms = StateNorms(),
) -> tuple[EvalReport, list[RolloutLog]]:
    if tables.n_blocks != spec.n_blocks:
        raise ValueError("importance table does not match the model; rerun 'elasticprune gsi-build'")
    pol = Policy(policy, net, seed)
    env = PruningEnv(spec, tables, params, norms)
    logs = [rollout(pol, env, rec, surrogate) for rec in trace]
    return EvalReport.from_logs(PolicyKind(policy).value, logs), logs


def bootstrap_ci(values, n_boot: int = 1000, level: float = 0.95, seed: int = 0):
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return float("nan"), float("nan")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    lo, hi = np.quantile(means, [(1 - level) / 2, (1 + level) / 2])
    return float(lo), float(hi)


@dataclass
class AblationRow:
    policy: str
    n: int
    mean_log_ppl: float
    ci_low: float
    ci_high: float
    feasibility_rate: float
    mean_pruned_mha: float
    mean_pruned_ffn: float


def ablation_compare(
    trace,
    spec: ModelSpec,
    surrogate: SurrogateModel,
    tables: ImportanceTable,
    net: dqn.QNetwork | None,
    params: RewardParams = RewardParams(),
    seed: int = 0,
    n_boot: int = 1000,
    policies=ABLATION_ORDER,
    norms: StateNorms = StateNorms(),
):
    """Mean final surrogate log-perplexity per policy with bootstrap intervals.

    Returns ``(rows, logs)`` with ``logs`` keyed by policy name.
    """
    trace = list(trace)
    rows, all_logs = [], {}
    for kind in policies:
        report, logs = run_eval(kind, trace, spec, surrogate, tables, params, net, seed, norms)
        if not logs:
            continue
        lo, hi = bootstrap_ci([r.final_log_ppl for r in logs], n_boot, seed=seed)
        rows.append(
            AblationRow(
                report.policy,
                report.n,
                report.mean_log_ppl,
                lo,
                hi,
                report.feasibility_rate,
                report.mean_pruned_mha,
                report.mean_pruned_ffn,
            )
        )
        all_logs[report.policy] = logs
    return rows, all_logs


def sweep_alpha_beta(
    alphas,
    betas,
    trace,
    spec: ModelSpec,
    surrogate: SurrogateModel,
    tables: ImportanceTable,
    policy: PolicyKind = PolicyKind.GSI_STATIC,
    penalty: float = -1.0,
    train_fn=None,
    seed: int = 0,
):
    """One evaluation per (alpha, beta). ``train_fn(params) -> net`` is needed for RAP."""
    trace = list(trace)
    rows = []
    for alpha in alphas:
        for beta in betas:
            params = RewardParams(alpha, beta, penalty)
            net = train_fn(params) if policy == PolicyKind.RAP else None
            report, _ = run_eval(policy, trace, spec, surrogate, tables, params, net, seed)
            rows.append(
                {
                    "alpha": alpha,
                    "beta": beta,
                    "mean_reward": report.mean_reward,
                    "retained_mem_frac": report.mean_retained_mem,
                }
            )
    return rows


def beta_monotonicity_violations(rows) -> int:
    """Count places where retained memory rises with beta at fixed alpha."""
    bad = 0
    for alpha in sorted({r["alpha"] for r in rows}):
        col = sorted((r for r in rows if r["alpha"] == alpha), key=lambda r: r["beta"])
        bad += sum(b["retained_mem_frac"] > a["retained_mem_frac"] for a, b in zip(col, col[1:]))
    return bad


def band_statistic(curves: dict, window: int = 100) -> float:
    """Largest relative deviation of a seed's trailing-window mean return from the cross-seed mean."""
    tails = np.array([np.mean(np.asarray(c)[-window:]) for c in curves.values()])
    center = tails.mean()
    return float(np.max(np.abs(tails - center)) / abs(center))


def seed_robustness(seeds, train_fn, window: int = 100):
    """``train_fn(seed) -> TrainResult``; returns per-seed curves and the band statistic."""
    results = {seed: train_fn(seed) for seed in seeds}
    curves = {seed: res.returns() for seed, res in results.items()}
    return results, band_statistic(curves, window)


@dataclass
class OverheadReport:
    n_params: int
    median_decision_ms: float
    p95_decision_ms: float
    steps: int
    pruned_mha: int
    pruned_ffn: int
    request: tuple


def overhead_report(spec, tables, net, surrogate, records, params=RewardParams(), repeats: int = 50):
    """Time full pruning decisions (reset + steps to feasibility) with the trained policy."""
    records = list(records)
    env = PruningEnv(spec, tables, params)
    pol = Policy(PolicyKind.RAP, net)
    # warm-up and pick the record needing the most steps
    logs = [rollout(pol, env, rec, surrogate) for rec in records]
    worst = max(range(len(records)), key=lambda k: logs[k].pruned_mha + logs[k].pruned_ffn)
    rec = records[worst]
    times = []
    for _ in range(repeats):
        times.append(rollout(pol, env, rec, surrogate).latency_s)
    log = logs[worst]
    return OverheadReport(
        n_params=net.n_params,
        median_decision_ms=1e3 * float(np.median(times)),
        p95_decision_ms=1e3 * float(np.quantile(times, 0.95)),
        steps=log.pruned_mha + log.pruned_ffn,
        pruned_mha=log.pruned_mha,
        pruned_ffn=log.pruned_ffn,
        request=(rec.batch_size, rec.seq_len, rec.budget_fraction),
    )


# --- experiment configuration -------------------------------------------------


# Tuned for the 64-block surrogate; the library defaults (plain SGD, gamma 1)
# learn far more slowly on this task.
EXPERIMENT_DQN = dqn.DqnConfig(
    gamma=0.9,
    optimizer="adam",
    lr=3e-4,
    batch_size=64,
    target_every=1000,
    episodes=1_000_000,
    total_steps=150_000,
)


@dataclass
class Experiment:
    """Everything a CLI run needs, read from one INI file."""

    model: str = "llama2-7b-like"
    surrogate: str = "default-64block"
    surrogate_seed: int = 0
    pair_fraction: float = 0.3
    reward: RewardParams = field(default_factory=RewardParams)
    norms: StateNorms = field(default_factory=StateNorms)
    dqn: dqn.DqnConfig = field(default_factory=lambda: EXPERIMENT_DQN)
    train_trace: TraceGenConfig = field(default_factory=lambda: TraceGenConfig(seed=1, count=5000))
    eval_trace: TraceGenConfig = field(default_factory=lambda: TraceGenConfig(seed=2, count=1000))
    n_boot: int = 1000
    window: int = 100
    seeds: tuple = (0, 1, 2)
    alphas: tuple = (0.2, 0.4, 0.6, 0.8, 1.0)
    betas: tuple = (0.1, 0.2, 0.3, 0.4, 0.5)

    def load_model(self) -> ModelSpec:
        return load_spec(self.model)

    def load_surrogate(self, spec: ModelSpec) -> SurrogateModel:
        if self.surrogate == "generate":
            return gen_surrogate(spec, self.surrogate_seed, SurrogateParams(pair_fraction=self.pair_fraction))
        return load_surrogate(self.surrogate)


def _coerce(cls, raw: dict, section: str):
    types = {f.name: f.type for f in fields(cls)}
    out = {}
    for key, val in raw.items():
        if key not in types:
            raise ValueError(f"[{section}] unknown option {key!r}")
        kind = str(types[key])
        if kind.startswith("int"):
            out[key] = None if val.lower() == "none" else int(val)
        elif kind.startswith("float"):
            out[key] = float(val)
        elif kind.startswith("bool"):
            out[key] = val.lower() in ("1", "true", "yes", "on")
        elif kind.startswith("tuple"):
            out[key] = tuple(float(v) for v in val.replace(",", " ").split())
        else:
            out[key] = val
    return cls(**out)


def load_experiment(path=None) -> Experiment:
    exp = Experiment()
    if path is None:
        return exp
    cp = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    if not cp.read(path):
        raise FileNotFoundError(path)
    if cp.has_section("experiment"):
        sec = cp["experiment"]
        for key, val in sec.items():
            if key in ("model", "surrogate"):
                setattr(exp, key, val)
            elif key in ("surrogate_seed", "n_boot", "window"):
                setattr(exp, key, int(val))
            elif key == "pair_fraction":
                exp.pair_fraction = float(val)
            elif key == "seeds":
                exp.seeds = tuple(int(v) for v in val.replace(",", " ").split())
            elif key in ("alphas", "betas"):
                setattr(exp, key, tuple(float(v) for v in val.replace(",", " ").split()))
            else:
                raise ValueError(f"[experiment] unknown option {key!r}")
    sections = {
        "reward": ("reward", RewardParams),
        "norms": ("norms", StateNorms),
        "dqn": ("dqn", dqn.DqnConfig),
        "train_trace": ("train_trace", TraceGenConfig),
        "eval_trace": ("eval_trace", TraceGenConfig),
    }
    for name, (attr, cls) in sections.items():
        if cp.has_section(name):
            base = asdict(getattr(exp, attr))
            base = {k: str(v) if not isinstance(v, tuple) else " ".join(map(str, v)) for k, v in base.items()}
            base.update(dict(cp[name]))
            setattr(exp, attr, _coerce(cls, base, name))
    return exp


def workload_sampler(records):
    records = list(records)

    def sample(rng):
        return records[int(rng.integers(len(records)))]

    return sample


def env_factory(spec, tables, params, norms):
    def make(rec: TraceRecord):
        return PruningEnv(spec, tables, params, norms, Request(rec.batch_size, rec.seq_len), rec.budget_fraction)

    return make


def train_policy(exp: Experiment, spec, tables, seed: int | None = None, params: RewardParams | None = None):
    cfg = exp.dqn if seed is None else dqn.DqnConfig(**{**asdict(exp.dqn), "seed": seed})
    records = list(generate(exp.train_trace))
    return dqn.train(env_factory(spec, tables, params or exp.reward, exp.norms), workload_sampler(records), cfg)


def write_csv(path, rows, fieldnames=None) -> None:
    rows = [asdict(r) if hasattr(r, "__dataclass_fields__") else r for r in rows]
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
