"""Experiment runner and command-line interface.

Subcommands:
  solve     closed-form optimal routing plus sensitivity diagnostics (JSON)
  simulate  single-system steady-state run (JSON)
  regret    seeded coupled-replication experiment, aggregated to CSV
  verify    self-check suite over the solver, coupling, and bounds (JSON)

Exit codes: 0 success, 1 check failure, 2 configuration error.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import json
import sys
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .estimation import concentration_bound
from .model import (
    RandomStream,
    StabilityError,
    SystemParams,
    geo_mean_queue,
    geometric_fleet,
    total_mean_queue,
)
from .policies import PolicySpec, parse_policy
from .routing import (
    optimal_routing,
    oracle_optimal_routing,
    residual_capacities,
    routing_for_support,
    sensitivity_constants,
    sorted_server_order,
)
from .sim import (
    Scenario,
    geometric_checkpoints,
    run_coupled,
    run_single,
    sample_maximal_coupling,
    tv_distance,
)


def _fmt(x: float) -> str:
    return f"{float(x):.17g}"


@dataclass(frozen=True)
class ExperimentConfig:
    """A regret experiment: one service-rate fleet, a lambda sweep, a policy
    list, and R seeded replications per (policy, lambda) scenario."""

    mu: tuple[float, ...]
    lambdas: tuple[float, ...]
    policies: tuple[str, ...]
    horizon: int
    replications: int
    base_seed: int = 0
    checkpoint_count: int = 64
    checkpoints: tuple[int, ...] = ()
    workers: int = 1

    def __post_init__(self):
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not self.lambdas or not self.policies or not self.mu:
            raise ValueError("mu, lambdas and policies must be nonempty")
        cps = self.checkpoints or geometric_checkpoints(
            self.horizon, self.checkpoint_count)
        object.__setattr__(self, "checkpoints", tuple(int(c) for c in cps))

    def scenarios(self) -> list[tuple[str, float, Scenario]]:
        out = []
        for pol in self.policies:
            for lam in self.lambdas:
                spec = parse_policy(pol)
                scenario = Scenario(
                    params=SystemParams(lam=lam, mu=self.mu),
                    horizon=self.horizon,
                    policy=spec,
                    checkpoints=self.checkpoints,
                )
                out.append((pol, lam, scenario))
        return out


def _replication_seed(base_seed: int, policy: str, lam: float, rep: int) -> int:
    """Stable per-replication seed: independent of scenario ordering, so
    adding scenarios to a config never perturbs existing traces."""
    tag = (zlib.crc32(policy.encode()), int(round(lam * 1e9)) & 0xFFFFFFFF, rep)
    ss = np.random.SeedSequence(entropy=base_seed, spawn_key=tag)
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def _run_one(task):
    policy, lam, scenario, seed, rep = task
    trace, _ = run_coupled(scenario, seed)
    return policy, lam, rep, seed, trace.values


@dataclass(frozen=True)
class AggregateRow:
    policy: str
    lam: float
    t: int
    mean_regret: float
    std_regret: float
    reps: int


def run_experiment(config: ExperimentConfig):
    """Run all scenario x replication coupled simulations and aggregate
    per-checkpoint mean and std. Deterministic for a fixed base seed,
    independent of worker count (results are folded in replication order).

    Returns (rows, raw) where raw maps (policy, lambda, rep) ->
    (seed, trace values).
    """
    tasks = []
    for policy, lam, scenario in config.scenarios():
        for rep in range(config.replications):
            seed = _replication_seed(config.base_seed, policy, lam, rep)
            tasks.append((policy, lam, scenario, seed, rep))

    if config.workers > 1:
        with concurrent.futures.ProcessPoolExecutor(config.workers) as pool:
            results = list(pool.map(_run_one, tasks, chunksize=8))
    else:
        results = [_run_one(t) for t in tasks]
    results.sort(key=lambda r: (r[0], r[1], r[2]))

    raw = {(pol, lam, rep): (seed, values)
           for pol, lam, rep, seed, values in results}
    rows = []
    for policy, lam, scenario in config.scenarios():
        data = np.array(
            [raw[(policy, lam, rep)][1] for rep in range(config.replications)],
            dtype=np.float64,
        )
        mean = data.mean(axis=0)
        std = data.std(axis=0, ddof=0)
        for j, t in enumerate(scenario.checkpoints):
            rows.append(AggregateRow(policy, lam, int(t),
                                     float(mean[j]), float(std[j]),
                                     config.replications))
    rows.sort(key=lambda r: (r.policy, r.lam, r.t))
    return rows, raw


CSV_HEADER = "policy,lambda,t,mean_regret,std_regret,reps"


def rows_to_csv(rows) -> str:
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(",".join([
            r.policy, _fmt(r.lam), str(r.t),
            _fmt(r.mean_regret), _fmt(r.std_regret), str(r.reps),
        ]))
    return "\n".join(lines) + "\n"


def raw_to_jsonl(raw, checkpoints) -> str:
    lines = []
    for (policy, lam, rep), (seed, values) in sorted(raw.items()):
        lines.append(json.dumps({
            "policy": policy, "lambda": lam, "rep": rep, "seed": seed,
            "checkpoints": list(checkpoints), "regret": list(values),
        }, sort_keys=True))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# subcommands


def _parse_mu(text: str) -> tuple[float, ...]:
    return tuple(float(x) for x in text.split(","))


def solve_report(params: SystemParams, gap_resolution=1e-4, gap_samples=200) -> dict:
    star = optimal_routing(params)
    consts = sensitivity_constants(
        params, resolution=gap_resolution, sample_budget=gap_samples)
    return {
        "lambda": params.lam,
        "mu": list(params.mu),
        "p": list(star.p),
        "support": sorted(star.support),
        "mean_total_queue": total_mean_queue(params, star),
        "r": list(consts.r),
        "delta_cap": consts.delta_cap,
        "c": consts.c,
        "c_g": consts.c_g,
        "delta_S_interval": list(consts.delta_s_interval),
        "zero_tolerance_gap": consts.zero_tolerance_gap,
    }


def cmd_solve(args) -> int:
    params = _params_from_args(args)
    report = solve_report(params, args.gap_resolution, args.gap_samples)
    print(json.dumps(report, indent=2, default=_fmt))
    return 0


def _params_from_args(args) -> SystemParams:
    if args.mu is not None:
        return SystemParams(lam=args.lam, mu=_parse_mu(args.mu))
    return geometric_fleet(args.lam, K=args.servers)


def cmd_simulate(args) -> int:
    params = _params_from_args(args)
    external = _parse_mu(args.external) if args.external else None
    scenario = Scenario(
        params=params, horizon=args.horizon,
        policy=parse_policy(args.policy), external=external,
    )
    metrics = run_single(scenario, seed=args.seed)
    out = {
        "policy": args.policy,
        "lambda": params.lam,
        "horizon": args.horizon,
        "seed": args.seed,
        "time_avg_total_queue": metrics.time_avg_total_queue,
        "utilization": list(metrics.utilization),
        "mean_response_time": metrics.mean_response_time,
        "dispatched_jobs": metrics.dispatched_jobs,
        "completed_jobs": metrics.completed_jobs,
    }
    if scenario.policy.kind == "owr":
        out["formula_total_queue"] = total_mean_queue(
            scenario.routing_params(),
            optimal_routing(scenario.routing_params()))
    print(json.dumps(out, indent=2, default=_fmt))
    return 0


def load_config(args) -> ExperimentConfig:
    data = {}
    if args.config:
        with open(args.config, "rb") as fh:
            data = tomllib.load(fh).get("experiment", {})
    mu = tuple(data.get("mu", ()))
    if args.mu:
        mu = _parse_mu(args.mu)
    if not mu:
        mu = geometric_fleet(0.5).mu  # rates only; lambda comes from the sweep
    lambdas = tuple(data.get("lambdas", ()))
    if args.lam is not None:
        lambdas = (args.lam,)
    policies = tuple(data.get("policies", ()))
    if args.policies:
        policies = tuple(args.policies.split(","))
    return ExperimentConfig(
        mu=mu,
        lambdas=lambdas or (0.2,),
        policies=policies or ("eps-klnt",),
        horizon=args.horizon or int(data.get("horizon", 100_000)),
        replications=args.reps or int(data.get("replications", 100)),
        base_seed=args.seed if args.seed is not None
        else int(data.get("base_seed", 0)),
        checkpoint_count=int(data.get("checkpoint_count", 64)),
        checkpoints=tuple(data.get("checkpoints", ())),
        workers=args.workers or int(data.get("workers", 1)),
    )


def cmd_regret(args) -> int:
    try:
        config = load_config(args)
    except (ValueError, StabilityError, OSError, tomllib.TOMLDecodeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    rows, raw = run_experiment(config)
    csv_text = rows_to_csv(rows)
    if args.out:
        Path(args.out).write_text(csv_text)
    else:
        sys.stdout.write(csv_text)
    if args.raw:
        Path(args.raw).write_text(raw_to_jsonl(raw, config.checkpoints))
    return 0


# ---------------------------------------------------------------------------
# verify


def _random_instance(rng, K=None) -> SystemParams:
    K = K or int(rng.integers(1, 9))
    mu = rng.uniform(0.02, 0.98, size=K)
    lam = rng.uniform(0.01, 0.99) * mu.sum()
    lam = min(max(lam, 1e-3), 0.99)
    if lam >= mu.sum():
        lam = 0.9 * mu.sum()
    return SystemParams(lam=float(lam), mu=tuple(mu))


def verify_checks(seed: int = 0, fast: bool = True) -> list[dict]:
    """The oracle/invariant suite behind the `verify` subcommand."""
    from scipy import stats

    checks = []
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))

    def add(name, ok, detail):
        checks.append({"name": name, "pass": bool(ok), "detail": detail})

    # solver vs enumeration oracle + support-set lemmas
    n_inst = 300 if fast else 1000
    worst = 0.0
    lemma_ok = True
    for _ in range(n_inst):
        params = _random_instance(rng)
        a = optimal_routing(params)
        b = oracle_optimal_routing(params)
        worst = max(worst, float(np.abs(a.as_array() - b.as_array()).max()))
        order = sorted_server_order(params.mu)
        p = a.as_array()
        if np.any(np.diff(p[order]) > 1e-12):
            lemma_ok = False
        r = residual_capacities(params, a)
        sup = sorted(a.support)
        ratios = [r[i] / np.sqrt(params.mu[i] * (1 - params.mu[i])) for i in sup]
        if max(ratios) - min(ratios) > 1e-9:
            lemma_ok = False
        if len(sup) < params.K:
            nxt = order[:len(sup) + 1]
            if sum(params.mu[i] for i in nxt) > params.lam:
                cand = routing_for_support(params, nxt)
                if not (cand[nxt] <= 1e-12).any():
                    lemma_ok = False
    add("oracle_equivalence", worst <= 1e-9, {"instances": n_inst, "max_err": worst})
    add("support_set_lemmas", lemma_ok, {"instances": n_inst})

    # maximal coupling exactness
    n_draw = 200_000 if fast else 1_000_000
    coupling_ok = True
    worst_z = 0.0
    for _ in range(5):
        K = int(rng.integers(2, 7))
        p = rng.dirichlet(np.ones(K))
        q = rng.dirichlet(np.ones(K))
        sig, sig_s = sample_maximal_coupling(p, q, rng, size=n_draw)
        d = tv_distance(p, q)
        se = max(np.sqrt(d * (1 - d) / n_draw), 1e-12)
        z = abs((sig != sig_s).mean() - d) / se
        worst_z = max(worst_z, float(z))
        if z > 4:
            coupling_ok = False
        for vec, draws in ((p, sig), (q, sig_s)):
            obs = np.bincount(draws, minlength=K)
            if stats.chisquare(obs, vec * n_draw).pvalue < 1e-3:
                coupling_ok = False
    add("maximal_coupling", coupling_ok, {"draws": n_draw, "worst_z": worst_z})

    # mismatch probability bound under a pinned exploit distribution
    params = SystemParams(lam=0.5, mu=(0.45, 0.55))
    pinned = (0.3, 0.7)  # differs from p* = (0.4, 0.6) so the bound is non-vacuous
    spec = PolicySpec(kind="pinned", pinned_p=pinned)
    scenario = Scenario(params=params, horizon=200_000, policy=spec)
    trace, diag = run_coupled(scenario, seed=seed + 1)
    p_star = diag.p_star.as_array()
    mismatch_ok = True
    detail = {}
    for i in range(params.K):
        n_i = diag.exploit_counts_first_half[i] + diag.exploit_counts_second_half[i]
        bound = abs(pinned[i] - p_star[i])
        freq = diag.mismatch[i] / diag.exploit_slots
        se = np.sqrt(max(bound * (1 - bound), 1e-12) / diag.exploit_slots)
        detail[f"server_{i}"] = {"freq": float(freq), "bound": float(bound)}
        if freq > bound + 3 * se:
            mismatch_ok = False
    add("mismatch_bound", mismatch_ok, detail)

    # geometric concentration tail
    n, mu_c, delta = 100, 0.5, 0.1
    trials = 20_000 if fast else 100_000
    samples = rng.geometric(mu_c, size=(trials, n))
    est = n / samples.sum(axis=1)
    tail = (np.abs(est - mu_c) >= delta).mean()
    bound = concentration_bound(n, delta, mu_c)
    se = np.sqrt(bound * (1 - bound) / trials)
    add("concentration_tail", tail <= bound + 3 * se,
        {"empirical": float(tail), "bound": float(bound)})

    # steady-state formula
    params = SystemParams(lam=0.2, mu=(0.45, 0.55))
    scen = Scenario(params=params, horizon=500_000 if fast else 2_000_000,
                    policy=PolicySpec(kind="owr"))
    metrics = run_single(scen, seed=seed + 2)
    expect = total_mean_queue(params, optimal_routing(params))
    rel = abs(metrics.time_avg_total_queue - expect) / expect
    add("steady_state_formula", rel < 0.05,
        {"simulated": metrics.time_avg_total_queue, "formula": expect})

    # sensitivity of the routing vector to rate error
    sens_ok = True
    tested = 0
    for _ in range(40):
        params = _random_instance(rng, K=int(rng.integers(2, 5)))
        try:
            consts = sensitivity_constants(
                params, resolution=1e-3, sample_budget=50, seed=seed)
        except (ValueError, StabilityError):
            continue
        if consts.delta_cap <= 0:
            continue
        tested += 1
        delta = consts.delta_cap / 2
        star = optimal_routing(params).as_array()
        bound_vec = consts.bound_p_error(delta)
        for _ in range(20):
            pert = np.clip(
                params.mu_array() + rng.uniform(-delta, delta, params.K),
                1e-6, 1 - 1e-6)
            p_hat = optimal_routing(
                SystemParams(lam=params.lam, mu=tuple(pert))).as_array()
            if (np.abs(p_hat - star) > bound_vec + 1e-12).any():
                sens_ok = False
    add("sensitivity_bound", sens_ok and tested > 0, {"instances": tested})

    return checks


def cmd_verify(args) -> int:
    checks = verify_checks(seed=args.seed, fast=not args.full)
    ok = all(c["pass"] for c in checks)
    print(json.dumps({"pass": ok, "checks": checks}, indent=2, default=_fmt))
    return 0 if ok else 1


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="qdispatch",
        description="Optimal weighted random routing and dispatch-policy "
                    "regret simulation for discrete-time multi-server queues.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_params(p):
        p.add_argument("--lambda", dest="lam", type=float, default=0.2,
                       help="arrival rate per slot")
        p.add_argument("--mu", type=str, default=None,
                       help="comma-separated service rates")
        p.add_argument("--servers", type=int, default=6,
                       help="fleet size for the default geometric rates")

    p = sub.add_parser("solve", help="closed-form optimal routing report")
    add_params(p)
    p.add_argument("--gap-resolution", type=float, default=1e-4)
    p.add_argument("--gap-samples", type=int, default=200)
    p.set_defaults(func=cmd_solve)

    p = sub.add_parser("simulate", help="single-system steady-state run")
    add_params(p)
    p.add_argument("--policy", type=str, default="owr")
    p.add_argument("--horizon", type=int, default=1_000_000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--external", type=str, default=None,
                   help="comma-separated per-server external arrival rates")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("regret", help="coupled regret experiment to CSV")
    p.add_argument("--config", type=str, default=None, help="TOML config file")
    p.add_argument("--lambda", dest="lam", type=float, default=None)
    p.add_argument("--mu", type=str, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--reps", type=int, default=None)
    p.add_argument("--policies", type=str, default=None,
                   help="comma-separated policy names")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--workers", type=int, default=None)
    p.add_argument("--out", type=str, default=None, help="CSV output path")
    p.add_argument("--raw", type=str, default=None,
                   help="JSON-lines per-replication trace output path")
    p.set_defaults(func=cmd_regret)

    p = sub.add_parser("verify", help="run the oracle/invariant suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--full", action="store_true",
                   help="full-size Monte Carlo budgets")
    p.set_defaults(func=cmd_verify)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, StabilityError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
