"""Command line: generate | train | eval | verify | table | oracle.

Exit codes: 0 success, 1 usage or input error, 2 verification failure,
3 internal error.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import reports
from .baselines import GreedyDistancePolicy, OracleTooLarge, RandomPolicy, SjfPolicy, exhaustive_oracle
from .envs import ENVIRONMENTS, env_for, get_env
from .instance_io import InstanceFormatError, file_env, read_instances, write_instances
from .mdp import PRIORITY_KINDS, SolutionTrace, run_rollouts
from .policy import Policy

EXIT_OK, EXIT_USAGE, EXIT_VERIFY, EXIT_INTERNAL = 0, 1, 2, 3
BASELINES = {"random": RandomPolicy, "greedy_distance": GreedyDistancePolicy, "sjf": SjfPolicy}


class UsageError(Exception):
    pass


class VerificationFailed(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def parse_mode(text: str) -> tuple[str, int]:
    if text == "greedy":
        return "greedy", 1
    if text.startswith("sample:"):
        try:
            k = int(text.split(":", 1)[1])
        except ValueError:
            raise UsageError(f"bad sample count in mode {text!r}") from None
        if k < 1:
            raise UsageError("sample count must be >= 1")
        return "sample", k
    raise UsageError(f"mode must be 'greedy' or 'sample:K', got {text!r}")


def _env_kwargs(args) -> dict:
    return {"stages": args.stages} if args.env == "ffsp" else {}


def _get_env(name: str, **kw):
    try:
        return get_env(name, **kw)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


def _write_json(path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2) + "\n"
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)


# --------------------------------------------------------------------------- commands

def cmd_generate(args) -> int:
    env = _get_env(args.env, **_env_kwargs(args))
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    try:
        instances = [env.generate(args.n, args.m, args.seed + i) for i in range(args.count)]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    params = {"n": args.n, "m": args.m, "seed_rule": "seed + index"}
    if args.env == "ffsp":
        params["stages"] = args.stages
    manifest = write_instances(instances, args.out, seed=args.seed, params=params)
    print(f"wrote {manifest.count} {manifest.env} instances to {args.out} (sha256 {manifest.sha256[:12]})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import TrainConfig, train
    cfg = {}
    if args.config:
        try:
            cfg = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from None
    for key in ("env", "seed", "epochs"):
        if getattr(args, key) is not None:
            cfg[key] = getattr(args, key)
    if cfg.get("env", "hcvrp") not in ENVIRONMENTS:
        raise UsageError(f"unknown environment {cfg['env']!r}; valid names: {', '.join(sorted(ENVIRONMENTS))}")
    try:
        config = TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from None
    out = Path(args.out or "run")
    log = (lambda row: print(json.dumps(row, sort_keys=True), flush=True)) if not args.quiet else None
    result = train(config, out_dir=out, resume=args.resume, log=log)
    print(f"checkpoint {result.checkpoint}; metrics {out / 'metrics.csv'}")
    return EXIT_OK


def _load_method(args, env):
    if args.checkpoint:
        try:
            policy, _, _ = Policy.load(args.checkpoint, env)
        except (OSError, ValueError, KeyError) as exc:
            raise UsageError(f"cannot use checkpoint {args.checkpoint}: {exc}") from None
        return policy, args.label or "parallel_ar"
    if args.method not in BASELINES:
        raise UsageError(f"need --checkpoint or --method in {sorted(BASELINES)}")
    policy = BASELINES[args.method]()
    try:
        policy.begin(env, [], np.zeros(0, dtype=np.int64))
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    return policy, args.label or args.method


def _read(path):
    try:
        return read_instances(path)
    except (OSError, InstanceFormatError) as exc:
        raise UsageError(str(exc)) from None


def cmd_eval(args) -> int:
    mode, k = parse_mode(args.mode)
    instances = _read(args.instances)
    env = env_for(instances[0])
    policy, label = _load_method(args, env)
    handler = args.handler or getattr(policy, "handler", "learned")
    label_mode = args.mode
    if isinstance(policy, RandomPolicy) and mode == "greedy":
        # a uniform policy has no argmax; one draw per instance
        mode, label_mode = "sample", "sample:1"
    rows, times, traces = [], [], []
    for i, inst in enumerate(instances):
        rng = np.random.default_rng([args.seed, i])
        t0 = time.perf_counter()
        batch = run_rollouts(env, policy, [inst], np.zeros(k, dtype=np.int64), mode=mode, rng=rng,
                             handler=handler)
        times.append(time.perf_counter() - t0)
        best = batch.traces[int(np.argmin(batch.objectives))]
        rep = env.verify(inst, best)
        if not rep.feasible:
            raise VerificationFailed(f"instance {i}: {rep.first_violation} violated; refusing to report")
        best.seed = args.seed
        traces.append(best)
        rows.append((best.objective, best.steps, best.conflict_rate))
    obj, steps, conf = (np.array(c, dtype=np.float64) for c in zip(*rows))
    report = reports.EvalReport(rows=[reports.EvalRow(
        env=env.name, n=instances[0].n_nodes, m=instances[0].n_agents, method=label, mode=label_mode,
        objective=float(obj.mean()), steps=float(steps.mean()), conflict_rate=float(conf.mean()),
        instances=len(instances), time=float(np.mean(times)))])
    report.write(args.out)
    if args.traces:
        Path(args.traces).write_text("".join(t.to_json() + "\n" for t in traces))
    print(reports.render_markdown([report]))
    return EXIT_OK


def _read_traces(path) -> list[SolutionTrace]:
    try:
        text = Path(path).read_text()
        stripped = text.strip()
        if stripped.startswith("[") or "\n" not in stripped:
            data = json.loads(stripped)
            data = data if isinstance(data, list) else [data]
        else:
            data = [json.loads(line) for line in stripped.splitlines() if line.strip()]
        return [SolutionTrace.from_dict(d) for d in data]
    except (OSError, json.JSONDecodeError, KeyError, ValueError, TypeError) as exc:
        raise UsageError(f"cannot parse trace file {path}: {exc}") from None


def cmd_verify(args) -> int:
    instances = _read(args.instances)
    traces = _read_traces(args.trace)
    kind = file_env(args.instances)
    if args.index is not None:
        instances = [instances[args.index]]
    if len(traces) != len(instances):
        raise UsageError(f"{len(traces)} traces for {len(instances)} instances")
    failed = 0
    for i, (inst, tr) in enumerate(zip(instances, traces)):
        if tr.env != kind:
            raise UsageError(f"trace {i} is for {tr.env!r} but the instances are {kind!r}")
        rep = env_for(inst).verify(inst, tr)
        for line in rep.lines():
            print(f"[{i}] {line}")
        if not rep.feasible:
            failed += 1
            print(f"[{i}] first violation: {rep.first_violation}")
    if failed:
        raise VerificationFailed(f"{failed} of {len(traces)} traces infeasible")
    return EXIT_OK


def cmd_table(args) -> int:
    try:
        reps = [reports.EvalReport.read(p) for p in args.reports]
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"cannot read report: {exc}") from None
    text = reports.render_csv(reps) if args.format == "csv" else reports.render_markdown(reps)
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_oracle(args) -> int:
    if args.instances:
        instances = _read(args.instances)
    else:
        env = _get_env(args.env, **_env_kwargs(args))
        instances = [env.generate(args.n, args.m, args.seed)]
    results = []
    for i, inst in enumerate(instances):
        try:
            res = exhaustive_oracle(inst, env_for(inst), cache_dir=args.cache)
        except OracleTooLarge as exc:
            raise UsageError(f"instance {i}: {exc}") from None
        results.append({"index": i, "objective": res.objective, "nodes_explored": res.nodes_explored,
                         "trace": res.trace.to_dict()})
        print(f"[{i}] optimum {res.objective:.6f} ({res.nodes_explored} nodes)")
    if args.out:
        Path(args.out).write_text("".join(json.dumps(r, sort_keys=True) + "\n" for r in results))
    return EXIT_OK


# --------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="parallel-ar", description="Parallel multi-agent construction: tools and benchmarks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def sizes(sp, need: bool):
        sp.add_argument("--env", choices=sorted(ENVIRONMENTS), required=need, default=None if need else "hcvrp")
        sp.add_argument("--n", type=int, required=need, default=None if need else 5)
        sp.add_argument("--m", type=int, required=need, default=None if need else 2,
                        help="agents; for ffsp the total machine count, split evenly over --stages")
        sp.add_argument("--stages", type=int, default=3)
        sp.add_argument("--seed", type=int, default=0)

    g = sub.add_parser("generate", help="write seeded instances as JSON lines")
    sizes(g, True)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="REINFORCE training from a JSON config")
    t.add_argument("--config")
    t.add_argument("--env", default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--epochs", type=int, default=None)
    t.add_argument("--resume")
    t.add_argument("--out")
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint or a baseline on an instance file")
    e.add_argument("--instances", required=True)
    e.add_argument("--checkpoint")
    e.add_argument("--method", choices=sorted(BASELINES))
    e.add_argument("--label")
    e.add_argument("--mode", default="greedy", help="greedy or sample:K")
    e.add_argument("--samples", type=int, help="shorthand for --mode sample:K")
    e.add_argument("--handler", choices=PRIORITY_KINDS)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out")
    e.add_argument("--traces", help="write the best trace per instance as JSON lines")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="check traces against the constraint sets")
    v.add_argument("--instances", required=True)
    v.add_argument("--trace", required=True)
    v.add_argument("--index", type=int)
    v.set_defaults(func=cmd_verify)

    tb = sub.add_parser("table", help="render eval reports as a grouped table")
    tb.add_argument("reports", nargs="+")
    tb.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    tb.add_argument("--out")
    tb.set_defaults(func=cmd_table)

    o = sub.add_parser("oracle", help="exhaustive optimum of tiny instances")
    sizes(o, False)
    o.add_argument("--instances")
    o.add_argument("--cache")
    o.add_argument("--out")
    o.set_defaults(func=cmd_oracle)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "samples", None):
        args.mode = f"sample:{args.samples}"
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except VerificationFailed as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY
    except Exception as exc:  # noqa: BLE001
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
