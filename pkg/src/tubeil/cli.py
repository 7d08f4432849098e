"""Command-line entry point: ``tubeil <command> [options]``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import TubeILError


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="YAML file merged over the defaults")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one setting, e.g. --set linear.horizon=20 (repeatable)")
    p.add_argument("--artifacts", default="tubeil-artifacts",
                   help="directory caching tubes and the flip plan (default: %(default)s)")


def _task(p: argparse.ArgumentParser) -> None:
    p.add_argument("--task", choices=("linear", "flip"), default="linear")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="tubeil", description="Tube-guided imitation of robust MPC experts.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate-tube", help="estimate (and cache) the tube of a task")
    _common(p)
    _task(p)

    p = sub.add_parser("demo", help="collect one expert demonstration as a CSV dataset")
    _common(p)
    _task(p)
    p.add_argument("--domain", default="S")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--augment", choices=("sparse", "dense", "uniform"))
    p.add_argument("--samples", type=int, default=25, help="per-step samples for --augment uniform")
    p.add_argument("--out", required=True, help="output CSV")

    p = sub.add_parser("train", help="run one imitation-learning method and save the policy")
    _common(p)
    _task(p)
    p.add_argument("--method", default="DAgger+SA-sparse", help="BC, DAgger, X+DR, X+SA-sparse, X+SA-25 ...")
    p.add_argument("--demos", type=int, default=1)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--fine-tune", type=int, default=0, help="extra source-domain demonstrations")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--eval-domains", nargs="*", default=None)
    p.add_argument("--out", required=True, help="policy file")
    p.add_argument("--curve", help="learning-curve JSON lines output")

    p = sub.add_parser("evaluate", help="evaluate a policy (or the expert) on a domain")
    _common(p)
    _task(p)
    p.add_argument("--policy", help="policy file; omit to evaluate the expert")
    p.add_argument("--domain", default="T1")
    p.add_argument("--episodes", type=int, default=None)
    p.add_argument("--out", help="per-episode CSV")

    p = sub.add_parser("suite", help="run a manifest of experiment cells (resumable)")
    p.add_argument("manifest")
    p.add_argument("--out", required=True, help="result directory")
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("timing", help="per-action latency of expert and policy")
    _common(p)
    _task(p)
    p.add_argument("--policy", help="policy file; omit for a randomly initialized network")
    p.add_argument("-n", type=int, default=1000)
    return ap


def _workspace(args):
    from .suite import Workspace
    cfg = config_mod.load(args.config, args.overrides)
    out = Path(args.artifacts)
    out.mkdir(parents=True, exist_ok=True)
    return Workspace(out, cfg)


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, default=lambda v: v.tolist() if isinstance(v, np.ndarray) else str(v)))


def cmd_estimate_tube(args) -> int:
    ws = _workspace(args)
    setup = ws.pipeline(args.task).setup
    if args.task == "linear":
        _print({"tube_halfwidth": setup.Z.halfwidth, "tube_center": setup.Z.center, "artifacts": str(ws.out)})
    else:
        _print({"state_tube_halfwidth": setup.T_state.halfwidth, "action_tube_halfwidth": setup.T_action.halfwidth,
                "plan_steps": setup.plan.steps, "artifacts": str(ws.out)})
    return 0


def cmd_demo(args) -> int:
    from .policy import Dataset
    ws = _workspace(args)
    pipe = ws.pipeline(args.task)
    demo = pipe.collect(None, 1.0, pipe.domain(args.domain), args.seed, for_augmentation=bool(args.augment))
    X, U = demo.pairs()
    data = Dataset.empty(pipe.n_features, pipe.n_actions)
    if X is not None:
        data.add(X, U, "demo")
    if args.augment:
        Xa, Ua = pipe.augment(demo, args.augment, args.samples, np.random.default_rng(args.seed))
        if len(Xa):
            data.add(Xa, Ua, "augmented")
    data.save_csv(args.out)
    _print({"success": demo.success, "rows": len(data), "augmented_rows": data.count("augmented")})
    return 0 if demo.success else 1


def cmd_train(args) -> int:
    from .suite import Cell, run_cell
    ws = _workspace(args)
    domains = args.eval_domains
    if domains is None:
        domains = ["T1"] if args.task == "linear" else ["S", "T_flip"]
    cell = Cell(args.task, args.method, args.seed, args.demos, tuple(domains), None, args.batch, args.fine_tune)
    out = Path(args.out)
    curve = run_cell(cell, ws, policy_dir=out.parent if out.parent != Path("") else Path("."))
    (out.parent / f"{cell.key}.mlp").replace(out)
    if args.curve:
        with open(args.curve, "w") as fh:
            for r in curve:
                fh.write(json.dumps(r) + "\n")
    for r in curve:
        print(f"demos={r['demo_idx']:3d} domain={r['domain']:6s} success={r['success_rate']:5.1f}% "
              f"gap={r['expert_gap']:.2f}%")
    return 0


def cmd_evaluate(args) -> int:
    from .imitation import expert_gap, mean_cost, success_rate
    from .policy import MlpPolicy
    from .suite import eval_seeds
    ws = _workspace(args)
    pipe = ws.pipeline(args.task)
    seeds = range(args.episodes) if args.episodes else eval_seeds(ws.cfg)
    dom = pipe.domain(args.domain)
    expert = pipe.evaluate(None, dom, seeds)
    res = expert if not args.policy else pipe.evaluate(MlpPolicy.load(args.policy), dom, seeds)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("seed,success,cost\n")
            for r in res:
                fh.write(f"{r.seed},{int(r.success)},{r.cost!r}\n")
    _print({"domain": args.domain, "episodes": len(res), "success_rate": success_rate(res),
            "stage_cost": mean_cost(res), "expert_gap": expert_gap(res, expert)})
    return 0


def cmd_suite(args) -> int:
    from .suite import load_manifest, run_suite
    manifest = load_manifest(args.manifest)
    report = run_suite(manifest, args.out, workers=args.workers, log=lambda s: print(s, flush=True))
    print(f"ran {len(report['ran'])}, skipped {len(report['skipped'])}, failed {len(report['failed'])}")
    return 1 if report["failed"] else 0


def cmd_timing(args) -> int:
    from .policy import MlpPolicy
    from .suite import flip_timing_callables, linear_timing_callables, timing_report
    ws = _workspace(args)
    pipe = ws.pipeline(args.task)
    if args.policy:
        policy = MlpPolicy.load(args.policy)
    else:
        policy = MlpPolicy.init([pipe.n_features, *pipe.hidden, pipe.n_actions], np.random.default_rng(0))
    make = linear_timing_callables if args.task == "linear" else flip_timing_callables
    _print(timing_report(*make(pipe.setup, policy), n=args.n))
    return 0


COMMANDS = {"estimate-tube": cmd_estimate_tube, "demo": cmd_demo, "train": cmd_train,
            "evaluate": cmd_evaluate, "suite": cmd_suite, "timing": cmd_timing}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (TubeILError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
