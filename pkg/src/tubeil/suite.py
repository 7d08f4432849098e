"""Experiment manifests, resumable suite runs and latency reports.

A manifest is a YAML file::

    name: fig5
    config: base.yaml            # optional, relative to the manifest
    overrides: ["evaluation.episodes=10"]
    cells:
      - task: linear             # linear | flip
        methods: [BC, DAgger+SA-sparse]
        seeds: [0, 1, 2]
        demos: 10
        eval_domains: [T1]
        eval_at: [1, 2, 5, 10]   # optional
        batch: 1                 # demonstrations per update
        fine_tune: 0             # extra source-domain demonstrations afterwards

Each (task, method, seed) triple is one cell.  A finished cell is written
atomically to ``cells/<key>.json`` and skipped on the next run; failed cells
are recorded in ``failures.json`` and retried next time.
"""
from __future__ import annotations

import csv
import json
import os
import statistics
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import yaml

from . import config as config_mod
from .errors import ConfigError

TASKS = ("linear", "flip")
CURVE_FIELDS = ("task", "method", "seed", "demo_idx", "domain", "fine_tuned", "success_rate", "stage_cost",
                "expert_gap", "wall_clock_s", "rows", "augmented_rows")


@dataclass
class Cell:
    task: str
    method: str
    seed: int
    demos: int
    eval_domains: Sequence[str]
    eval_at: Optional[Sequence[int]] = None
    batch: int = 1
    fine_tune: int = 0

    @property
    def key(self) -> str:
        return f"{self.task}__{self.method}__seed{self.seed}"

    def to_dict(self) -> dict:
        return dict(task=self.task, method=self.method, seed=self.seed, demos=self.demos,
                    eval_domains=list(self.eval_domains),
                    eval_at=None if self.eval_at is None else list(self.eval_at),
                    batch=self.batch, fine_tune=self.fine_tune)


@dataclass
class Manifest:
    name: str
    cells: List[Cell]
    config: dict
    raw: dict = field(default_factory=dict)


def parse_manifest(raw: Optional[dict], base_dir: Path = Path(".")) -> Manifest:
    from .imitation import IlConfig
    raw = raw or {}
    cfg_path = raw.get("config")
    if cfg_path:
        cfg_path = str((base_dir / cfg_path).resolve())
    cfg = config_mod.load(cfg_path, raw.get("overrides", ()))
    cells = []
    for i, group in enumerate(raw.get("cells") or []):
        task = group.get("task")
        if task not in TASKS:
            raise ConfigError(f"cell group {i}: unknown task {task!r}")
        demos = int(group.get("demos", 0))
        if demos < 0:
            raise ConfigError(f"cell group {i}: demos must be >= 0")
        for method in group.get("methods", []):
            IlConfig.parse(method)          # validate early
            for seed in group.get("seeds", [0]):
                cells.append(Cell(task, method, int(seed), demos,
                                  tuple(group.get("eval_domains", ["T1"] if task == "linear" else ["T_flip"])),
                                  group.get("eval_at"), int(group.get("batch", 1)), int(group.get("fine_tune", 0))))
    keys = [c.key for c in cells]
    if len(set(keys)) != len(keys):
        raise ConfigError("manifest lists the same (task, method, seed) cell twice")
    return Manifest(raw.get("name", "suite"), cells, cfg, raw)


def load_manifest(path) -> Manifest:
    path = Path(path)
    with open(path) as fh:
        raw = yaml.safe_load(fh) or {}
    return parse_manifest(raw, path.parent)


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# -- shared artifacts ----------------------------------------------------------

class Workspace:
    """Setups shared by the cells of one result directory.  The tube and the
    flip plan are estimated once and cached on disk so reruns (and other
    worker processes) reuse them."""

    def __init__(self, out: Path, cfg: dict):
        self.out = Path(out)
        self.cfg = cfg
        self._pipelines: Dict[str, object] = {}
        self.expert_cache: Dict[str, dict] = {}

    def pipeline(self, task: str):
        if task not in self._pipelines:
            self._pipelines[task] = self._linear() if task == "linear" else self._flip()
        return self._pipelines[task]

    def _linear(self):
        from .linear_env import LinearPipeline, build_linear_setup
        from .sets import AxisBox
        path = self.out / "linear_tube.json"
        tube = AxisBox.load(path) if path.exists() else None
        setup = build_linear_setup(self.cfg, tube=tube)
        if tube is None:
            setup.Z.save(path)
        return LinearPipeline(setup)

    def _flip(self):
        from .flip_env import FlipPipeline, build_flip_setup
        from .nonlinear.planner import SafePlan
        from .sets import AxisBox
        plan_p, ts_p, ta_p = (self.out / n for n in ("flip_plan.json", "flip_state_tube.json",
                                                     "flip_action_tube.json"))
        plan = SafePlan.load(plan_p) if plan_p.exists() else None
        tubes = (AxisBox.load(ts_p), AxisBox.load(ta_p)) if ts_p.exists() and ta_p.exists() else None
        setup = build_flip_setup(self.cfg, plan=plan, tubes=tubes)
        if plan is None:
            setup.plan.save(plan_p)
        if tubes is None:
            setup.T_state.save(ts_p)
            setup.T_action.save(ta_p)
        return FlipPipeline(setup)


def eval_seeds(cfg: dict) -> range:
    return range(cfg["evaluation"]["episodes"])


def run_cell(cell: Cell, ws: Workspace, policy_dir: Optional[Path] = None) -> List[dict]:
    """Learning curve of one cell (list of records)."""
    from .imitation import IlConfig, evaluate_policy, fine_tune, run_il
    cfg = ws.cfg
    pipe = ws.pipeline(cell.task)
    ic = IlConfig.parse(cell.method, batch=cell.batch, beta=tuple(cfg["imitation"]["dagger_beta"]),
                        n_samples=cfg["imitation"]["uniform_samples"])
    cache = ws.expert_cache.setdefault(cell.task, {})
    seeds = eval_seeds(cfg)
    run = run_il(pipe, ic, cell.demos, seed=cell.seed, eval_domains=cell.eval_domains, eval_seeds=seeds,
                 eval_at=cell.eval_at, expert_cache=cache)
    curve = [dict(task=cell.task, fine_tuned=False, **r) for r in run.curve]
    policy = run.policy
    if cell.fine_tune and policy is not None:
        t0 = time.perf_counter()
        policy, data = fine_tune(pipe, policy, cell.fine_tune, seed=cell.seed)
        dt = time.perf_counter() - t0
        base = curve[-1]["wall_clock_s"] if curve else 0.0
        for dom, m in evaluate_policy(pipe, policy, cell.eval_domains, seeds, cache).items():
            curve.append(dict(task=cell.task, fine_tuned=True, method=ic.name, seed=cell.seed,
                              demo_idx=cell.demos + cell.fine_tune, domain=dom, wall_clock_s=base + dt,
                              rows=len(data), augmented_rows=0, **m))
    if policy_dir is not None and policy is not None:
        policy.save(policy_dir / f"{cell.key}.mlp")
    return curve


def _clean(v):
    if isinstance(v, float) and not np.isfinite(v):
        return None
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    return v


def run_suite(manifest: Manifest, out, workers: int = 1,
              log: Callable[[str], None] = lambda s: None) -> dict:
    """Run every pending cell and rewrite the summary files.

    Returns ``{"ran": [...], "skipped": [...], "failed": {key: error}}``.
    """
    out = Path(out)
    (out / "cells").mkdir(parents=True, exist_ok=True)
    (out / "policies").mkdir(exist_ok=True)
    _atomic_write(out / "manifest.yaml", yaml.safe_dump(manifest.raw, sort_keys=False))
    pending, skipped = [], []
    for cell in manifest.cells:
        (skipped if (out / "cells" / f"{cell.key}.json").exists() else pending).append(cell)
    failed: Dict[str, str] = {}
    ran: List[str] = []
    if workers > 1 and len(pending) > 1:
        from concurrent.futures import ProcessPoolExecutor
        # build the shared artifacts once before forking work out
        for task in sorted({c.task for c in pending}):
            Workspace(out, manifest.config).pipeline(task)
        with ProcessPoolExecutor(workers) as pool:
            futures = {c.key: pool.submit(_cell_job, c, out, manifest.config) for c in pending}
            for key, fut in futures.items():
                err = fut.result()
                (failed.__setitem__(key, err) if err else ran.append(key))
                log(f"{key}: {'FAILED' if err else 'done'}")
    else:
        ws = Workspace(out, manifest.config)
        for cell in pending:
            err = _execute(cell, ws, out)
            (failed.__setitem__(cell.key, err) if err else ran.append(cell.key))
            log(f"{cell.key}: {'FAILED' if err else 'done'}")
    _atomic_write(out / "failures.json", json.dumps(failed, indent=2))
    write_summary(out, manifest)
    return {"ran": ran, "skipped": [c.key for c in skipped], "failed": failed}


def _execute(cell: Cell, ws: Workspace, out: Path) -> Optional[str]:
    try:
        curve = run_cell(cell, ws, out / "policies")
    except Exception:                      # a failed cell must not stop the suite
        return traceback.format_exc(limit=5)
    doc = {"cell": cell.to_dict(), "curve": [{k: _clean(v) for k, v in r.items()} for r in curve]}
    _atomic_write(out / "cells" / f"{cell.key}.json", json.dumps(doc))
    return None


def _cell_job(cell: Cell, out: Path, cfg: dict) -> Optional[str]:
    return _execute(cell, Workspace(out, cfg), out)


def load_curves(out) -> List[dict]:
    recs = []
    for p in sorted((Path(out) / "cells").glob("*.json")):
        recs.extend(json.loads(p.read_text())["curve"])
    return recs


def _stats(vals):
    vals = [v for v in vals if v is not None]
    if not vals:
        return None, None
    return float(np.mean(vals)), float(np.std(vals))


def summarize(records: Sequence[dict]) -> List[dict]:
    """Mean and std over seeds per (task, method, domain, demo_idx, fine_tuned)."""
    groups: Dict[tuple, List[dict]] = {}
    for r in records:
        groups.setdefault((r["task"], r["method"], r["domain"], r["demo_idx"], r["fine_tuned"]), []).append(r)
    rows = []
    for (task, method, dom, n, ft), rs in sorted(groups.items(), key=lambda kv: tuple(map(str, kv[0][:3])) + kv[0][3:]):
        row = dict(task=task, method=method, domain=dom, demo_idx=n, fine_tuned=ft, seeds=len(rs))
        for m in ("success_rate", "stage_cost", "expert_gap", "wall_clock_s"):
            row[f"{m}_mean"], row[f"{m}_std"] = _stats([r[m] for r in rs])
        rows.append(row)
    return rows


def write_summary(out, manifest: Optional[Manifest] = None) -> List[dict]:
    out = Path(out)
    records = load_curves(out)
    with open(out / "curves.jsonl.tmp", "w") as fh:
        for r in records:
            fh.write(json.dumps(r) + "\n")
    os.replace(out / "curves.jsonl.tmp", out / "curves.jsonl")
    rows = summarize(records)
    cols = ["task", "method", "domain", "demo_idx", "fine_tuned", "seeds"] + \
        [f"{m}_{s}" for m in ("success_rate", "stage_cost", "expert_gap", "wall_clock_s") for s in ("mean", "std")]
    with open(out / "summary.csv.tmp", "w", newline="") as fh:
        w = csv.DictWriter(fh, cols)
        w.writeheader()
        w.writerows(rows)
    os.replace(out / "summary.csv.tmp", out / "summary.csv")
    lines = [f"# {manifest.name if manifest else 'suite'}", "",
             "| task | method | domain | demos | fine-tuned | success [%] | stage cost | expert gap [%] | time [s] |",
             "|---|---|---|---|---|---|---|---|---|"]

    def fmt(row, m, digits=1):
        mu, sd = row[f"{m}_mean"], row[f"{m}_std"]
        return "n/a" if mu is None else f"{mu:.{digits}f} ± {sd:.{digits}f}"

    for r in rows:
        lines.append(f"| {r['task']} | {r['method']} | {r['domain']} | {r['demo_idx']} | "
                     f"{'yes' if r['fine_tuned'] else 'no'} | {fmt(r, 'success_rate')} | {fmt(r, 'stage_cost')} | "
                     f"{fmt(r, 'expert_gap')} | {fmt(r, 'wall_clock_s')} |")
    _atomic_write(out / "summary.md", "\n".join(lines) + "\n")
    return rows


# -- latency ---------------------------------------------------------------------

def latency_stats(samples: Sequence[float]) -> dict:
    return dict(mean=statistics.fmean(samples), std=statistics.pstdev(samples), min=min(samples),
                max=max(samples), n=len(samples))


def timing_report(expert: Callable[[], object], policy: Callable[[], object], n: int = 1000,
                  warmup: int = 5) -> dict:
    """Per-call wall-clock latency [s] of two zero-argument callables (one
    expert action, one policy action) and the expert/policy mean ratio."""
    if n < 1:
        raise ValueError("n must be >= 1")
    out = {}
    for name, fn in (("expert", expert), ("policy", policy)):
        for _ in range(warmup):
            fn()
        samples = []
        for _ in range(n):
            t0 = time.perf_counter()
            fn()
            samples.append(time.perf_counter() - t0)
        out[name] = latency_stats(samples)
    out["speedup"] = out["expert"]["mean"] / out["policy"]["mean"]
    return out


def linear_timing_callables(setup, policy, seed: int = 0):
    """Expert: one warm-started tube MPC solve along the figure-eight.
    Policy: one forward pass on the matching features."""
    from .features import featurize_linear
    from .linear_rtmpc import NX
    from .tasks import gen_reference, linear_task
    ref = gen_reference(linear_task(setup.cfg), setup.dt)
    rng = np.random.default_rng(seed)
    expert = setup.expert()
    state = {"k": 0}

    def point():
        k = state["k"]
        state["k"] = (k + 1) % ref.steps
        x = np.zeros(NX)
        x[:6] = ref.samples[k] + rng.uniform(-0.05, 0.05, 6)
        return k, x

    def run_expert():
        k, x = point()
        return expert.act(x, ref.window(k, setup.N + 1))

    def run_policy():
        k, x = point()
        return policy(featurize_linear(x, ref.window(k, setup.N)))

    return run_expert, run_policy


def flip_timing_callables(setup, policy, seed: int = 0):
    """Expert: one real-time iteration of the ancillary NMPC along the plan.
    Policy: one forward pass."""
    from .features import featurize_flip
    from .flip_env import P_DES
    rng = np.random.default_rng(seed)
    nmpc = setup.expert()
    plan = setup.plan
    nmpc.act(plan.state_at(0), 0, mode="full")
    state = {"k": 0}

    def point():
        k = state["k"]
        state["k"] = (k + 1) % plan.steps
        x = plan.state_at(k).copy()
        x[:6] += rng.uniform(-0.02, 0.02, 6)
        return k, x

    def run_expert():
        k, x = point()
        return nmpc.act(x, k, mode="rti")

    def run_policy():
        k, x = point()
        feats, _ = featurize_flip(x, k * setup.dt, P_DES, x[6:10])
        return policy(feats)

    return run_expert, run_policy
