"""Demonstration collection and imitation-learning loops.

Pipelines (linear tracking, flips) adapt the generic loop to a particular
expert and environment.  They expose::

    n_features, n_actions, hidden        policy shape
    train_config()                       TrainConfig for a full retrain
    domain(name)                         DomainSpec
    collect(policy, beta, domain, seed)  -> Demonstration
    augment(demo, strategy, n, rng)      -> (X, U) augmented pairs
    evaluate(policy, domain, seeds)      -> list of episode results
"""
from __future__ import annotations

import re
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

from .errors import DimensionMismatch
from .features import featurize_flip, featurize_linear
from .policy import PROVENANCE, Dataset, MlpPolicy, TrainConfig, train
from .sets import AxisBox, sample_tube_dense, sample_tube_sparse, sample_tube_uniform

METHODS = ("BC", "DAgger")
PROVENANCE_NAMES = ("demo", "augmented")
STRATEGIES = ("sparse", "dense", "uniform")


@dataclass
class IlConfig:
    method: str = "DAgger"
    robustifier: Optional[str] = None     # None, "DR" or "SA"
    strategy: Optional[str] = None        # SA sampling: sparse, dense or uniform
    n_samples: int = 25                   # uniform SA samples per step
    beta: Sequence[float] = (1.0, 0.0)    # DAgger schedule; the last entry repeats
    batch: int = 1                        # demonstrations collected between retrains
    keep_failed: bool = True

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        if self.robustifier not in (None, "DR", "SA"):
            raise ValueError(f"unknown robustifier {self.robustifier!r}")
        if self.robustifier == "SA" and self.strategy not in STRATEGIES:
            raise ValueError("SA needs a sampling strategy")
        if any(not 0.0 <= b <= 1.0 for b in self.beta) or not len(self.beta):
            raise ValueError("beta entries must lie in [0, 1]")
        if self.batch < 1:
            raise ValueError("batch must be >= 1")

    @classmethod
    def parse(cls, name: str, **kw) -> "IlConfig":
        """``BC``, ``DAgger+DR``, ``BC+SA-sparse``, ``DAgger+SA-25`` ..."""
        m = re.fullmatch(r"(BC|DAgger)(?:\+(DR|SA-(sparse|dense|\d+)))?", name)
        if not m:
            raise ValueError(f"cannot parse method name {name!r}")
        method, rob, strat = m.groups()
        if rob is None:
            return cls(method, **kw)
        if rob == "DR":
            return cls(method, "DR", **kw)
        if strat.isdigit():
            kw["n_samples"] = int(strat)    # the name wins over a default count
            return cls(method, "SA", "uniform", **kw)
        return cls(method, "SA", strat, **kw)

    @property
    def name(self) -> str:
        if self.robustifier is None:
            return self.method
        if self.robustifier == "DR":
            return f"{self.method}+DR"
        tag = str(self.n_samples) if self.strategy == "uniform" else self.strategy
        return f"{self.method}+SA-{tag}"

    def beta_at(self, demo_index: int) -> float:
        if self.method == "BC":
            return 1.0
        return float(self.beta[min(demo_index, len(self.beta) - 1)])


@dataclass
class Demonstration:
    task: str
    domain: str
    seed: int
    success: bool
    f_ext: np.ndarray
    records: list
    dt: float

    @property
    def steps(self) -> int:
        return len(self.records)

    def pairs(self):
        """Features and expert labels of the logged steps."""
        rows = [r for r in self.records if r.expert_action is not None]
        if not rows:
            return None, None
        return np.array([r.features for r in rows]), np.array([r.expert_action for r in rows])


def augment_linear(demo: Demonstration, tube: AxisBox, K, strategy: str, n_samples: int = 0,
                   rng: Optional[np.random.Generator] = None):
    """Extra (features, action) pairs from the tube around each logged nominal
    state; actions follow the ancillary law ``u = u_bar + K (x - x_bar)``."""
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    K = np.asarray(K, dtype=float)
    rng = rng or np.random.default_rng(0)
    X, U = [], []
    for r in demo.records:
        if r.x_bar0 is None:
            continue
        if strategy == "sparse":
            xs = sample_tube_sparse(r.x_bar0, tube)
        elif strategy == "dense":
            xs = sample_tube_dense(r.x_bar0, tube)
        else:
            xs = sample_tube_uniform(r.x_bar0, tube, n_samples, rng)
        if not np.all(tube.contains(xs - r.x_bar0)):
            raise AssertionError("augmented state outside the tube")
        U.append(r.u_bar0 + (xs - r.x_bar0) @ K.T)
        X.append(featurize_linear(xs, np.broadcast_to(r.ref, (len(xs),) + r.ref.shape)))
    if not X:
        return np.zeros((0, 0)), np.zeros((0, K.shape[0]))
    return np.vstack(X), np.vstack(U)


def augment_nonlinear(demo: Demonstration, tube: AxisBox, strategy: str, n_samples: int = 0,
                      rng: Optional[np.random.Generator] = None, u_lower=None, u_upper=None):
    """Extra pairs for the flip: states sampled in MRP-error coordinates
    around each step's plan state, actions from the step's sensitivity gain
    (or the generalized predictor where the gain was unavailable).

    Returns ``(X, U)``; ``augment_nonlinear.skipped`` counts steps without
    a usable predictor.
    """
    from .nonlinear.sensitivity import apply_error, generalized_tangential_predictor, predict_augmented_action
    from .nonlinear.sensitivity import state_error
    from .errors import QpFailure
    if strategy not in ("sparse", "uniform"):
        raise ValueError(f"unsupported strategy {strategy!r} for the flip")
    rng = rng or np.random.default_rng(0)
    X, U = [], []
    skipped = 0
    zero = np.zeros(tube.dim)
    for r in demo.records:
        if r.gain is None and r.solution is None:
            skipped += 1
            continue
        offs = sample_tube_sparse(zero, tube) if strategy == "sparse" else \
            sample_tube_uniform(zero, tube, n_samples, rng)
        xs = apply_error(offs, np.broadcast_to(r.plan_state, (len(offs), 10)))
        if not np.all(tube.contains(state_error(xs, r.plan_state), tol=1e-7)):
            raise AssertionError("augmented state outside the tube")
        if r.gain is not None:
            us = predict_augmented_action(xs, r.gain, clamp=True)
        else:
            tr, sol = r.solution
            try:
                us = np.array([generalized_tangential_predictor(tr, sol, xp) for xp in xs])
            except QpFailure:
                skipped += 1
                continue
            if u_lower is not None:
                us = np.clip(us, u_lower, u_upper)
        feats, _ = featurize_flip(xs, r.t, np.zeros(3), np.broadcast_to(r.plan_state[6:10], (len(xs), 4)))
        X.append(feats)
        U.append(us)
    augment_nonlinear.skipped = skipped
    if not X:
        return np.zeros((0, 14)), np.zeros((0, 4))
    return np.vstack(X), np.vstack(U)


# -- metrics ---------------------------------------------------------------------

def success_rate(results) -> float:
    if not len(results):
        raise ValueError("no episodes")
    return 100.0 * sum(bool(r.success) for r in results) / len(results)


def mean_cost(results) -> float:
    costs = [r.cost for r in results if r.success]
    return float(np.mean(costs)) if costs else float("nan")


def expert_gap(policy_results, expert_results) -> float:
    """Mean relative stage-cost error [%] over seeds where both succeeded."""
    ref = {r.seed: r for r in expert_results}
    gaps = [abs(r.cost - ref[r.seed].cost) / abs(ref[r.seed].cost)
            for r in policy_results if r.success and r.seed in ref and ref[r.seed].success]
    return 100.0 * float(np.mean(gaps)) if gaps else float("nan")


# -- learning loop ---------------------------------------------------------------

def demo_seed(run_seed: int, index: int) -> int:
    return 1_000_003 * (run_seed + 1) + index


def fit_policy(pipeline, data: Dataset, seed: int) -> MlpPolicy:
    """Fresh initialization and full retrain on the aggregated dataset."""
    rng = np.random.default_rng([seed, 31337])
    policy = MlpPolicy.init([pipeline.n_features, *pipeline.hidden, pipeline.n_actions], rng)
    policy.fit_normalization(data.X, data.U)
    train(policy, data.X, data.U, pipeline.train_config(), seed=seed)
    return policy


def update_policy(pipeline, policy: Optional[MlpPolicy], data: Dataset, seed: int) -> MlpPolicy:
    """Keep training ``policy`` on ``data`` only; the first call initializes
    the network and fixes the normalization."""
    if policy is None:
        return fit_policy(pipeline, data, seed)
    train(policy, data.X, data.U, pipeline.train_config(), seed=seed)
    return policy


def evaluate_policy(pipeline, policy, domains: Sequence[str], seeds: Sequence[int], expert_cache: dict):
    out = {}
    for name in domains:
        dom = pipeline.domain(name)
        if name not in expert_cache:
            expert_cache[name] = pipeline.evaluate(None, dom, seeds)
        res = pipeline.evaluate(policy, dom, seeds)
        out[name] = dict(success_rate=success_rate(res), stage_cost=mean_cost(res),
                         expert_gap=expert_gap(res, expert_cache[name]))
    return out


@dataclass
class IlRun:
    policy: Optional[MlpPolicy]
    data: Dataset
    curve: List[dict] = field(default_factory=list)
    demos: List[Demonstration] = field(default_factory=list)


def run_il(pipeline, cfg: IlConfig, n_demos: int, seed: int = 0, eval_domains: Sequence[str] = ("T1",),
           eval_seeds: Sequence[int] = range(20), eval_at: Optional[Sequence[int]] = None,
           expert_cache: Optional[dict] = None, on_record: Optional[Callable[[dict], None]] = None) -> IlRun:
    """Collect, augment, retrain and evaluate after every batch of demonstrations.

    ``eval_at`` restricts evaluation to the listed demonstration counts
    (default: after every update).
    """
    if n_demos < 0:
        raise ValueError("n_demos must be >= 0")
    data = Dataset.empty(pipeline.n_features, pipeline.n_actions)
    run = IlRun(None, data)
    cache = {} if expert_cache is None else expert_cache
    rng = np.random.default_rng([seed, 4242])
    src = pipeline.domain("DR" if cfg.robustifier == "DR" else "S")
    elapsed = 0.0
    if n_demos == 0:
        return run
    incremental = getattr(pipeline, "incremental", False)
    sa = cfg.robustifier == "SA"
    for start in range(0, n_demos, cfg.batch):
        t0 = time.perf_counter()
        batch = Dataset.empty(pipeline.n_features, pipeline.n_actions)
        for i in range(start, min(start + cfg.batch, n_demos)):
            beta = cfg.beta_at(i)
            demo = pipeline.collect(run.policy if beta < 1.0 else None, beta, src, demo_seed(seed, i),
                                    for_augmentation=sa)
            run.demos.append(demo)
            if not demo.success and not cfg.keep_failed:
                continue
            X, U = demo.pairs()
            if X is None:
                continue
            batch.add(X, U, "demo")
            if sa:
                Xa, Ua = pipeline.augment(demo, cfg.strategy, cfg.n_samples, rng)
                if len(Xa):
                    batch.add(Xa, Ua, "augmented")
        for name in PROVENANCE_NAMES:
            mask = batch.prov == PROVENANCE[name]
            if mask.any():
                data.add(batch.X[mask], batch.U[mask], name)
        if incremental and len(batch):
            run.policy = update_policy(pipeline, run.policy, batch, seed + start)
        elif len(data):
            run.policy = fit_policy(pipeline, data, seed)
        elapsed += time.perf_counter() - t0
        n_done = min(start + cfg.batch, n_demos)
        if run.policy is None or (eval_at is not None and n_done not in eval_at):
            continue
        metrics = evaluate_policy(pipeline, run.policy, eval_domains, eval_seeds, cache)
        for dom, m in metrics.items():
            rec = dict(method=cfg.name, seed=seed, demo_idx=n_done, domain=dom, wall_clock_s=elapsed,
                       rows=len(data), augmented_rows=data.count("augmented"), **m)
            run.curve.append(rec)
            if on_record:
                on_record(rec)
    return run


def fine_tune(pipeline, policy: MlpPolicy, n_extra: int, seed: int = 0, method: str = "DAgger"):
    """Discard earlier data, gather ``n_extra`` unaugmented demonstrations in
    the source domain and keep training the given policy after each one
    (on the newest demonstration only for incremental pipelines)."""
    if n_extra < 0:
        raise ValueError("n_extra must be >= 0")
    if method not in METHODS:
        raise ValueError(f"unknown method {method!r}")
    policy = policy.copy()
    data = Dataset.empty(pipeline.n_features, pipeline.n_actions)
    src = pipeline.domain("S")
    for i in range(n_extra):
        beta = 0.0 if method == "DAgger" else 1.0
        demo = pipeline.collect(policy if beta < 1.0 else None, beta, src, demo_seed(seed, 10_000 + i))
        X, U = demo.pairs()
        if X is None:
            continue
        if X.shape[1] != policy.sizes[0]:
            raise DimensionMismatch("demonstration features do not fit the policy")
        data.add(X, U, "fine-tune")
        if getattr(pipeline, "incremental", False):
            train(policy, X, U, pipeline.train_config(fine_tune=True), seed=seed + i)
        else:
            train(policy, data.X, data.U, pipeline.train_config(fine_tune=True), seed=seed + i)
    return policy, data
