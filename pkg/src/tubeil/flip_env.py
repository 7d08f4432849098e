"""Flip maneuver with the nonlinear tube MPC expert on the full simulator.

The safe plan is computed once; the ancillary NMPC tracks it at 50 Hz with
body-rate commands.  Tubes are measured as the deviation of the visited
state from the plan, in 9-dim MRP error coordinates (T^state) and as the
deviation of the applied input from the planned one (T^action).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import config as config_mod
from . import sim
from .errors import NonFinite, QpFailure, SingularKkt, WeakComplementarity
from .features import FLIP_FEATURE_DIM, featurize_flip
from .nonlinear.ancillary import AncillaryNmpc, NmpcConfig, nmpc_config
from .nonlinear.planner import PlannerConfig, SafePlan, plan_safe_flip
from .nonlinear.sensitivity import SensitivityGain, sensitivity_gain, state_error
from .sets import AxisBox, box_from_deviations, draw_disturbances
from .tasks import DomainSpec, TaskSpec, make_domain, random_initial_states

P_DES = np.zeros(3)


def planner_config(cfg: dict, params: sim.MultirotorParams) -> PlannerConfig:
    c = cfg["planner"]
    w = params.weight
    return PlannerConfig(final_time=c["final_time"], dt=c["dt"], prop_min=c["prop_min_mg"] * w,
                         prop_max=c["prop_max_mg"] * w, prop_rate_limit=c["prop_rate_limit"],
                         rate_limit=c["rate_limit"], q_position=c["q_position"], q_angle=c["q_angle"],
                         alpha_velocity=c["alpha_velocity"], alpha_thrust=c["alpha_thrust"],
                         alpha_rate=c["alpha_rate"], max_iter=c["max_iter"], tol=c["tol"],
                         feas_tol=c["feas_tol"])


def flip_task(cfg: dict) -> TaskSpec:
    t = cfg["tasks"]
    return TaskSpec("flip", t["episode_flip"], {"final_time": cfg["planner"]["final_time"]},
                    t["init_position_radius"], t["init_velocity_radius"])


@dataclass
class FlipSetup:
    params: sim.MultirotorParams
    cfg: dict
    plan: SafePlan
    nmpc: NmpcConfig
    T_state: Optional[AxisBox] = None
    T_action: Optional[AxisBox] = None

    @property
    def dt(self) -> float:
        return self.nmpc.dt

    @property
    def steps(self) -> int:
        return int(round(self.cfg["tasks"]["episode_flip"] / self.dt))

    @property
    def position_bounds(self):
        c = self.cfg["flip"]
        return np.asarray(c["position_lower"], float), np.asarray(c["position_upper"], float)

    @property
    def velocity_limit(self) -> float:
        return float(self.cfg["flip"]["velocity_limit"])

    def expert(self) -> AncillaryNmpc:
        return AncillaryNmpc(self.plan, self.nmpc, self.params)

    def Q(self) -> np.ndarray:
        return self.nmpc.Q

    def R(self) -> np.ndarray:
        return self.nmpc.R


def build_flip_setup(cfg: Optional[dict] = None, plan: Optional[SafePlan] = None,
                     tubes: Optional[tuple] = None, seed: int = 0, estimate: bool = True) -> FlipSetup:
    """Plan (unless given), then estimate the tubes (unless given or
    ``estimate`` is False)."""
    cfg = cfg or config_mod.load()
    params = config_mod.vehicle(cfg)
    if plan is None:
        plan = plan_safe_flip(params, planner_config(cfg, params))
    setup = FlipSetup(params, cfg, plan, nmpc_config(cfg, params))
    if tubes is not None:
        setup.T_state, setup.T_action = tubes
    elif estimate:
        lo, hi = cfg["nonlinear"]["design_disturbance_mg"]
        setup.T_state, setup.T_action = estimate_flip_tubes(
            setup, sim.DisturbanceSet.from_mg(lo, hi, params), cfg["nonlinear"]["tube_rollouts"],
            np.random.default_rng(seed), cfg["tube"]["safety"], cfg["tube"]["vertex_fraction"])
    return setup


def plan_errors(setup: FlipSetup, x, u, k: int):
    """State error (9) and input error (4) with respect to the plan at step ``k``."""
    z = setup.plan.state_at(k)
    e = state_error(np.asarray(x)[..., :10], z)
    return e, np.asarray(u) - setup.plan.input_at(k)


def estimate_flip_tubes(setup: FlipSetup, dist: sim.DisturbanceSet, n_rollouts: int,
                        rng: np.random.Generator, safety: float = 1.1, vertex_fraction: float = 0.5):
    """Monte-Carlo outer boxes of the state and input deviations of the
    expert closed loop around the plan."""
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    w = draw_disturbances(dist, n_rollouts, rng, vertex_fraction)
    task = flip_task(setup.cfg)
    x0 = random_initial_states(rng, n_rollouts, task)
    res = _rollout(setup, x0, w, policy=None, beta=1.0, keep_errors=True)
    return box_from_deviations(res["state_err"], safety), box_from_deviations(res["input_err"], safety)


# -- episodes ----------------------------------------------------------------

@dataclass
class FlipStep:
    t: float
    state: np.ndarray
    features: np.ndarray
    expert_action: Optional[np.ndarray]
    x_bar0: Optional[np.ndarray]
    u_bar0: Optional[np.ndarray]
    plan_state: np.ndarray
    executed: np.ndarray
    gain: Optional[SensitivityGain] = None
    solution: object = None            # (transcription, solution) when the gain is unavailable


@dataclass
class FlipEpisode:
    seed: int
    success: bool
    cost: float
    f_ext: np.ndarray
    expert_failed: bool = False
    diverged: bool = False
    tube_ok: Optional[bool] = None
    tube_ratio: Optional[float] = None
    action_ok: Optional[bool] = None
    final_error: Optional[np.ndarray] = None
    records: List[FlipStep] = field(default_factory=list)


def episode_conditions(seeds: Sequence[int], task: TaskSpec, domain: DomainSpec):
    x0, f = [], []
    for s in seeds:
        rng = np.random.default_rng([int(s), 15485863])
        x0.append(random_initial_states(rng, 1, task)[0])
        f.append(sim.sample_disturbance(domain.disturbance, rng))
    return np.array(x0), np.array(f)


def _rollout(setup: FlipSetup, x0, f_ext, policy=None, beta: float = 1.0, record: bool = False,
             sensitivity: bool = False, keep_errors: bool = False, mix_seed: int = 0, params=None):
    B = len(x0)
    params = params or setup.params
    simc = setup.cfg["simulation"]
    simulator = sim.Simulator(params, x0, f_ext, dt=simc["dt"], attitude_decimation=simc["attitude_decimation"])
    need_expert = policy is None or beta > 0 or record or keep_errors
    experts = [setup.expert() for _ in range(B)] if need_expert else None
    mix_rng = np.random.default_rng([mix_seed, 104729])
    lo_u, hi_u = setup.nmpc.u_lower, setup.nmpc.u_upper
    Q, R = setup.Q(), setup.R()
    p_lo, p_hi = setup.position_bounds
    vmax = setup.velocity_limit
    ok = np.ones(B, bool)
    failed = np.zeros(B, bool)
    cost = np.zeros(B)
    records = [[] for _ in range(B)]
    state_err, input_err = [], []
    prev_q = np.tile(setup.plan.state_at(0)[6:10], (B, 1))
    for k in range(setup.steps):
        x = simulator.state
        z = setup.plan.state_at(k)
        feats, prev_q = featurize_flip(x, k * setup.dt, P_DES, prev_q)
        u_exp = np.full((B, 4), np.nan)
        sols = [None] * B
        if need_expert:
            for b in range(B):
                if failed[b]:
                    continue
                try:
                    u_exp[b], sols[b] = experts[b].act(x[b], k)
                except QpFailure:
                    failed[b] = True
                    ok[b] = False
        if policy is None:
            u = u_exp.copy()
        else:
            u = np.asarray(policy(feats), dtype=float).copy()
            if beta > 0:
                pick = (mix_rng.uniform(size=B) < beta) & ~np.isnan(u_exp[:, 0])
                u[pick] = u_exp[pick]
        u = np.where(np.isnan(u), setup.plan.input_at(k), u)
        u = np.clip(u, lo_u, hi_u)
        e, du = plan_errors(setup, x, u, k)
        cost += np.einsum("bi,ij,bj->b", e[:, :6], Q[:6, :6], e[:, :6])
        xa = x[:, :10].copy()
        xa[:, 6:10] = np.where((np.sum(xa[:, 6:10] * z[6:10], -1) < 0)[:, None], -xa[:, 6:10], xa[:, 6:10])
        eq = xa[:, 6:10] - z[6:10]
        cost += np.einsum("bi,ij,bj->b", eq, Q[6:, 6:], eq) + np.einsum("bi,ij,bj->b", du, R, du)
        if keep_errors:
            live = ~failed
            state_err.append(e[live])
            input_err.append(du[live])
        if record:
            for b in range(B):
                s = sols[b]
                gain, keep = None, None
                if s is not None and sensitivity:
                    try:
                        gain = sensitivity_gain(experts[b].tr, s, setup.nmpc.complementarity_threshold)
                    except (WeakComplementarity, SingularKkt):
                        keep = (experts[b].tr, s)
                records[b].append(FlipStep(k * setup.dt, x[b].copy(), feats[b].copy(),
                                           None if s is None else u_exp[b].copy(),
                                           None if s is None else s.xs[0].copy(),
                                           None if s is None else s.u0.copy(), z.copy(), u[b].copy(),
                                           gain, keep))
        simulator.hold(sim.Command(u[:, 0], rate=u[:, 1:]), setup.dt)
        xn = simulator.state
        ok &= np.all((xn[:, :3] >= p_lo) & (xn[:, :3] <= p_hi), axis=1)
        ok &= np.all(np.abs(xn[:, 3:6]) <= vmax, axis=1)
        ok &= ~simulator.diverged
    x = simulator.state
    final_e, _ = plan_errors(setup, x, setup.plan.hover_input, setup.steps)
    c = setup.cfg["flip"]
    at_goal = (np.linalg.norm(final_e[:, :3], axis=1) <= c["goal_position_tol"]) & \
              (4 * np.arctan(np.linalg.norm(final_e[:, 6:9], axis=1)) <= c["goal_attitude_tol"])
    out = dict(ok=ok & at_goal & ~failed, cost=cost, failed=failed, diverged=simulator.diverged.copy(),
               records=records, final_error=final_e)
    if keep_errors:
        out["state_err"] = np.concatenate(state_err) if state_err else np.zeros((0, 9))
        out["input_err"] = np.concatenate(input_err) if input_err else np.zeros((0, 4))
        out["per_step_state_err"] = state_err
        out["per_step_input_err"] = input_err
    if np.any(~np.isfinite(cost) & ~simulator.diverged):
        raise NonFinite("non-finite stage cost")
    return out


def run_flip_episodes(setup: FlipSetup, domain: DomainSpec, seeds: Sequence[int], policy=None,
                      beta: float = 1.0, record: bool = False, sensitivity: bool = False,
                      track_tube: bool = False, mix_seed: int = 0) -> List[FlipEpisode]:
    """Roll out one episode per seed; ``policy=None`` runs the expert.

    ``track_tube`` checks every visited state and applied input against the
    tubes around the plan (expert runs only).
    """
    seeds = list(seeds)
    task = flip_task(setup.cfg)
    x0, f_ext = episode_conditions(seeds, task, domain)
    res = _rollout(setup, x0, f_ext, policy, beta, record, sensitivity, keep_errors=track_tube,
                   mix_seed=mix_seed, params=domain.vehicle(setup.params))
    B = len(seeds)
    tube_ok = action_ok = ratio = [None] * B
    if track_tube:
        if setup.T_state is None:
            raise ValueError("tube tracking needs estimated tubes")
        hw = np.maximum(setup.T_state.halfwidth, 1e-12)
        ratio, action_ok = np.zeros(B), np.ones(B, bool)
        live = ~res["failed"]
        idx = np.flatnonzero(live)
        for e, du in zip(res["per_step_state_err"], res["per_step_input_err"]):
            ratio[idx] = np.maximum(ratio[idx], np.max(np.abs(e) / hw, axis=1))
            action_ok[idx] &= setup.T_action.contains(du)
        tube_ok = (ratio <= 1.0) & live
        action_ok = action_ok & live
    out = []
    for b in range(B):
        out.append(FlipEpisode(seeds[b], bool(res["ok"][b]), float(res["cost"][b]), f_ext[b],
                               bool(res["failed"][b]), bool(res["diverged"][b]),
                               None if tube_ok[b] is None else bool(tube_ok[b]),
                               None if not track_tube else float(ratio[b]),
                               None if action_ok[b] is None else bool(action_ok[b]),
                               res["final_error"][b], res["records"][b]))
    return out


# -- imitation pipeline --------------------------------------------------------

class FlipPipeline:
    """Flip with the nonlinear tube MPC expert, for the imitation loop.

    Baselines train incrementally on each new batch of demonstrations.
    """

    n_actions = 4
    n_features = FLIP_FEATURE_DIM
    incremental = True

    def __init__(self, setup: FlipSetup):
        self.setup = setup
        self.cfg = setup.cfg
        self.task = flip_task(setup.cfg)
        self.hidden = tuple(self.cfg["policy"]["flip_hidden"])

    def train_config(self, fine_tune: bool = False):
        from .policy import TrainConfig
        p = self.cfg["policy"]
        return TrainConfig(lr=p["learning_rate"], beta1=p["beta1"], beta2=p["beta2"], eps=p["eps"],
                           epochs=p["flip_max_epochs"], batch_size=p["batch_size"],
                           validation_fraction=p["validation_fraction"], patience=p["flip_patience"])

    def domain(self, name: str) -> DomainSpec:
        return make_domain("T_flip" if name == "DR" else name, self.cfg, self.setup.params)

    def collect(self, policy, beta: float, domain: DomainSpec, seed: int, for_augmentation: bool = False):
        from .imitation import Demonstration
        res = run_flip_episodes(self.setup, domain, [seed], policy=policy, beta=beta, record=True,
                                sensitivity=for_augmentation, mix_seed=seed)[0]
        return Demonstration(self.task.kind, domain.name, seed, res.success, res.f_ext, res.records,
                             self.setup.dt)

    def augment(self, demo, strategy: str, n_samples: int, rng):
        from .imitation import augment_nonlinear
        return augment_nonlinear(demo, self.setup.T_state, strategy, n_samples, rng,
                                 self.setup.nmpc.u_lower, self.setup.nmpc.u_upper)

    def evaluate(self, policy, domain: DomainSpec, seeds):
        return run_flip_episodes(self.setup, domain, list(seeds), policy=policy, beta=0.0)
