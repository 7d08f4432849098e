"""Trajectory tracking with the linear tube MPC expert on the full simulator."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import config as config_mod
from . import linear_rtmpc as lr
from . import sim
from .errors import Infeasible, NonFinite, QpFailure
from .features import featurize_linear, linear_feature_dim
from .sets import AxisBox, Polytope, estimate_tube_mc
from .tasks import DomainSpec, Reference, TaskSpec, gen_reference, random_initial_states


@dataclass
class LinearSetup:
    params: sim.MultirotorParams
    cfg: dict
    model: lr.LinearModel
    rtmpc: lr.RtmpcConfig
    X: Polytope
    limits: np.ndarray          # per-component bound of the (symmetric) state box
    du_bounds: tuple            # (min, max) collective-thrust deviation

    @property
    def N(self) -> int:
        return self.rtmpc.N

    @property
    def dt(self) -> float:
        return self.model.dt

    @property
    def K(self) -> np.ndarray:
        return self.rtmpc.K

    @property
    def Z(self) -> AxisBox:
        return self.rtmpc.Z

    @property
    def feature_dim(self) -> int:
        return linear_feature_dim(self.N)

    def expert(self) -> lr.LinearExpert:
        return lr.LinearExpert(self.rtmpc, self.qp_settings())

    def qp_settings(self):
        from .qp import QpSettings
        q = self.cfg["qp"]
        return QpSettings(tol=q["tol"], max_iter=q["max_iter"], rho=q["rho"], regularization=q["regularization"])


def weights(cfg: dict):
    c = cfg["linear"]
    Q = np.diag([c["q_position"]] * 3 + [c["q_velocity"]] * 3 + [c["q_tilt"]] * 2)
    R = np.diag([c["r_thrust"], c["r_tilt"], c["r_tilt"]])
    return Q, R


def state_limits(cfg: dict) -> np.ndarray:
    c = cfg["linear"]
    return np.array([c["position_limit"]] * 3 + [c["velocity_limit"]] * 3 + [c["tilt_limit"]] * 2)


def thrust_bounds(cfg: dict, params: sim.MultirotorParams):
    c = cfg["linear"]
    return ((c["thrust_min_mg"] - 1.0) * params.weight, (c["thrust_max_mg"] - 1.0) * params.weight)


def input_polytope(cfg: dict, params: sim.MultirotorParams) -> Polytope:
    """Only the collective thrust is bounded; tilt is limited through the state."""
    lo, hi = thrust_bounds(cfg, params)
    return Polytope(np.array([[1.0, 0, 0], [-1.0, 0, 0]]), np.array([hi, -lo]))


def estimate_linear_tube(params, K, dist: sim.DisturbanceSet, n_rollouts: int, duration: float,
                         rng: np.random.Generator, safety: float = 1.1, period: float = 0.1,
                         vertex_fraction: float = 0.5) -> AxisBox:
    """Deviation box of the ancillary law around hover on the full simulator,
    recorded at every physics step."""
    state = {}

    def closed_loop(e, w):
        if "sim" not in state:
            state["sim"] = sim.Simulator(params, sim.hover_state(len(w)), w)
        s = state["sim"]
        x = lr.reduced_state(s.state)
        visited = lr.apply_action(s, x @ K.T, duration=period)
        if np.any(s.diverged):
            raise NonFinite("tube rollout diverged")
        return lr.reduced_state(s.state), np.stack(visited)

    return estimate_tube_mc(closed_loop, dist, n_rollouts, int(round(duration / period)), rng=rng,
                            dim=lr.NX, safety=safety, vertex_fraction=vertex_fraction)


def build_linear_setup(cfg: Optional[dict] = None, tube: Optional[AxisBox] = None, seed: int = 0,
                       horizon: Optional[int] = None) -> LinearSetup:
    cfg = cfg or config_mod.load()
    params = config_mod.vehicle(cfg)
    c = cfg["linear"]
    taus = lr.identify_attitude_time_constants(params)
    model = lr.build_linear_model(params, *taus, dt=c["dt"])
    Q, R = weights(cfg)
    K, _ = lr.solve_lqr(model.A, model.B, Q, R)
    if tube is None:
        lo, hi = c["design_disturbance_mg"]
        tube = estimate_linear_tube(params, K, sim.DisturbanceSet.from_mg(lo, hi, params), c["tube_rollouts"],
                                    c["tube_duration"], np.random.default_rng(seed), cfg["tube"]["safety"],
                                    c["dt"], cfg["tube"]["vertex_fraction"])
    limits = state_limits(cfg)
    X = Polytope.from_box(AxisBox(-limits, limits))
    U = input_polytope(cfg, params)
    rt = lr.make_config(model, Q, R, tube, X, U, N=horizon or c["horizon"],
                        initial_error_weight=c["initial_error_weight"])
    return LinearSetup(params, cfg, model, rt, X, limits, thrust_bounds(cfg, params))


# -- episodes ----------------------------------------------------------------

@dataclass
class StepRecord:
    t: float
    state: np.ndarray
    features: np.ndarray
    ref: np.ndarray
    expert_action: Optional[np.ndarray]
    x_bar0: Optional[np.ndarray]
    u_bar0: Optional[np.ndarray]
    executed: np.ndarray


@dataclass
class EpisodeResult:
    seed: int
    success: bool
    cost: float
    f_ext: np.ndarray
    expert_failed: bool = False
    diverged: bool = False
    tube_ok: Optional[bool] = None
    tube_ratio: Optional[float] = None
    records: List[StepRecord] = field(default_factory=list)
    states: Optional[np.ndarray] = None
    actions: Optional[np.ndarray] = None


def stage_cost(x, r, u, Q, R) -> np.ndarray:
    e = x - r
    return np.einsum("...i,ij,...j->...", e, Q, e) + np.einsum("...i,ij,...j->...", u, R, u)


def episode_conditions(seeds: Sequence[int], task: TaskSpec, domain: DomainSpec):
    """Initial states and constant disturbances for each seed (paired across
    controllers)."""
    x0, f = [], []
    for s in seeds:
        rng = np.random.default_rng([int(s), 7919])
        x0.append(random_initial_states(rng, 1, task)[0])
        f.append(sim.sample_disturbance(domain.disturbance, rng))
    return np.array(x0), np.array(f)


def run_episodes(setup: LinearSetup, task: TaskSpec, domain: DomainSpec, seeds: Sequence[int],
                 policy=None, beta: float = 1.0, record: bool = False, track_tube: bool = False,
                 mix_seed: int = 0) -> List[EpisodeResult]:
    """Roll out a batch of episodes.

    ``policy=None`` runs the expert.  With a policy and ``beta > 0`` the
    expert is queried at every step and its action is executed with
    probability ``beta`` (DAgger mixing); ``beta == 0`` with ``record=True``
    queries the expert only for labels.
    """
    seeds = list(seeds)
    B = len(seeds)
    ref = gen_reference(task, setup.dt)
    params = domain.vehicle(setup.params)
    x0, f_ext = episode_conditions(seeds, task, domain)
    simulator = sim.Simulator(params, x0, f_ext, dt=setup.cfg["simulation"]["dt"],
                              attitude_decimation=setup.cfg["simulation"]["attitude_decimation"])
    need_expert = policy is None or beta > 0 or record or track_tube
    experts = [setup.expert() for _ in range(B)] if need_expert else None
    mix_rng = np.random.default_rng([mix_seed, 104729])
    Q, R = setup.rtmpc.Q, setup.rtmpc.R
    steps = ref.steps
    ok = np.ones(B, bool)
    expert_failed = np.zeros(B, bool)
    cost = np.zeros(B)
    tube_ok = np.ones(B, bool)
    tube_ratio = np.zeros(B)
    records = [[] for _ in range(B)]
    states = np.zeros((B, steps, lr.NX))
    actions = np.zeros((B, steps, lr.NU))
    A_sub, B_sub = setup.model.discretize(simulator.dt)
    Z = setup.Z
    halfwidth = np.maximum(Z.halfwidth, 1e-12)
    lo_du, hi_du = setup.du_bounds
    for k in range(steps):
        x = lr.reduced_state(simulator.state)
        win_pol = ref.window(k, setup.N)
        win_exp = ref.window(k, setup.N + 1)
        feats = featurize_linear(x, np.broadcast_to(win_pol, (B,) + win_pol.shape))
        u_exp = np.full((B, lr.NU), np.nan)
        sols = [None] * B
        if need_expert:
            for b in range(B):
                if expert_failed[b]:
                    continue
                try:
                    u_exp[b], sols[b] = experts[b].act(x[b], win_exp)
                except (Infeasible, QpFailure):
                    expert_failed[b] = True
                    ok[b] = False
        if policy is None:
            u = u_exp.copy()
        else:
            u = policy(feats)
            if beta > 0:
                pick = mix_rng.uniform(size=B) < beta
                pick &= ~np.isnan(u_exp[:, 0])
                u[pick] = u_exp[pick]
        u = np.where(np.isnan(u), 0.0, u)
        u[:, 0] = np.clip(u[:, 0], lo_du, hi_du)
        states[:, k], actions[:, k] = x, u
        cost += stage_cost(x, np.hstack([ref.samples[k], np.zeros(2)]), u, Q, R)
        if record:
            for b in range(B):
                if sols[b] is None and need_expert and expert_failed[b]:
                    continue
                s = sols[b]
                records[b].append(StepRecord(k * setup.dt, x[b].copy(), feats[b].copy(), win_pol.copy(),
                                             None if s is None else u_exp[b].copy(),
                                             None if s is None else s.x_bar0.copy(),
                                             None if s is None else s.u_bar0.copy(), u[b].copy()))
        visited = lr.apply_action(simulator, u, duration=setup.dt)
        if track_tube:
            nominal = np.array([np.nan * np.ones(lr.NX) if s is None else s.x_bar0 for s in sols])
            u_bar = np.array([np.zeros(lr.NU) if s is None else s.u_bar0 for s in sols])
            for v in visited:
                nominal = nominal @ A_sub.T + u_bar @ B_sub.T
                r = np.abs(v - nominal - Z.center) / halfwidth
                worst = np.nanmax(r, axis=1)
                tube_ratio = np.maximum(tube_ratio, np.where(np.isnan(worst), 0.0, worst))
        for v in visited:
            ok &= np.all(np.abs(v) <= setup.limits + 1e-9, axis=1)
        ok &= ~simulator.diverged
    if track_tube:
        tube_ok = (tube_ratio <= 1.0) & ~expert_failed
    out = []
    for b in range(B):
        out.append(EpisodeResult(seeds[b], bool(ok[b]), float(cost[b]), f_ext[b], bool(expert_failed[b]),
                                 bool(simulator.diverged[b]),
                                 bool(tube_ok[b]) if track_tube else None,
                                 float(tube_ratio[b]) if track_tube else None,
                                 records[b], states[b], actions[b]))
    return out


# -- imitation pipeline --------------------------------------------------------

class LinearPipeline:
    """Trajectory tracking with the tube MPC expert, for the imitation loop."""

    n_actions = lr.NU

    def __init__(self, setup: LinearSetup, task: Optional[TaskSpec] = None):
        from .tasks import linear_task
        self.setup = setup
        self.cfg = setup.cfg
        self.task = task or linear_task(setup.cfg)
        self.n_features = setup.feature_dim
        self.hidden = tuple(self.cfg["policy"]["linear_hidden"])

    def train_config(self, fine_tune: bool = False):
        from .policy import TrainConfig
        p = self.cfg["policy"]
        return TrainConfig(lr=p["learning_rate"], beta1=p["beta1"], beta2=p["beta2"], eps=p["eps"],
                           epochs=p["linear_epochs"], batch_size=p["batch_size"])

    def domain(self, name: str) -> DomainSpec:
        from .tasks import make_domain
        return make_domain("T1" if name == "DR" else name, self.cfg, self.setup.params)

    def collect(self, policy, beta: float, domain: DomainSpec, seed: int, for_augmentation: bool = False):
        from .imitation import Demonstration
        res = run_episodes(self.setup, self.task, domain, [seed], policy=policy, beta=beta,
                           record=True, mix_seed=seed)[0]
        return Demonstration(self.task.kind, domain.name, seed, res.success, res.f_ext, res.records,
                             self.setup.dt)

    def augment(self, demo, strategy: str, n_samples: int, rng):
        from .imitation import augment_linear
        return augment_linear(demo, self.setup.Z, self.setup.K, strategy, n_samples, rng)

    def evaluate(self, policy, domain: DomainSpec, seeds):
        return run_episodes(self.setup, self.task, domain, list(seeds), policy=policy, beta=0.0)
