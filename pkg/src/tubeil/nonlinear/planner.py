"""Nominal flip planner on a planar model with propeller thrusts as states.

Planar state ``z = [y, z, vy, vz, phi, w, f_p, f_m]`` where ``phi`` is the
unrolled roll angle, ``w`` the roll rate and ``f_p``/``f_m`` the thrusts of
the propellers on the +y and -y arms; the two x-arm propellers each carry
the mean of the two, so pitch and yaw torques vanish.  Inputs are the
thrust rates ``[df_p, df_m]``.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .. import qp, quat
from ..errors import Infeasible, QpFailure
from ..sim import MultirotorParams
from . import ocp
from .model import rk4_with_jacobians

PNX, PNU = 8, 2


@dataclass
class PlanarModel:
    params: MultirotorParams
    dt: float = 0.02
    nx = PNX
    nu = PNU

    def f(self, z, v):
        z, v = np.asarray(z, dtype=float), np.asarray(v, dtype=float)
        p = self.params
        m, g, l, Ix = p.mass, p.gravity, p.arm_length, p.inertia[0]
        vel = z[..., 2:4]
        phi, w, fp, fm = z[..., 4], z[..., 5], z[..., 6], z[..., 7]
        T = 2 * (fp + fm)
        speed = np.linalg.norm(vel, axis=-1)
        drag = (p.drag_linear + p.drag_quadratic * speed)[..., None] * vel / m
        ay = -T * np.sin(phi) / m - drag[..., 0]
        az = T * np.cos(phi) / m - g - drag[..., 1]
        wdot = (l * (fp - fm) - p.drag_rotational * w) / Ix
        return np.stack([vel[..., 0], vel[..., 1], ay, az, w, wdot, v[..., 0], v[..., 1]], -1)

    def f_jac(self, z, v):
        z = np.asarray(z, dtype=float)
        p = self.params
        m, l, Ix = p.mass, p.arm_length, p.inertia[0]
        shape = z.shape[:-1]
        A = np.zeros(shape + (PNX, PNX))
        B = np.zeros(shape + (PNX, PNU))
        vel = z[..., 2:4]
        phi, fp, fm = z[..., 4], z[..., 6], z[..., 7]
        T = 2 * (fp + fm)
        s, c = np.sin(phi), np.cos(phi)
        A[..., 0, 2] = A[..., 1, 3] = 1.0
        speed = np.linalg.norm(vel, axis=-1)
        safe = np.where(speed > 0, speed, 1.0)
        vvT = np.einsum("...i,...j->...ij", vel, vel) / safe[..., None, None]
        A[..., 2:4, 2:4] = -(p.drag_linear * np.eye(2) + p.drag_quadratic * (speed[..., None, None] * np.eye(2) + vvT)) / m
        A[..., 2, 4] = -T * c / m
        A[..., 3, 4] = -T * s / m
        A[..., 2, 6] = A[..., 2, 7] = -2 * s / m
        A[..., 3, 6] = A[..., 3, 7] = 2 * c / m
        A[..., 4, 5] = 1.0
        A[..., 5, 5] = -p.drag_rotational / Ix
        A[..., 5, 6] = l / Ix
        A[..., 5, 7] = -l / Ix
        B[..., 6, 0] = B[..., 7, 1] = 1.0
        return A, B

    def step_jac(self, z, v, jac: bool = True):
        return rk4_with_jacobians(self.f, self.f_jac, np.asarray(z, float), np.asarray(v, float), self.dt, jac)

    def step(self, z, v):
        return self.step_jac(z, v, jac=False)[0]


@dataclass
class PlannerConfig:
    final_time: float = 2.5
    dt: float = 0.02
    prop_min: float = 0.05 * 9.81       # per propeller [N]
    prop_max: float = 0.6 * 9.81
    prop_rate_limit: float = 40.0       # [N/s]
    rate_limit: float = 9.0             # planned |w| [rad/s]
    q_position: float = 1.0
    q_angle: float = 0.1
    alpha_velocity: float = 0.01
    alpha_thrust: float = 0.01
    alpha_rate: float = 0.01
    max_iter: int = 100
    tol: float = 1e-3                   # KKT; feasibility is audited separately
    feas_tol: float = 1e-6
    rotation: float = 2 * np.pi

    @property
    def steps(self) -> int:
        return int(round(self.final_time / self.dt))


@dataclass
class SafePlan:
    """Planar solution plus its 3D lift used as the ancillary reference.

    ``states`` (K+1, 10) hold ``[p, v, q]`` and ``inputs`` (K, 4) hold
    ``[thrust, w_x, w_y, w_z]``; ``planar`` (K+1, 8) and ``planar_inputs``
    (K, 2) keep the original solution.
    """
    dt: float
    final_time: float
    planar: np.ndarray
    planar_inputs: np.ndarray
    states: np.ndarray
    inputs: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def steps(self) -> int:
        return len(self.inputs)

    @property
    def goal_state(self) -> np.ndarray:
        return self.states[-1]

    @property
    def hover_input(self) -> np.ndarray:
        return np.array([self.meta.get("weight", 9.81), 0.0, 0.0, 0.0])

    def window(self, k: int, N: int):
        """Reference states (N+1, 10) and inputs (N, 4) from step ``k``; past
        the final time the goal equilibrium is held."""
        K = self.steps
        idx = np.minimum(np.arange(k, k + N + 1), K)
        xr = self.states[idx]
        iu = np.arange(k, k + N)
        ur = np.where((iu < K)[:, None], self.inputs[np.minimum(iu, K - 1)], self.hover_input)
        return xr, ur

    def state_at(self, k: int) -> np.ndarray:
        return self.states[min(k, self.steps)]

    def input_at(self, k: int) -> np.ndarray:
        return self.inputs[k] if k < self.steps else self.hover_input

    def to_json(self) -> str:
        return json.dumps({"dt": self.dt, "final_time": self.final_time, "planar": self.planar.tolist(),
                           "planar_inputs": self.planar_inputs.tolist(), "states": self.states.tolist(),
                           "inputs": self.inputs.tolist(), "meta": self.meta})

    @classmethod
    def from_json(cls, text: str) -> "SafePlan":
        d = json.loads(text)
        return cls(d["dt"], d["final_time"], np.array(d["planar"]), np.array(d["planar_inputs"]),
                   np.array(d["states"]), np.array(d["inputs"]), d.get("meta", {}))

    def save(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path) -> "SafePlan":
        with open(path) as fh:
            return cls.from_json(fh.read())


def lift(planar, planar_inputs, params: MultirotorParams):
    """Embed the planar plan in the x = 0 plane: ancillary states and inputs."""
    planar = np.asarray(planar, dtype=float)
    K1 = len(planar)
    states = np.zeros((K1, 10))
    states[:, 1:3] = planar[:, 0:2]
    states[:, 4:6] = planar[:, 2:4]
    states[:, 6:10] = quat.from_axis_angle(np.array([1.0, 0.0, 0.0]), planar[:, 4])
    inputs = np.zeros((K1 - 1, 4))
    inputs[:, 0] = 2 * (planar[:-1, 6] + planar[:-1, 7])
    inputs[:, 1] = planar[:-1, 5]
    return states, inputs


def propeller_thrusts(planar) -> np.ndarray:
    """Per-propeller thrusts (+x, +y, -x, -y) of planar states."""
    planar = np.asarray(planar, dtype=float)
    fp, fm = planar[..., 6], planar[..., 7]
    mid = 0.5 * (fp + fm)
    return np.stack([mid, fp, mid, fm], -1)


def plan_violation(model, xs, us, x_lower, x_upper, u_lower, u_upper, start) -> float:
    """Largest dynamics defect or bound violation of a planar trajectory."""
    d = np.abs(model.step(xs[:-1], us) - xs[1:]).max()
    d = max(d, np.abs(xs[0] - start).max())
    with np.errstate(invalid="ignore"):
        d = max(d, np.max(x_lower - xs), np.max(xs - x_upper), np.max(u_lower - us), np.max(us - u_upper))
    return float(d)


def plan_safe_flip(params: MultirotorParams, cfg: PlannerConfig = None) -> SafePlan:
    """Fixed-final-time flip: from hover at the origin back to hover at the
    origin after a full positive roll."""
    cfg = cfg or PlannerConfig()
    model = PlanarModel(params, cfg.dt)
    K = cfg.steps
    f_h = params.weight / 4
    if not cfg.prop_min <= f_h <= cfg.prop_max:
        raise Infeasible("hover thrust outside the tightened propeller bounds")
    start = np.array([0, 0, 0, 0, 0, 0, f_h, f_h], dtype=float)
    goal = start.copy()
    goal[4] = cfg.rotation
    Q = np.diag([cfg.q_position] * 2 + [cfg.alpha_velocity] * 2 + [cfg.q_angle, cfg.alpha_velocity]
                + [cfg.alpha_thrust] * 2)
    R = cfg.alpha_rate * np.eye(PNU)
    xl = np.full((K + 1, PNX), -np.inf)
    xu = np.full((K + 1, PNX), np.inf)
    xl[:, 6:8], xu[:, 6:8] = cfg.prop_min, cfg.prop_max
    xl[:, 5], xu[:, 5] = -cfg.rate_limit, cfg.rate_limit
    xl[-1], xu[-1] = goal, goal
    xl[0], xu[0] = -np.inf, np.inf
    tr = ocp.transcribe(model, Q, R, Q, K, 1.0, [-cfg.prop_rate_limit] * 2, [cfg.prop_rate_limit] * 2,
                        xl, xu, levenberg_marquardt=1e-4)
    xr = np.tile(goal, (K + 1, 1))
    ur = np.zeros((K, PNU))
    guess = np.tile(start, (K + 1, 1))
    guess[:, 4] = np.linspace(0, cfg.rotation, K + 1)
    settings = ocp.SqpSettings(mode="full", tol=cfg.tol, max_iter=cfg.max_iter, line_search=True,
                               qp=qp.QpSettings(tol=1e-9, max_iter=40000))
    try:
        sol = ocp.solve_sqp(tr, start, xr, ur, settings, init=(guess, ur.copy()))
    except QpFailure as exc:
        raise Infeasible(f"flip planner QP failed: {exc}") from exc
    if sol.status != "converged":
        raise Infeasible("flip planner did not converge; final time may be too short")
    audit = plan_violation(model, sol.xs, sol.us, xl, xu, tr.u_lower, tr.u_upper, start)
    if audit > cfg.feas_tol:
        raise Infeasible(f"flip plan violates its constraints by {audit:.2e}")
    states, inputs = lift(sol.xs, sol.us, params)
    meta = {"weight": params.weight, "prop_bounds": [cfg.prop_min, cfg.prop_max],
            "prop_rate_limit": cfg.prop_rate_limit, "rate_limit": cfg.rate_limit,
            "sqp_iterations": sol.iterations, "kkt": sol.kkt[-1] if sol.kkt else None}
    return SafePlan(cfg.dt, cfg.final_time, sol.xs, sol.us, states, inputs, meta)
