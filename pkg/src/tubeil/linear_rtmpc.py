"""Linear robust tube MPC around hover.

Reduced state ``x = [p(3), v(3), roll, pitch]`` expressed in the yaw-fixed
frame (yaw is held at zero, so it coincides with the world frame); input
``u = [dT, roll_cmd, pitch_cmd]`` where ``dT`` is the collective-thrust
deviation from hover.  The feedback convention is ``u = u_bar + K (x - x_bar)``
with ``A + B K`` Schur stable.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
from scipy.optimize import curve_fit

from . import qp, quat, sim
from .errors import DimensionMismatch, Infeasible, NoConvergence, QpFailure
from .sets import AxisBox, Polytope, linear_map_box, pontryagin_diff_polytope_box

NX, NU = 8, 3


@dataclass
class LinearModel:
    A: np.ndarray
    B: np.ndarray
    dt: float
    tau_roll: float
    tau_pitch: float
    Ac: np.ndarray
    Bc: np.ndarray

    def discretize(self, dt: float):
        return _zoh(self.Ac, self.Bc, dt)

    def step(self, x, u):
        return x @ self.A.T + u @ self.B.T


def _zoh(Ac, Bc, dt):
    n, m = Bc.shape
    M = np.zeros((n + m, n + m))
    M[:n, :n], M[:n, n:] = Ac, Bc
    E = sla.expm(M * dt)
    return E[:n, :n], E[:n, n:]


def continuous_hover_model(params: sim.MultirotorParams, tau_roll: float, tau_pitch: float):
    g, m, c = params.gravity, params.mass, params.drag_linear
    Ac = np.zeros((NX, NX))
    Bc = np.zeros((NX, NU))
    Ac[0:3, 3:6] = np.eye(3)
    Ac[3:6, 3:6] = -c / m * np.eye(3)
    Ac[3, 7] = g      # pitch tilts thrust towards +x
    Ac[4, 6] = -g     # roll tilts thrust towards -y
    Bc[5, 0] = 1.0 / m
    Ac[6, 6], Bc[6, 1] = -1.0 / tau_roll, 1.0 / tau_roll
    Ac[7, 7], Bc[7, 2] = -1.0 / tau_pitch, 1.0 / tau_pitch
    return Ac, Bc


def build_linear_model(params: sim.MultirotorParams, tau_roll: float, tau_pitch: float,
                       dt: float = 0.1) -> LinearModel:
    if tau_roll <= 0 or tau_pitch <= 0:
        raise ValueError("attitude time constants must be positive")
    Ac, Bc = continuous_hover_model(params, tau_roll, tau_pitch)
    A, B = _zoh(Ac, Bc, dt)
    return LinearModel(A, B, dt, tau_roll, tau_pitch, Ac, Bc)


def solve_lqr(A, B, Q, R, tol: float = 1e-13, max_iter: int = 200000):
    """Infinite-horizon discrete LQR by Riccati value iteration.

    Returns ``(K, P)`` with ``u = K x`` optimal, i.e. ``K = -(R + B'PB)^-1 B'PA``.
    """
    A, B = np.atleast_2d(A).astype(float), np.atleast_2d(B).astype(float)
    Q, R = np.atleast_2d(Q).astype(float), np.atleast_2d(R).astype(float)
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = -np.linalg.solve(R + BtP @ B, BtP @ A)
        P_new = Q + A.T @ P @ (A + B @ K)
        P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)):
            break
        if np.max(np.abs(P_new - P)) <= tol * max(1.0, np.max(np.abs(P_new))):
            P = P_new
            BtP = B.T @ P
            K = -np.linalg.solve(R + BtP @ B, BtP @ A)
            return K, P
        P = P_new
    raise NoConvergence("Riccati iteration did not converge (pair not stabilizable?)")


def riccati_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(rhs - P)))


# -- plant interface -----------------------------------------------------------

def reduced_state(state13) -> np.ndarray:
    """13-dim simulator state -> 8-dim [p, v, roll, pitch]."""
    s = np.asarray(state13, dtype=float)
    roll, pitch, _ = quat.to_euler_zyx(s[..., sim.QUAT])
    return np.concatenate([s[..., :6], roll[..., None], pitch[..., None]], axis=-1)


def compensated_thrust(dT, roll, pitch, params: sim.MultirotorParams, max_tilt_gain: float = 3.0):
    """Collective thrust with tilt compensation: (mg + dT) / (cos roll cos pitch)."""
    c = np.maximum(np.cos(roll) * np.cos(pitch), 1.0 / max_tilt_gain)
    return np.maximum(params.weight + dT, 0.0) / c


def apply_action(simulator: sim.Simulator, u, duration: float = 0.1, inner_period: float = 0.01):
    """Zero-order hold of a reduced-model action on the full simulator.

    The tilt compensation of the thrust is refreshed every ``inner_period``.
    Returns the list of reduced states visited at every physics step.
    """
    u = np.atleast_2d(np.asarray(u, dtype=float))
    params = simulator.params
    per_inner = int(round(inner_period / simulator.dt))
    n_inner = int(round(duration / inner_period))
    visited = []
    for _ in range(n_inner):
        x = reduced_state(simulator.state)
        t_cmd = compensated_thrust(u[:, 0], x[:, 6], x[:, 7], params)
        cmd = sim.Command(t_cmd, tilt=u[:, 1:3])
        for _ in range(per_inner):
            simulator.step(cmd)
            visited.append(reduced_state(simulator.state))
    return visited


def identify_attitude_time_constants(params: sim.MultirotorParams, step: float = 0.1,
                                     duration: float = 1.0):
    """Fit first-order lags to simulated roll and pitch step responses."""
    taus = []
    for axis in (0, 1):
        s = sim.Simulator(params, sim.hover_state(), np.zeros(3))
        tilt = np.zeros(2)
        tilt[axis] = step
        ts, ys = [], []
        for k in range(int(round(duration / s.dt))):
            x = reduced_state(s.state[0])
            t_cmd = compensated_thrust(0.0, x[6], x[7], params)
            s.step(sim.Command(t_cmd, tilt=tilt))
            ts.append(s.t)
            ys.append(reduced_state(s.state[0])[6 + axis])
        ts, ys = np.array(ts), np.array(ys)
        (tau,), _ = curve_fit(lambda t, tau: step * (1 - np.exp(-t / tau)), ts, ys, p0=[0.1],
                              bounds=(1e-3, 10.0))
        taus.append(float(tau))
    return tuple(taus)


# -- RTMPC -------------------------------------------------------------------

@dataclass
class RtmpcConfig:
    model: LinearModel
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    K: np.ndarray
    Z: AxisBox
    X: Polytope
    U: Polytope
    N: int
    initial_error_weight: float = 1.0
    X_tight: Polytope = None
    U_tight: Polytope = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if self.X_tight is None:
            self.X_tight = pontryagin_diff_polytope_box(self.X, self.Z)
        if self.U_tight is None:
            self.U_tight = pontryagin_diff_polytope_box(self.U, linear_map_box(self.K, self.Z))
        self._build()

    def _build(self):
        A, B, N = self.model.A, self.model.B, self.N
        nx, nu = B.shape
        # X_bar = S @ [x_bar0; U]
        S = np.zeros(((N + 1) * nx, nx + N * nu))
        Ak = np.eye(nx)
        S[:nx, :nx] = np.eye(nx)
        for i in range(1, N + 1):
            rows = slice(i * nx, (i + 1) * nx)
            prev = slice((i - 1) * nx, i * nx)
            S[rows] = A @ S[prev]
            S[rows, nx + (i - 1) * nu: nx + i * nu] = B
        Qbar = sla.block_diag(*([self.Q] * N + [self.P]))
        Rbar = sla.block_diag(np.zeros((nx, nx)), *([self.R] * N))
        H = 2 * (S.T @ Qbar @ S + Rbar)
        # cost-to-go of the initial tube error under the ancillary law
        H[:nx, :nx] += 2 * self.initial_error_weight * self.P
        Hx, hx = self.X_tight.H, self.X_tight.h
        Hu, hu = self.U_tight.H, self.U_tight.h
        rows_x = np.kron(np.eye(N + 1), Hx) @ S
        rows_u = np.hstack([np.zeros((N * len(hu), nx)), np.kron(np.eye(N), Hu)])
        tube = np.hstack([np.eye(nx), np.zeros((nx, N * nu))])
        self._cache = dict(S=S, Qbar=Qbar, H=H, Acon=np.vstack([tube, rows_x, rows_u]),
                           ub_static=np.r_[np.tile(hx, N + 1), np.tile(hu, N)])

    @property
    def n_decision(self) -> int:
        return NX + self.N * NU


@dataclass
class RtmpcSolution:
    x_bar0: np.ndarray
    u_bar0: np.ndarray
    x_plan: np.ndarray
    u_plan: np.ndarray
    qp: qp.QpSolution


def make_config(model: LinearModel, Q, R, Z: AxisBox, X: Polytope, U: Polytope, N: int = 30,
                initial_error_weight: float = 1.0) -> RtmpcConfig:
    """Weight ``initial_error_weight`` scales the term ``e'Pe`` with
    ``e = x_t - x_bar0``; zero recovers the textbook objective where the
    nominal initial state is free inside the tube."""
    K, P = solve_lqr(model.A, model.B, Q, R)
    return RtmpcConfig(model, np.asarray(Q, float), np.asarray(R, float), P, K, Z, X, U, N,
                       initial_error_weight)


def _reference_matrix(ref, N: int) -> np.ndarray:
    r = np.asarray(ref, dtype=float)
    if r.ndim == 1:
        r = r.reshape(-1, 6)
    if r.shape[0] != N + 1 or r.shape[1] not in (6, NX):
        raise DimensionMismatch(f"reference must have {N + 1} rows of 6 or 8 values")
    if r.shape[1] == 6:
        r = np.hstack([r, np.zeros((N + 1, 2))])
    return r


def solve_rtmpc(x_t, ref, cfg: RtmpcConfig, warm: Optional[RtmpcSolution] = None,
                settings: Optional[qp.QpSettings] = None) -> RtmpcSolution:
    """Tube MPC step: optimize the nominal initial state and input sequence."""
    x_t = np.asarray(x_t, dtype=float)
    if x_t.shape != (NX,) or not np.all(np.isfinite(x_t)):
        raise DimensionMismatch("x_t must be a finite 8-vector")
    N = cfg.N
    r = _reference_matrix(ref, N).ravel()
    c = cfg._cache
    q = -2 * c["S"].T @ (c["Qbar"] @ r)
    q[:NX] -= 2 * cfg.initial_error_weight * cfg.P @ x_t
    lower = np.r_[x_t - cfg.Z.upper, np.full(len(c["ub_static"]), -np.inf)]
    upper = np.r_[x_t - cfg.Z.lower, c["ub_static"]]
    prob = qp.QpProblem(c["H"], q, c["Acon"], lower, upper)
    x0 = y0 = None
    if warm is not None:
        x0 = np.r_[warm.x_plan[1], warm.u_plan[1:].ravel(), warm.u_plan[-1]]
        y0 = warm.qp.y
    sol = qp.solve(prob, settings, x0=x0, y0=y0)
    if sol.status == qp.Status.PRIMAL_INFEASIBLE:
        raise Infeasible("tube MPC problem is infeasible")
    if not sol.solved:
        raise QpFailure(f"QP ended with status {sol.status.value}")
    z = sol.x
    u_plan = z[NX:].reshape(N, NU)
    x_plan = (c["S"] @ z).reshape(N + 1, NX)
    return RtmpcSolution(z[:NX], u_plan[0], x_plan, u_plan, sol)


def ancillary_action(x_t, x_bar0, u_bar0, K) -> np.ndarray:
    return np.asarray(u_bar0) + (np.asarray(x_t) - np.asarray(x_bar0)) @ np.asarray(K).T


class LinearExpert:
    """Stateful tube-MPC expert holding its warm start."""

    def __init__(self, cfg: RtmpcConfig, settings: Optional[qp.QpSettings] = None):
        self.cfg = cfg
        self.settings = settings
        self.last: Optional[RtmpcSolution] = None
        self.solves = 0

    def reset(self):
        self.last = None

    def solve(self, x_t, ref) -> RtmpcSolution:
        sol = solve_rtmpc(x_t, ref, self.cfg, warm=self.last, settings=self.settings)
        self.last = sol
        self.solves += 1
        return sol

    def act(self, x_t, ref):
        sol = self.solve(x_t, ref)
        u = ancillary_action(x_t, sol.x_bar0, sol.u_bar0, self.cfg.K)
        return u, sol
