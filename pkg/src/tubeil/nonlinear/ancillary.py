"""Ancillary NMPC: keeps the vehicle close to a safe plan.

Each call solves the tracking OCP over the plan window starting at the
current step.  The first call runs a full SQP; later calls do one real-time
iteration warm-started from the previous solution shifted by one stage.
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from .. import qp, quat
from ..sim import MultirotorParams
from . import ocp
from .model import QUAT, ReducedModel
from .planner import SafePlan


@dataclass
class NmpcConfig:
    N: int = 50
    dt: float = 0.02
    gamma: float = 0.95
    Q: np.ndarray = None
    R: np.ndarray = None
    u_lower: np.ndarray = None
    u_upper: np.ndarray = None
    integrator: str = "rk4"
    levenberg_marquardt: float = 1e-4
    sqp_tol: float = 1e-8
    sqp_max_iter: int = 50
    qp_max_iter: int = 4000
    complementarity_threshold: float = 1e-6


def nmpc_config(cfg: dict, params: MultirotorParams) -> NmpcConfig:
    c = cfg["nonlinear"]
    Q = np.diag([c["q_position"]] * 3 + [c["q_velocity"]] * 3 + [c["q_attitude"]] * 4)
    R = np.diag([c["r_thrust"]] + [c["r_rate"]] * 3)
    lo = np.array([c["thrust_min_mg"] * params.weight] + [-c["rate_limit"]] * 3)
    hi = np.array([c["thrust_max_mg"] * params.weight] + [c["rate_limit"]] * 3)
    return NmpcConfig(c["horizon"], c["dt"], c["discount"], Q, R, lo, hi, c["integrator"],
                      c["levenberg_marquardt"], c["sqp_tol"], c["sqp_max_iter"], cfg["qp"]["max_iter"],
                      c["complementarity_threshold"])


def _shifted(sol: ocp.SqpSolution) -> ocp.SqpSolution:
    xs, us = ocp.shift(sol.xs, sol.us)
    lam = np.vstack([sol.lam[1:], sol.lam[-1:]])
    nu = np.vstack([sol.nu[1:], sol.nu[-1:]])
    mu = np.vstack([sol.mu[1:], sol.mu[-1:]])
    return replace(sol, xs=xs, us=us, lam=lam, mu=mu, nu=nu)


class AncillaryNmpc:
    """Stateful tracking controller; one instance per rollout."""

    def __init__(self, plan: SafePlan, config: NmpcConfig, params: MultirotorParams):
        self.plan = plan
        self.config = config
        self.model = ReducedModel(params, config.dt, config.integrator)
        self.tr = ocp.transcribe(self.model, config.Q, config.R, config.Q, config.N, config.gamma,
                                 config.u_lower, config.u_upper, levenberg_marquardt=config.levenberg_marquardt)
        q = qp.QpSettings(tol=1e-9, max_iter=config.qp_max_iter)
        self.full = ocp.SqpSettings("full", config.sqp_tol, config.sqp_max_iter, qp=q)
        self.rti = ocp.SqpSettings("rti", config.sqp_tol, 1, qp=q)
        self.last: Optional[ocp.SqpSolution] = None
        self.solves = 0

    def reset(self) -> None:
        self.last = None
        self.solves = 0

    def reference(self, k: int):
        return self.plan.window(k, self.config.N)

    def aligned(self, x, k: int) -> np.ndarray:
        """Reduced state with its quaternion sign matched to the plan at step ``k``."""
        x = np.array(x[:10], dtype=float)
        x[QUAT] = quat.align_sign(x[QUAT], self.plan.state_at(k)[QUAT])
        return x

    def act(self, x, k: int, mode: Optional[str] = None):
        """Action and solution at plan step ``k``.  ``mode`` forces "full" or
        "rti"; by default the first call is a full solve."""
        x_t = self.aligned(x, k)
        xr, ur = self.reference(k)
        mode = mode or ("full" if self.last is None else "rti")
        if mode == "rti" and self.last is not None:
            sol = ocp.solve_sqp(self.tr, x_t, xr, ur, self.rti, warm=_shifted(self.last))
        elif mode == "rti":
            sol = ocp.solve_sqp(self.tr, x_t, xr, ur, self.rti)
        else:
            sol = ocp.solve_sqp(self.tr, x_t, xr, ur, self.full,
                                warm=None if self.last is None else _shifted(self.last))
        self.last = sol
        self.solves += 1
        return np.clip(sol.u0, self.tr.u_lower, self.tr.u_upper), sol
