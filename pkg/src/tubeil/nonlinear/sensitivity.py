"""Tangential predictors: first-order dependence of the first optimal input
on the initial state, from the KKT system at a solved SQP point."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .. import qp, quat
from ..errors import DimensionMismatch, QpFailure, SingularKkt, WeakComplementarity
from .ocp import OcpTranscription, SqpSolution, _condensed_qp, _stage_hessians, constraint_curvature, linearize


def active_bounds(tr: OcpTranscription, sol: SqpSolution, threshold: float, tol: float = 1e-7):
    """Indices ``(k, i)`` of strongly active input bounds.  Raises
    WeakComplementarity if some bound is active with a tiny multiplier."""
    at_bound = (np.abs(sol.us - tr.u_upper) <= tol) | (np.abs(sol.us - tr.u_lower) <= tol)
    strong = np.abs(sol.mu) > threshold
    if np.any(at_bound & ~strong):
        raise WeakComplementarity("an active input bound has a near-zero multiplier")
    return np.argwhere(strong)


@dataclass
class SensitivityGain:
    """``u+ = u_bar0 + K (x+ - x_bar0)``; ``K_mrp`` acts on 9-dim errors
    ``[dp, dv, mrp(q+ (x) q_bar0^-1)]`` for quaternion states."""
    K: np.ndarray
    x_bar0: np.ndarray
    u_bar0: np.ndarray
    u_lower: np.ndarray
    u_upper: np.ndarray
    K_mrp: Optional[np.ndarray] = None


def kkt_matrix(tr: OcpTranscription, sol: SqpSolution, active, curvature=None):
    nx, nu, N = tr.nx, tr.nu, tr.N
    lin = linearize(tr, sol.xs, sol.us)
    Hxx, Huu, Hxu = _stage_hessians(tr, curvature)
    n = tr.n_decision
    nxs = (N + 1) * nx
    H = sp.lil_matrix((n, n))
    for k in range(N + 1):
        H[k * nx:(k + 1) * nx, k * nx:(k + 1) * nx] = Hxx[k]
    for k in range(N):
        us_ = slice(nxs + k * nu, nxs + (k + 1) * nu)
        H[us_, us_] = Huu[k]
        H[k * nx:(k + 1) * nx, us_] = Hxu[k]
        H[us_, k * nx:(k + 1) * nx] = Hxu[k].T
    E = sp.lil_matrix((nx + N * nx + len(active), n))
    E[:nx, :nx] = np.eye(nx)
    for k in range(N):
        r = nx + k * nx
        E[r:r + nx, (k + 1) * nx:(k + 2) * nx] = np.eye(nx)
        E[r:r + nx, k * nx:(k + 1) * nx] = -lin.A[k]
        E[r:r + nx, nxs + k * nu:nxs + (k + 1) * nu] = -lin.B[k]
    for j, (k, i) in enumerate(active):
        E[nx + N * nx + j, nxs + k * nu + i] = 1.0
    H, E = H.tocsc(), E.tocsc()
    return sp.bmat([[H, E.T], [E, None]], format="csc"), E.shape[0]


def sensitivity_gain(tr: OcpTranscription, sol: SqpSolution, threshold: float = 1e-6,
                     exact_hessian: bool = True) -> SensitivityGain:
    """Solve the frozen-active-set KKT system once per initial-state
    coordinate and keep the first-input block."""
    nx, nu = tr.nx, tr.nu
    active = active_bounds(tr, sol, threshold)
    curv = constraint_curvature(tr, sol.xs, sol.us, sol.lam) if exact_hessian else None
    K_mat, m = kkt_matrix(tr, sol, active, curv)
    n = tr.n_decision
    rhs = np.zeros((n + m, nx))
    rhs[n:n + nx] = np.eye(nx)
    try:
        lu = spla.splu(K_mat)
        d = lu.solve(rhs)
    except RuntimeError as exc:
        raise SingularKkt(str(exc)) from exc
    if not np.all(np.isfinite(d)):
        raise SingularKkt("non-finite sensitivity")
    nxs = (tr.N + 1) * nx
    K = d[nxs:nxs + nu, :]
    gain = SensitivityGain(K, sol.xs[0].copy(), sol.us[0].copy(), tr.u_lower, tr.u_upper)
    if nx == 10:
        gain.K_mrp = K @ mrp_tangent(sol.xs[0])
    return gain


def mrp_tangent(x_bar) -> np.ndarray:
    """``d x / d e`` at ``e = 0`` for ``x = apply_error(e, x_bar)`` (10x9)."""
    D = np.zeros((10, 9))
    D[:6, :6] = np.eye(6)
    q = x_bar[6:10]
    # q+ = from_mrp(eps) (x) q,  from_mrp(eps) ~ [1, 2 eps]
    Lq = np.array([quat.multiply(np.r_[0.0, 2 * e], q) for e in np.eye(3)]).T
    D[6:10, 6:9] = Lq
    return D


def state_error(x, x_bar) -> np.ndarray:
    """9-dim error ``[dp, dv, mrp(q (x) q_bar^-1)]``."""
    x, x_bar = np.asarray(x, dtype=float), np.asarray(x_bar, dtype=float)
    return np.concatenate([x[..., :6] - x_bar[..., :6], quat.mrp_error(x[..., 6:10], x_bar[..., 6:10])], -1)


def apply_error(e, x_bar) -> np.ndarray:
    e, x_bar = np.asarray(e, dtype=float), np.asarray(x_bar, dtype=float)
    q = quat.apply_mrp_error(e[..., 6:9], x_bar[..., 6:10])
    q = quat.align_sign(q, x_bar[..., 6:10])
    return np.concatenate([x_bar[..., :6] + e[..., :6], q], -1)


def predict_augmented_action(x_plus, gain: SensitivityGain, clamp: bool = True) -> np.ndarray:
    """Linear prediction around the solved point, optionally clamped to the
    input bounds."""
    x_plus = np.asarray(x_plus, dtype=float)
    if gain.K_mrp is not None:
        if x_plus.shape[-1] == 9:
            du = x_plus @ gain.K_mrp.T
        else:
            du = state_error(x_plus, gain.x_bar0) @ gain.K_mrp.T
    else:
        if x_plus.shape[-1] != gain.K.shape[1]:
            raise DimensionMismatch("state dimension does not match the gain")
        du = (x_plus - gain.x_bar0) @ gain.K.T
    u = gain.u_bar0 + du
    return np.clip(u, gain.u_lower, gain.u_upper) if clamp else u


def generalized_tangential_predictor(tr: OcpTranscription, sol: SqpSolution, x_plus,
                                     settings: Optional[qp.QpSettings] = None,
                                     exact_hessian: bool = True) -> np.ndarray:
    """Re-solve the QP linearized at ``sol`` with the initial state moved to
    ``x_plus`` (inequalities kept, so active-set changes are handled)."""
    x_plus = np.asarray(x_plus, dtype=float)
    lin = linearize(tr, sol.xs, sol.us)
    curv = constraint_curvature(tr, sol.xs, sol.us, sol.lam) if exact_hessian else None
    hess = _stage_hessians(tr, curv)
    prob, *_ = _condensed_qp(tr, lin, x_plus - sol.xs[0], sol.xr, sol.ur, hess)
    w = np.linalg.eigvalsh(prob.P)
    if w[0] <= 1e-10:
        prob.P = prob.P + (1e-10 - w[0]) * np.eye(len(w))
    out = qp.solve(prob, settings or qp.QpSettings(tol=1e-10, max_iter=10000))
    if not out.solved:
        raise QpFailure(f"predictor QP ended with status {out.status.value}")
    return sol.us[0] + out.x[:tr.nu]
