"""Multiple-shooting optimal control and its SQP solver.

Decision vector ``y = (x_0 .. x_N, u_0 .. u_{N-1})``.  Each SQP iteration
linearizes the dynamics at every knot, condenses the QP onto the input
increments (the state increments follow from the linearized dynamics and
the defects) and solves the dense QP with the ADMM solver.  Multipliers
follow the Lagrangian

    L = f + sum_k lam_{k+1}'(x_{k+1} - F(x_k, u_k)) + lam_0'(x_0 - x_t)
          + mu'(input bounds) + nu'(state bounds)

so ``lam`` is recovered by a backward recursion once the QP is solved.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np

from .. import qp
from ..errors import ConfigError, QpFailure


@dataclass
class OcpTranscription:
    model: object                       # provides nx, nu, step_jac(x, u)
    N: int
    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    gamma: float = 1.0
    u_lower: Optional[np.ndarray] = None
    u_upper: Optional[np.ndarray] = None
    x_lower: Optional[np.ndarray] = None    # (N+1, nx), +-inf where free
    x_upper: Optional[np.ndarray] = None
    levenberg_marquardt: float = 1e-4

    def __post_init__(self):
        nx, nu = self.model.nx, self.model.nu
        if self.N < 1:
            raise ConfigError("horizon must be >= 1")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.P = np.atleast_2d(np.asarray(self.P, dtype=float))
        if self.Q.shape != (nx, nx) or self.P.shape != (nx, nx) or self.R.shape != (nu, nu):
            raise ConfigError("weight matrices do not match the model dimensions")
        if not 0 < self.gamma <= 1:
            raise ConfigError("discount must lie in (0, 1]")
        for M in (self.Q, self.R, self.P):
            if np.min(np.linalg.eigvalsh(0.5 * (M + M.T))) < -1e-12:
                raise ConfigError("weights must be positive semidefinite")
        self.u_lower = np.full(nu, -np.inf) if self.u_lower is None else np.asarray(self.u_lower, float)
        self.u_upper = np.full(nu, np.inf) if self.u_upper is None else np.asarray(self.u_upper, float)
        if self.u_lower.shape != (nu,) or self.u_upper.shape != (nu,):
            raise ConfigError("input bounds must have one entry per input")
        shape = (self.N + 1, nx)
        self.x_lower = np.full(shape, -np.inf) if self.x_lower is None else np.broadcast_to(self.x_lower, shape).astype(float)
        self.x_upper = np.full(shape, np.inf) if self.x_upper is None else np.broadcast_to(self.x_upper, shape).astype(float)
        disc = self.gamma ** np.arange(self.N + 1)
        self.Wx = disc[:, None, None] * np.broadcast_to(self.Q, (self.N + 1, nx, nx)).copy()
        self.Wx[-1] = disc[-1] * self.P
        self.Wu = disc[:-1, None, None] * self.R
        self._state_rows = np.argwhere(np.isfinite(self.x_lower) | np.isfinite(self.x_upper))

    @property
    def nx(self) -> int:
        return self.model.nx

    @property
    def nu(self) -> int:
        return self.model.nu

    @property
    def n_decision(self) -> int:
        return (self.N + 1) * self.nx + self.N * self.nu

    def x_index(self, k: int) -> slice:
        return slice(k * self.nx, (k + 1) * self.nx)

    def u_index(self, k: int) -> slice:
        off = (self.N + 1) * self.nx
        return slice(off + k * self.nu, off + (k + 1) * self.nu)

    def pack(self, xs, us) -> np.ndarray:
        return np.concatenate([np.ravel(xs), np.ravel(us)])

    def unpack(self, y):
        y = np.asarray(y, dtype=float)
        n = (self.N + 1) * self.nx
        return y[:n].reshape(self.N + 1, self.nx), y[n:].reshape(self.N, self.nu)

    def cost(self, xs, us, xr, ur) -> float:
        ex, eu = xs - xr, us - ur
        return 0.5 * float(np.einsum("ki,kij,kj->", ex, self.Wx, ex) + np.einsum("ki,kij,kj->", eu, self.Wu, eu))


def transcribe(model, Q, R, P, N: int, gamma: float = 1.0, u_lower=None, u_upper=None,
               x_lower=None, x_upper=None, levenberg_marquardt: float = 1e-4) -> OcpTranscription:
    return OcpTranscription(model, N, Q, R, P, gamma, u_lower, u_upper, x_lower, x_upper, levenberg_marquardt)


@dataclass
class Linearization:
    xs: np.ndarray
    us: np.ndarray
    A: np.ndarray       # (N, nx, nx)
    B: np.ndarray       # (N, nx, nu)
    defects: np.ndarray  # F(x_k, u_k) - x_{k+1}


@dataclass
class SqpSettings:
    mode: str = "full"          # "full" or "rti"
    tol: float = 1e-8
    max_iter: int = 50
    line_search: bool = False
    qp: qp.QpSettings = field(default_factory=lambda: qp.QpSettings(tol=1e-9, max_iter=4000))


@dataclass
class SqpSolution:
    xs: np.ndarray
    us: np.ndarray
    lam: np.ndarray          # (N+1, nx)
    mu: np.ndarray           # (N, nu): >0 upper bound active, <0 lower
    nu: np.ndarray           # (N+1, nx) state-bound multipliers
    kkt: List[float]
    costs: List[float]
    status: str
    iterations: int
    x_t: np.ndarray
    xr: np.ndarray
    ur: np.ndarray

    @property
    def u0(self) -> np.ndarray:
        return self.us[0]

    @property
    def y(self) -> np.ndarray:
        return np.concatenate([self.xs.ravel(), self.us.ravel()])


def linearize(tr: OcpTranscription, xs, us) -> Linearization:
    xn, A, B = tr.model.step_jac(xs[:-1], us)
    return Linearization(xs, us, A, B, xn - xs[1:])


def _condense(tr: OcpTranscription, lin: Linearization, dx0):
    """State increments as ``dx = G du + c`` (G: (N+1, nx, N*nu))."""
    N, nx, nu = tr.N, tr.nx, tr.nu
    G = np.zeros((N + 1, nx, N * nu))
    c = np.zeros((N + 1, nx))
    c[0] = dx0
    for k in range(N):
        G[k + 1] = lin.A[k] @ G[k]
        G[k + 1][:, k * nu:(k + 1) * nu] += lin.B[k]
        c[k + 1] = lin.A[k] @ c[k] + lin.defects[k]
    return G, c


def constraint_curvature(tr: OcpTranscription, xs, us, lam, h: float = 1e-5) -> np.ndarray:
    """``d^2/dz^2 (lam_{k+1}' F(x_k, u_k))`` per stage, z = (x_k, u_k), by
    central differences of the analytic Jacobians.  Shape (N, nx+nu, nx+nu)."""
    nx, nu, N = tr.nx, tr.nu, tr.N
    x, u = xs[:-1], us
    out = np.zeros((N, nx + nu, nx + nu))
    lam1 = lam[1:]
    for j in range(nx + nu):
        dz = np.zeros(nx + nu)
        dz[j] = h
        grads = []
        for sgn in (1.0, -1.0):
            _, Fx, Fu = tr.model.step_jac(x + sgn * dz[:nx], u + sgn * dz[nx:])
            J = np.concatenate([Fx, Fu], -1)
            grads.append(np.einsum("ki,kij->kj", lam1, J))
        out[:, :, j] = (grads[0] - grads[1]) / (2 * h)
    return 0.5 * (out + np.swapaxes(out, 1, 2))


def _stage_hessians(tr: OcpTranscription, curvature=None, lm: float = 0.0):
    """Blocks of the QP Hessian: Hxx (N+1, nx, nx), Huu (N, nu, nu), Hxu (N, nx, nu)."""
    nx, nu = tr.nx, tr.nu
    Hxx = tr.Wx.copy()
    Huu = tr.Wu.copy()
    Hxu = np.zeros((tr.N, nx, nu))
    if curvature is not None:
        Hxx[:-1] -= curvature[:, :nx, :nx]
        Huu -= curvature[:, nx:, nx:]
        Hxu -= curvature[:, :nx, nx:]
    if lm:
        Hxx += lm * np.eye(nx)
        Huu += lm * np.eye(nu)
    return Hxx, Huu, Hxu


def _condensed_qp(tr, lin, dx0, xr, ur, hess):
    Hxx, Huu, Hxu = hess
    N, nx, nu = tr.N, tr.nx, tr.nu
    G, c = _condense(tr, lin, dx0)
    gx = np.einsum("kij,kj->ki", tr.Wx, lin.xs - xr)
    gu = np.einsum("kij,kj->ki", tr.Wu, lin.us - ur)
    HG = Hxx @ G
    Gf = G.reshape(-1, N * nu)
    H = Gf.T @ HG.reshape(-1, N * nu)
    # cross terms between stage states and their own inputs
    if np.any(Hxu):
        X = np.matmul(G[:-1].transpose(0, 2, 1), Hxu)
        for k in range(N):
            H[:, k * nu:(k + 1) * nu] += X[k]
            H[k * nu:(k + 1) * nu, :] += X[k].T
    idx = np.arange(N * nu).reshape(N, nu)
    H[idx[:, :, None], idx[:, None, :]] += Huu
    Hc = np.einsum("kij,kj->ki", Hxx, c)
    g = Gf.T @ (gx + Hc).ravel() + gu.ravel()
    g += np.matmul(c[:-1, None, :], Hxu)[:, 0].ravel()
    # constraints: input box then state rows
    rows = [np.eye(N * nu)]
    lo = [np.repeat(tr.u_lower[None], N, 0).ravel() - lin.us.ravel()]
    hi = [np.repeat(tr.u_upper[None], N, 0).ravel() - lin.us.ravel()]
    sr = tr._state_rows
    if len(sr):
        k, i = sr[:, 0], sr[:, 1]
        rows.append(G[k, i])
        base = lin.xs[k, i] + c[k, i]
        lo.append(tr.x_lower[k, i] - base)
        hi.append(tr.x_upper[k, i] - base)
    prob = qp.QpProblem(H, g, np.vstack(rows), np.concatenate(lo), np.concatenate(hi))
    return prob, G, c, gx, gu


def _recover_multipliers(tr, lin, hess, G, c, du, y, gx):
    Hxx, Huu, Hxu = hess
    N, nx, nu = tr.N, tr.nx, tr.nu
    dx = (G.reshape(-1, N * nu) @ du).reshape(N + 1, nx) + c
    duk = du.reshape(N, nu)
    mu = y[:N * nu].reshape(N, nu)
    nu_x = np.zeros((N + 1, nx))
    sr = tr._state_rows
    if len(sr):
        nu_x[sr[:, 0], sr[:, 1]] = y[N * nu:]
    grad = gx + np.einsum("kij,kj->ki", Hxx, dx) + nu_x
    grad[:-1] += np.einsum("kij,kj->ki", Hxu, duk)
    lam = np.zeros((N + 1, nx))
    lam[N] = -grad[N]
    for k in range(N - 1, -1, -1):
        lam[k] = lin.A[k].T @ lam[k + 1] - grad[k]
    return dx, duk, lam, mu, nu_x


def kkt_residual(tr, lin, lam, mu, nu_x, x_t, xr, ur) -> float:
    """Max-norm of Lagrangian stationarity, dynamics defects and bound violation."""
    gx = np.einsum("kij,kj->ki", tr.Wx, lin.xs - xr) + nu_x
    gu = np.einsum("kij,kj->ki", tr.Wu, lin.us - ur) + mu
    sx = gx + lam
    sx[:-1] -= np.einsum("kji,kj->ki", lin.A, lam[1:])
    su = gu - np.einsum("kji,kj->ki", lin.B, lam[1:])
    feas = max(np.max(np.abs(lin.defects)), np.max(np.abs(lin.xs[0] - x_t)))
    viol = max(np.max(lin.us - tr.u_upper), np.max(tr.u_lower - lin.us), 0.0)
    return float(max(np.max(np.abs(sx)), np.max(np.abs(su)), feas, viol))


def shift(xs, us):
    """Warm start for the next sampling instant: drop the first stage and
    duplicate the last one."""
    return np.vstack([xs[1:], xs[-1:]]), np.vstack([us[1:], us[-1:]])


def _merit(tr, xs, us, xr, ur, x_t, weight):
    d = tr.model.step(xs[:-1], us) - xs[1:]
    return tr.cost(xs, us, xr, ur) + weight * (np.sum(np.abs(d)) + np.sum(np.abs(xs[0] - x_t)))


def solve_sqp(tr: OcpTranscription, x_t, xr, ur, settings: Optional[SqpSettings] = None,
              warm: Optional[SqpSolution] = None, init=None) -> SqpSolution:
    """Full SQP (iterate to ``tol``) or real-time iteration (one QP).

    ``init=(xs, us)`` overrides the initial guess; otherwise ``warm`` (already
    shifted by the caller if desired) or the reference itself is used.
    """
    s = settings or SqpSettings()
    x_t = np.asarray(x_t, dtype=float)
    xr = np.asarray(xr, dtype=float)
    ur = np.asarray(ur, dtype=float)
    if init is not None:
        xs, us = (np.array(a, dtype=float) for a in init)
    elif warm is not None:
        xs, us = warm.xs.copy(), warm.us.copy()
    else:
        xs, us = xr.copy(), np.clip(ur, tr.u_lower, tr.u_upper)
        xs[0] = x_t
    N, nx, nu = tr.N, tr.nx, tr.nu
    lam = warm.lam.copy() if warm is not None else np.zeros((N + 1, nx))
    mu = warm.mu.copy() if warm is not None else np.zeros((N, nu))
    nu_x = warm.nu.copy() if warm is not None else np.zeros((N + 1, nx))
    kkts, costs = [], []
    status = "max_iter"
    max_iter = 1 if s.mode == "rti" else s.max_iter
    hess = _stage_hessians(tr, lm=tr.levenberg_marquardt)
    it = 0
    y_prev = None
    if warm is not None:
        sr = tr._state_rows
        y_prev = np.concatenate([mu.ravel(), nu_x[sr[:, 0], sr[:, 1]] if len(sr) else []])
    history = []
    for it in range(max_iter + 1):
        lin = linearize(tr, xs, us)
        if it > 0:
            kkts.append(kkt_residual(tr, lin, lam, mu, nu_x, x_t, xr, ur))
            costs.append(tr.cost(xs, us, xr, ur))
            if s.mode == "full" and kkts[-1] <= s.tol:
                status = "converged"
                break
            if it == max_iter:
                break
        prob, G, c, gx, _ = _condensed_qp(tr, lin, x_t - xs[0], xr, ur, hess)
        sol = qp.solve(prob, s.qp, y0=y_prev)
        if not sol.solved:
            raise QpFailure(f"SQP subproblem ended with status {sol.status.value}")
        y_prev = sol.y
        dx, du, lam_n, mu_n, nu_n = _recover_multipliers(tr, lin, hess, G, c, sol.x, sol.y, gx)
        alpha = 1.0
        if s.line_search:
            # nonmonotone: compare against the worst of the recent merits so
            # full steps are not rejected by the l1 penalty near the solution
            weight = 10.0 * max(1.0, np.max(np.abs(lam_n)))
            history.append(_merit(tr, xs, us, xr, ur, x_t, weight))
            m0 = max(history[-4:])
            while alpha > 1e-3 and _merit(tr, xs + alpha * dx, us + alpha * du, xr, ur, x_t, weight) > m0:
                alpha *= 0.5
        xs = xs + alpha * dx
        us = us + alpha * du
        lam += alpha * (lam_n - lam)
        mu += alpha * (mu_n - mu)
        nu_x += alpha * (nu_n - nu_x)
        if s.mode == "rti":
            break
    if s.mode == "rti":
        status = "rti"
    return SqpSolution(xs, us, lam, mu, nu_x, kkts, costs, status, it, x_t, xr, ur)
