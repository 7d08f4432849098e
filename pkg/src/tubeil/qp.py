"""Convex QP solver: operator splitting (ADMM) with a direct polish step.

Problem form::

    minimize    0.5 x'Px + q'x
    subject to  l <= Ax <= u

Equalities are rows with ``l == u``.  Dual convention: at a solution
``Px + q + A'y = 0``, so a row active at its lower bound has ``y <= 0`` and
a row active at its upper bound has ``y >= 0``.

``P`` and ``A`` may be dense arrays or ``scipy.sparse`` matrices; the linear
algebra follows whichever representation ``A`` uses.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DimensionMismatch, SingularKkt

INF = 1e20


class Status(str, enum.Enum):
    SOLVED = "solved"
    MAX_ITER = "max_iter"
    PRIMAL_INFEASIBLE = "primal_infeasible"
    DUAL_INFEASIBLE = "dual_infeasible"


@dataclass
class QpProblem:
    P: object
    q: np.ndarray
    A: object
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        self.q = np.asarray(self.q, dtype=float).ravel()
        n = self.q.size
        if sp.issparse(self.P):
            self.P = sp.csc_matrix(0.5 * (self.P + self.P.T))
        else:
            P = np.atleast_2d(np.asarray(self.P, dtype=float))
            self.P = 0.5 * (P + P.T)
        if self.A is None:
            self.A = np.zeros((0, n))
        if sp.issparse(self.A):
            self.A = sp.csc_matrix(self.A)
        else:
            self.A = np.asarray(self.A, dtype=float).reshape(-1, n)
        m = self.A.shape[0]
        self.l = np.broadcast_to(np.asarray(self.l, dtype=float), (m,)).copy()
        self.u = np.broadcast_to(np.asarray(self.u, dtype=float), (m,)).copy()
        if self.P.shape != (n, n) or self.A.shape[1] != n:
            raise DimensionMismatch("inconsistent QP dimensions")
        if np.any(self.l > self.u):
            raise ValueError("need l <= u")
        self.l = np.maximum(self.l, -INF)
        self.u = np.minimum(self.u, INF)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def m(self) -> int:
        return self.A.shape[0]

    @property
    def sparse(self) -> bool:
        return sp.issparse(self.A)

    def objective(self, x) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)

    def kkt_residuals(self, x, y):
        """(primal, dual, complementarity) infinity-norm residuals."""
        Ax = self.A @ x
        prim = np.max(np.maximum(self.l - Ax, Ax - self.u), initial=0.0)
        dual = np.max(np.abs(self.P @ x + self.q + self.A.T @ y), initial=0.0)
        lo_gap = np.minimum(np.abs(Ax - self.l), 1.0)
        hi_gap = np.minimum(np.abs(self.u - Ax), 1.0)
        comp = np.max(np.maximum(np.maximum(-y, 0) * lo_gap, np.maximum(y, 0) * hi_gap), initial=0.0)
        return float(prim), float(dual), float(comp)


@dataclass
class QpSettings:
    tol: float = 1e-8
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    eq_rho_scale: float = 1e3
    scaling_iters: int = 10
    check_every: int = 5
    adaptive_rho: bool = True
    polish: bool = True
    polish_eps: float = 1e-3
    infeas_tol: float = 1e-7
    regularization: float = 1e-4


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: Status
    prim_res: float
    dual_res: float
    iterations: int
    polished: bool = False
    objective: float = float("nan")
    extra: dict = field(default_factory=dict)

    @property
    def solved(self) -> bool:
        return self.status == Status.SOLVED


def _col_inf_norm(M):
    if M.shape[0] == 0:
        return np.zeros(M.shape[1])
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=0).todense()).ravel()
    return np.max(np.abs(M), axis=0)


def _row_inf_norm(M):
    if M.shape[1] == 0 or M.shape[0] == 0:
        return np.zeros(M.shape[0])
    if sp.issparse(M):
        return np.asarray(abs(M).max(axis=1).todense()).ravel()
    return np.max(np.abs(M), axis=1)


def _diag_scale(M, left, right):
    if sp.issparse(M):
        return sp.csc_matrix(sp.diags(left) @ M @ sp.diags(right))
    return (left[:, None] * M) * right[None, :]


class _Scaled:
    """Ruiz-equilibrated copy of a problem with unscaling helpers."""

    def __init__(self, prob: QpProblem, iters: int):
        n, m = prob.n, prob.m
        D, E = np.ones(n), np.ones(m)
        P, A, q = prob.P, prob.A, prob.q.copy()
        c = 1.0
        for _ in range(iters):
            nd = np.maximum(_col_inf_norm(P), _col_inf_norm(A))
            ne = _row_inf_norm(A)
            dd = 1.0 / np.sqrt(np.clip(nd, 1e-4, 1e4))
            de = 1.0 / np.sqrt(np.clip(ne, 1e-4, 1e4)) if m else ne
            dd[nd == 0] = 1.0
            if m:
                de[ne == 0] = 1.0
            P = _diag_scale(P, dd, dd)
            A = _diag_scale(A, de, dd) if m else A
            q = dd * q
            D *= dd
            E *= de
            pn = np.mean(_col_inf_norm(P)) if n else 1.0
            gamma = 1.0 / np.clip(max(pn, np.max(np.abs(q), initial=0.0)), 1e-4, 1e4)
            P = P * gamma
            q = q * gamma
            c *= gamma
        self.P, self.A, self.q, self.D, self.E, self.c = P, A, q, D, E, c
        self.l = np.where(prob.l <= -INF, -INF, prob.l * E)
        self.u = np.where(prob.u >= INF, INF, prob.u * E)

    def unscale(self, x, z, y):
        return self.D * x, z / self.E, self.E * y / self.c


def _rho_vector(prob, rho, eq_scale):
    r = np.full(prob.m, rho)
    r[(prob.l <= -INF) & (prob.u >= INF)] = 1e-6
    r[np.abs(prob.u - prob.l) < 1e-12] = rho * eq_scale
    return r


def _factor(P, A, sigma, rvec, sparse, reg=1e-4):
    """Factor the reduced ADMM system; adds ``reg*I`` if factorization fails."""
    try:
        return _factor_once(P, A, sigma, rvec, sparse)
    except (np.linalg.LinAlgError, RuntimeError):
        return _factor_once(P, A, sigma + reg, rvec, sparse)


def _factor_once(P, A, sigma, rvec, sparse):
    n = P.shape[0]
    if sparse or sp.issparse(P):
        M = sp.csc_matrix(P + sigma * sp.identity(n) + A.T @ sp.diags(rvec) @ A)
        lu = spla.splu(M)
        return lu.solve
    Pd = P.toarray() if sp.issparse(P) else P
    M = Pd + sigma * np.eye(n) + (A.T * rvec) @ A
    cf = sla.cho_factor(M)
    return lambda b: sla.cho_solve(cf, b)


def _kkt_solve(P, A_act, rhs_x, rhs_y, delta=1e-10, refine=5, sparse=False):
    """Solve [[P, A'],[A, 0]] [x; y] = [rhs_x; rhs_y] via a regularized
    factorization and iterative refinement against the exact system."""
    n, k = P.shape[0], A_act.shape[0]
    if sparse or sp.issparse(P) or sp.issparse(A_act):
        Ps, As = sp.csc_matrix(P), sp.csc_matrix(A_act)
        K = sp.bmat([[Ps, As.T], [As, None]], format="csc")
        Kr = sp.bmat([[Ps + delta * sp.identity(n), As.T], [As, -delta * sp.identity(k)]], format="csc")
        solve = spla.splu(Kr).solve
    else:
        K = np.block([[P, A_act.T], [A_act, np.zeros((k, k))]])
        Kr = K + np.diag(np.r_[np.full(n, delta), np.full(k, -delta)])
        lu = sla.lu_factor(Kr)
        solve = lambda b: sla.lu_solve(lu, b)
    rhs = np.r_[rhs_x, rhs_y]
    sol = solve(rhs)
    for _ in range(refine):
        sol = sol + solve(rhs - K @ sol)
    return sol[:n], sol[n:]


def _polish(prob: QpProblem, x, z, y, tol):
    l, u = prob.l, prob.u
    eq = np.abs(u - l) < 1e-12
    lo = eq | (z - l < -y)
    hi = ~eq & (u - z < y)
    lo &= l > -INF
    hi &= u < INF
    act = np.flatnonzero(lo | hi)
    A_act = prob.A[act] if len(act) else (sp.csc_matrix((0, prob.n)) if prob.sparse else np.zeros((0, prob.n)))
    b = np.where(lo[act], l[act], u[act])
    P = prob.P
    try:
        xp, ya = _kkt_solve(P, A_act, -prob.q, b, sparse=prob.sparse)
    except (np.linalg.LinAlgError, RuntimeError, ValueError):
        return None
    yp = np.zeros(prob.m)
    yp[act] = ya
    if not np.all(np.isfinite(xp)) or not np.all(np.isfinite(yp)):
        return None
    Ax = prob.A @ xp
    prim = np.max(np.maximum(l - Ax, Ax - u), initial=0.0)
    dual = np.max(np.abs(P @ xp + prob.q + prob.A.T @ yp), initial=0.0)
    sign_bad = np.max(np.r_[yp[lo & ~eq], -yp[hi]], initial=0.0)
    if prim <= tol and dual <= tol and sign_bad <= tol:
        return xp, yp, prim, dual
    return None


def solve(prob: QpProblem, settings: Optional[QpSettings] = None, x0=None, y0=None) -> QpSolution:
    """Solve a convex QP; ``x0``/``y0`` warm-start the iterates."""
    s = settings or QpSettings()
    n, m = prob.n, prob.m
    if m == 0:
        return _solve_unconstrained(prob, s)
    if s.polish and y0 is not None:
        # a good dual guess often identifies the active set outright
        xw = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float)
        res = _polish(prob, xw, prob.A @ xw, np.asarray(y0, dtype=float), s.tol)
        if res is not None:
            return _done(prob, res, Status.SOLVED, 0, True)
    sc = _Scaled(prob, s.scaling_iters)
    P, A, q, l, u = sc.P, sc.A, sc.q, sc.l, sc.u
    rho = s.rho
    rvec = _rho_vector(prob, rho, s.eq_rho_scale)
    lin = _factor(P, A, s.sigma, rvec, prob.sparse, s.regularization)
    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / sc.D
    y = np.zeros(m) if y0 is None else np.asarray(y0, dtype=float) * sc.c / sc.E
    z = np.clip(A @ x, l, u)
    warm = x0 is not None

    def residuals(x, z, y):
        xu, zu, yu = sc.unscale(x, z, y)
        Ax = prob.A @ xu
        Px = prob.P @ xu
        Aty = prob.A.T @ yu
        rp = np.max(np.abs(Ax - zu), initial=0.0)
        rd = np.max(np.abs(Px + prob.q + Aty), initial=0.0)
        sp_ = max(np.max(np.abs(Ax), initial=0.0), np.max(np.abs(zu), initial=0.0), 1e-12)
        sd = max(np.max(np.abs(Px), initial=0.0), np.max(np.abs(Aty), initial=0.0),
                 np.max(np.abs(prob.q), initial=0.0), 1e-12)
        return rp, rd, sp_, sd, xu, zu, yu

    def try_polish(x, z, y):
        xu, zu, yu = sc.unscale(x, z, y)
        return _polish(prob, xu, prob.A @ xu, yu, s.tol)

    polish_eps = s.polish_eps
    last_rho_update = 0
    x_prev, y_prev = x.copy(), y.copy()
    rp = rd = np.inf
    for it in range(1, s.max_iter + 1):
        rhs = s.sigma * x - q + A.T @ (rvec * z - y)
        xt = lin(rhs)
        zt = A @ xt
        x = s.alpha * xt + (1 - s.alpha) * x
        zr = s.alpha * zt + (1 - s.alpha) * z
        z_new = np.clip(zr + y / rvec, l, u)
        y = y + rvec * (zr - z_new)
        z = z_new
        if it % s.check_every and not (warm and it == 1):
            x_prev, y_prev = x.copy(), y.copy()
            continue
        rp, rd, sp_, sd, xu, zu, yu = residuals(x, z, y)
        if rp <= s.tol and rd <= s.tol:
            res = try_polish(x, z, y) if s.polish else None
            if res is not None:
                return _done(prob, res, Status.SOLVED, it, True)
            return _done(prob, (xu, yu, rp, rd), Status.SOLVED, it, False)
        if s.polish and rp <= polish_eps * max(1.0, sp_) and rd <= polish_eps * max(1.0, sd):
            res = try_polish(x, z, y)
            if res is not None:
                return _done(prob, res, Status.SOLVED, it, True)
            polish_eps = max(polish_eps * 0.1, 1e-10)
        cert = _infeasibility(prob, sc, x - x_prev, y - y_prev, s.infeas_tol)
        if cert is not None:
            return QpSolution(xu, yu, cert, rp, rd, it, extra={"certificate": True})
        if s.adaptive_rho and it - last_rho_update >= 25:
            ratio = np.sqrt((rp / sp_) / max(rd / sd, 1e-30))
            if ratio > 5 or ratio < 0.2:
                rho = float(np.clip(rho * ratio, 1e-6, 1e6))
                rvec = _rho_vector(prob, rho, s.eq_rho_scale)
                lin = _factor(P, A, s.sigma, rvec, prob.sparse, s.regularization)
                last_rho_update = it
        x_prev, y_prev = x.copy(), y.copy()
    rp, rd, _, _, xu, zu, yu = residuals(x, z, y)
    return QpSolution(xu, yu, Status.MAX_ITER, rp, rd, s.max_iter, objective=prob.objective(xu))


def _done(prob, res, status, it, polished):
    x, y, rp, rd = res
    return QpSolution(x, y, status, float(rp), float(rd), it, polished, prob.objective(x))


def _solve_unconstrained(prob: QpProblem, s: QpSettings) -> QpSolution:
    P = prob.P.toarray() if sp.issparse(prob.P) else prob.P
    try:
        x = -np.linalg.solve(P, prob.q)
    except np.linalg.LinAlgError:
        x = -np.linalg.lstsq(P, prob.q, rcond=None)[0]
    rd = float(np.max(np.abs(P @ x + prob.q), initial=0.0))
    status = Status.SOLVED if rd <= s.tol else Status.DUAL_INFEASIBLE
    return QpSolution(x, np.zeros(0), status, 0.0, rd, 0, True, prob.objective(x))


def _infeasibility(prob: QpProblem, sc: _Scaled, dx, dy, eps):
    """Operator-splitting infeasibility certificates from iterate deltas."""
    dyu = sc.E * dy
    ndy = np.max(np.abs(dyu), initial=0.0)
    if ndy > 1e-12:
        hi = np.where(prob.u >= INF, np.where(dyu > eps * ndy, np.inf, 0.0), prob.u * np.maximum(dyu, 0))
        lo = np.where(prob.l <= -INF, np.where(dyu < -eps * ndy, np.inf, 0.0), prob.l * np.minimum(dyu, 0))
        if (np.max(np.abs(prob.A.T @ dyu), initial=0.0) <= eps * ndy
                and np.sum(hi) + np.sum(lo) <= -eps * ndy):
            return Status.PRIMAL_INFEASIBLE
    dxu = sc.D * dx
    ndx = np.max(np.abs(dxu), initial=0.0)
    if ndx > 1e-12:
        Adx = prob.A @ dxu
        ok = np.all(np.where(prob.u >= INF, True, Adx <= eps * ndx)
                    & np.where(prob.l <= -INF, True, Adx >= -eps * ndx))
        if (np.max(np.abs(prob.P @ dxu), initial=0.0) <= eps * ndx
                and prob.q @ dxu <= -eps * ndx and ok):
            return Status.DUAL_INFEASIBLE
    return None


def solve_kkt_equality(H, A_eq, g, b):
    """Solve ``[[H, A'], [A, 0]] [x; lam] = [-g; b]``; raises SingularKkt."""
    H = np.atleast_2d(np.asarray(H, dtype=float))
    g = np.asarray(g, dtype=float).ravel()
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.asarray(A_eq, dtype=float).reshape(-1, n)
    b = np.asarray(b, dtype=float).ravel()
    k = A_eq.shape[0]
    K = np.block([[H, A_eq.T], [A_eq, np.zeros((k, k))]])
    if k and np.linalg.matrix_rank(A_eq) < k:
        raise SingularKkt("equality constraints are rank deficient")
    try:
        sol = np.linalg.solve(K, np.r_[-g, b])
    except np.linalg.LinAlgError as exc:
        raise SingularKkt(str(exc)) from None
    if np.linalg.cond(K) > 1e14:
        raise SingularKkt("KKT matrix is numerically singular")
    return sol[:n], sol[n:]


# -- sparse-triplet text format ------------------------------------------------
#
#   qp-triplet 1
#   n m
#   P <nnz>        followed by nnz lines "i j value" (upper triangle, 0-based)
#   A <nnz>        followed by nnz lines "i j value"
#   q              followed by n values, one per line
#   l              followed by m values ("inf"/"-inf" allowed)
#   u              followed by m values

def dump(prob: QpProblem, path) -> None:
    P = sp.triu(sp.coo_matrix(prob.P))
    A = sp.coo_matrix(prob.A)
    with open(path, "w") as fh:
        fh.write("qp-triplet 1\n")
        fh.write(f"{prob.n} {prob.m}\n")
        for name, M in (("P", P), ("A", A)):
            fh.write(f"{name} {M.nnz}\n")
            for i, j, v in zip(M.row, M.col, M.data):
                fh.write(f"{i} {j} {float(v)!r}\n")
        for name, vec in (("q", prob.q), ("l", prob.l), ("u", prob.u)):
            fh.write(f"{name}\n")
            for v in vec:
                fh.write(("inf" if v >= INF else "-inf" if v <= -INF else repr(float(v))) + "\n")


def load(path) -> QpProblem:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if lines[0] != "qp-triplet 1":
        raise ValueError("not a qp-triplet file")
    n, m = map(int, lines[1].split())
    pos = 2
    mats = {}
    for name, shape in (("P", (n, n)), ("A", (m, n))):
        tag, nnz = lines[pos].split()
        assert tag == name
        rows = [lines[pos + 1 + k].split() for k in range(int(nnz))]
        pos += 1 + int(nnz)
        i = [int(r[0]) for r in rows]
        j = [int(r[1]) for r in rows]
        v = [float(r[2]) for r in rows]
        mats[name] = sp.csc_matrix((v, (i, j)), shape=shape)
    vecs = {}
    for name, size in (("q", n), ("l", m), ("u", m)):
        assert lines[pos] == name
        vecs[name] = np.array([float(t) for t in lines[pos + 1:pos + 1 + size]])
        pos += 1 + size
    P = mats["P"]
    P = P + sp.triu(P, 1).T
    return QpProblem(P, vecs["q"], mats["A"], vecs["l"], vecs["u"])
