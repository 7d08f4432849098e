"""Independent reference implementations used only by the tests."""
import itertools
from dataclasses import dataclass

import numpy as np

from tubeil import qp


def random_qp(rng, n=None, m=None, n_eq=None, two_sided=None):
    """Strictly convex QP with a known feasible point; rows are equalities,
    one-sided or two-sided inequalities."""
    n = n or int(rng.integers(2, 9))
    m = m or int(rng.integers(1, 13))
    M = rng.normal(size=(n, n))
    P = M @ M.T + 0.1 * np.eye(n)
    q = rng.normal(size=n) * 3
    A = rng.normal(size=(m, n))
    x_f = rng.normal(size=n)
    Ax = A @ x_f
    l = np.full(m, -np.inf)
    u = np.full(m, np.inf)
    n_eq = min(n_eq if n_eq is not None else int(rng.integers(0, 3)), m, n - 1)
    n_two = min(two_sided if two_sided is not None else int(rng.integers(0, 3)), m - n_eq)
    kinds = ["eq"] * n_eq + ["two"] * n_two + [rng.choice(["lo", "hi"]) for _ in range(m - n_eq - n_two)]
    for i, k in enumerate(kinds):
        if k == "eq":
            l[i] = u[i] = Ax[i]
        elif k == "two":
            l[i] = Ax[i] - rng.uniform(0, 1)
            u[i] = Ax[i] + rng.uniform(0, 1)
        elif k == "lo":
            l[i] = Ax[i] - rng.uniform(0, 1)
        else:
            u[i] = Ax[i] + rng.uniform(0, 1)
    return qp.QpProblem(P, q, A, l, u)


def active_set_oracle(prob: qp.QpProblem, tol=1e-9):
    """Enumerate active sets, solve each equality-constrained KKT system and
    keep the primal-dual feasible one with the lowest objective."""
    P, q, A, l, u = prob.P, prob.q, np.asarray(prob.A), prob.l, prob.u
    n, m = prob.n, prob.m
    choices = []
    for i in range(m):
        if l[i] == u[i]:
            choices.append(("eq",))
        else:
            opts = [None]
            if l[i] > -qp.INF:
                opts.append("lo")
            if u[i] < qp.INF:
                opts.append("hi")
            choices.append(tuple(opts))
    best = None
    for combo in itertools.product(*choices):
        rows = [i for i, c in enumerate(combo) if c is not None]
        if len(rows) > n:
            continue
        Aa = A[rows]
        b = np.array([l[i] if combo[i] in ("eq", "lo") else u[i] for i in rows])
        K = np.block([[P, Aa.T], [Aa, np.zeros((len(rows), len(rows)))]])
        try:
            sol = np.linalg.solve(K, np.r_[-q, b])
        except np.linalg.LinAlgError:
            continue
        x, ya = sol[:n], sol[n:]
        Ax = A @ x
        if np.any(Ax < l - 1e-7) or np.any(Ax > u + 1e-7):
            continue
        ok = all((combo[i] != "lo" or ya[j] <= tol) and (combo[i] != "hi" or ya[j] >= -tol)
                 for j, i in enumerate(rows))
        if not ok:
            continue
        y = np.zeros(m)
        y[rows] = ya
        f = 0.5 * x @ P @ x + q @ x
        if best is None or f < best[2] - 1e-12:
            best = (x, y, f)
    return best


def value_iteration_lqr(A, B, Q, R, iters=100_000, tol=1e-14):
    """Plain Riccati recursion from P = Q until the update stalls."""
    P = Q.copy()
    for _ in range(iters):
        G = np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        Pn = Q + A.T @ P @ A - A.T @ P @ B @ G
        if np.max(np.abs(Pn - P)) < tol:
            P = Pn
            break
        P = Pn
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return K, P


def central_jacobian(f, x, h=1e-6):
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    J = np.zeros(f0.shape + x.shape)
    for i in range(x.size):
        e = np.zeros_like(x)
        e.flat[i] = h
        J[..., i] = (np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h)
    return J


@dataclass
class LinearToy:
    """Discrete linear model with the interface the OCP expects."""
    A: np.ndarray
    B: np.ndarray

    @property
    def nx(self):
        return self.A.shape[0]

    @property
    def nu(self):
        return self.B.shape[1]

    def step_jac(self, x, u, jac=True):
        xn = x @ self.A.T + u @ self.B.T
        shape = np.shape(x)[:-1]
        return xn, np.broadcast_to(self.A, shape + self.A.shape), np.broadcast_to(self.B, shape + self.B.shape)

    def step(self, x, u):
        return self.step_jac(x, u)[0]
