"""Reduced multirotor model for the ancillary NMPC.

State ``x = [p(3), v(3), q(4)]``, input ``u = [thrust, w_x, w_y, w_z]``: the
body rates are treated as inputs (the inner rate loop is assumed fast), so
the rotational dynamics drop out.  All functions broadcast over a leading
batch axis, which is how every knot of a horizon is linearized at once.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, NewtonDivergence
from ..sim import MultirotorParams

NX, NU = 10, 4
POS, VEL, QUAT = slice(0, 3), slice(3, 6), slice(6, 10)
INTEGRATORS = ("rk4", "gauss_legendre")

# 2-stage Gauss-Legendre tableau (order 4)
_S3 = np.sqrt(3.0)
_GL_A = np.array([[0.25, 0.25 - _S3 / 6], [0.25 + _S3 / 6, 0.25]])
_GL_B = np.array([0.5, 0.5])


def _left(q):
    """Matrix of ``p -> q (x) p``."""
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, -z, y], -1),
        np.stack([y, z, w, -x], -1),
        np.stack([z, -y, x, w], -1),
    ], -2)


def _right(p):
    """Matrix of ``q -> q (x) p``."""
    w, x, y, z = np.moveaxis(p, -1, 0)
    return np.stack([
        np.stack([w, -x, -y, -z], -1),
        np.stack([x, w, z, -y], -1),
        np.stack([y, -z, w, x], -1),
        np.stack([z, y, -x, w], -1),
    ], -2)


def rk4_with_jacobians(f, f_jac, x, u, h, jac: bool = True):
    """Classic RK4 step with forward sensitivities propagated through the stages."""
    k1 = f(x, u)
    x2 = x + 0.5 * h * k1
    k2 = f(x2, u)
    x3 = x + 0.5 * h * k2
    k3 = f(x3, u)
    x4 = x + h * k3
    k4 = f(x4, u)
    xn = x + h / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not jac:
        return xn, None, None
    nx = x.shape[-1]
    I = np.broadcast_to(np.eye(nx), x.shape[:-1] + (nx, nx))
    dk1x, dk1u = f_jac(x, u)
    A2, B2 = f_jac(x2, u)
    dk2x, dk2u = A2 @ (I + 0.5 * h * dk1x), A2 @ (0.5 * h * dk1u) + B2
    A3, B3 = f_jac(x3, u)
    dk3x, dk3u = A3 @ (I + 0.5 * h * dk2x), A3 @ (0.5 * h * dk2u) + B3
    A4, B4 = f_jac(x4, u)
    dk4x, dk4u = A4 @ (I + h * dk3x), A4 @ (h * dk3u) + B4
    Fx = I + h / 6 * (dk1x + 2 * dk2x + 2 * dk3x + dk4x)
    Fu = h / 6 * (dk1u + 2 * dk2u + 2 * dk3u + dk4u)
    return xn, Fx, Fu


@dataclass
class ReducedModel:
    params: MultirotorParams
    dt: float = 0.02
    integrator: str = "rk4"
    newton_tol: float = 1e-12
    newton_max_iter: int = 20
    nx = NX
    nu = NU

    def __post_init__(self):
        if self.integrator not in INTEGRATORS:
            raise ConfigError(f"unknown integrator {self.integrator!r}")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")

    # -- continuous time ---------------------------------------------------------
    def f(self, x, u):
        x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        m, g = self.params.mass, self.params.gravity
        c1, c2 = self.params.drag_linear, self.params.drag_quadratic
        v, q = x[..., VEL], x[..., QUAT]
        w, qx, qy, qz = np.moveaxis(q, -1, 0)
        b3 = np.stack([2 * (qx * qz + w * qy), 2 * (qy * qz - w * qx), 1 - 2 * (qx * qx + qy * qy)], -1)
        speed = np.linalg.norm(v, axis=-1, keepdims=True)
        acc = u[..., :1] / m * b3 - (c1 + c2 * speed) * v / m
        acc[..., 2] -= g
        omega = np.concatenate([np.zeros(u.shape[:-1] + (1,)), u[..., 1:]], -1)
        qdot = 0.5 * np.einsum("...ij,...j->...i", _left(q), omega)
        return np.concatenate([v, acc, qdot], -1)

    def f_jac(self, x, u):
        """Continuous Jacobians ``(df/dx, df/du)``."""
        x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        m = self.params.mass
        c1, c2 = self.params.drag_linear, self.params.drag_quadratic
        shape = x.shape[:-1]
        A = np.zeros(shape + (NX, NX))
        B = np.zeros(shape + (NX, NU))
        v, q = x[..., VEL], x[..., QUAT]
        w, qx, qy, qz = np.moveaxis(q, -1, 0)
        T = u[..., 0]
        A[..., 0:3, 3:6] = np.eye(3)
        speed = np.linalg.norm(v, axis=-1)
        safe = np.where(speed > 0, speed, 1.0)
        vvT = np.einsum("...i,...j->...ij", v, v) / safe[..., None, None]
        A[..., 3:6, 3:6] = -(c1 * np.eye(3) + c2 * (speed[..., None, None] * np.eye(3) + vvT)) / m
        db3 = np.stack([
            np.stack([2 * qy, 2 * qz, 2 * w, 2 * qx], -1),
            np.stack([-2 * qx, -2 * w, 2 * qz, 2 * qy], -1),
            np.stack([0 * w, -4 * qx, -4 * qy, 0 * w], -1),
        ], -2)
        A[..., 3:6, 6:10] = T[..., None, None] / m * db3
        omega = np.concatenate([np.zeros(shape + (1,)), u[..., 1:]], -1)
        A[..., 6:10, 6:10] = 0.5 * _right(omega)
        B[..., 3:6, 0] = np.stack([2 * (qx * qz + w * qy), 2 * (qy * qz - w * qx),
                                   1 - 2 * (qx * qx + qy * qy)], -1) / m
        B[..., 6:10, 1:4] = 0.5 * _left(q)[..., :, 1:]
        return A, B

    # -- discrete time -----------------------------------------------------------
    def step(self, x, u):
        return self.step_jac(x, u, jac=False)[0]

    def step_jac(self, x, u, jac: bool = True):
        """One integration step followed by quaternion renormalization.

        Returns ``(x_next, dx_next/dx, dx_next/du)``; the Jacobians include
        the normalization.
        """
        x, u = np.asarray(x, dtype=float), np.asarray(u, dtype=float)
        if self.integrator == "rk4":
            xn, Fx, Fu = self._rk4(x, u, jac)
        else:
            xn, Fx, Fu = self._gauss_legendre(x, u, jac)
        q = xn[..., QUAT]
        nrm = np.linalg.norm(q, axis=-1, keepdims=True)
        qh = q / nrm
        out = xn.copy()
        out[..., QUAT] = qh
        if not jac:
            return out, None, None
        Nq = (np.eye(4) - np.einsum("...i,...j->...ij", qh, qh)) / nrm[..., None]
        Fx = Fx.copy()
        Fu = Fu.copy()
        Fx[..., QUAT, :] = Nq @ Fx[..., QUAT, :]
        Fu[..., QUAT, :] = Nq @ Fu[..., QUAT, :]
        return out, Fx, Fu

    def _rk4(self, x, u, jac):
        return rk4_with_jacobians(self.f, self.f_jac, x, u, self.dt, jac)

    def _gauss_legendre(self, x, u, jac):
        """Implicit 2-stage Gauss-Legendre step solved by Newton's method;
        sensitivities from the implicit function theorem."""
        h = self.dt
        batch = x.shape[:-1]
        K = np.stack([self.f(x, u)] * 2, -2)           # (..., 2, NX)
        eye = np.eye(2 * NX)
        for it in range(self.newton_max_iter):
            Xs = x[..., None, :] + h * np.einsum("ij,...jk->...ik", _GL_A, K)
            fs = np.stack([self.f(Xs[..., i, :], u) for i in range(2)], -2)
            res = (K - fs).reshape(batch + (2 * NX,))
            err = np.max(np.abs(res)) if res.size else 0.0
            if not np.isfinite(err):
                raise NewtonDivergence("non-finite Newton residual")
            if err <= self.newton_tol:
                break
            J = self._gl_residual_jac(Xs, u, eye)
            K = K - np.linalg.solve(J, res[..., None])[..., 0].reshape(K.shape)
        else:
            raise NewtonDivergence("Gauss-Legendre Newton iteration did not converge")
        xn = x + h * np.einsum("i,...ij->...j", _GL_B, K)
        if not jac:
            return xn, None, None
        Xs = x[..., None, :] + h * np.einsum("ij,...jk->...ik", _GL_A, K)
        J = self._gl_residual_jac(Xs, u, eye)
        Ax, Bu = zip(*[self.f_jac(Xs[..., i, :], u) for i in range(2)])
        # dR/dx = -[A_i], dR/du = -[B_i]
        rhs_x = np.concatenate(Ax, -2)
        rhs_u = np.concatenate(Bu, -2)
        dKx = np.linalg.solve(J, rhs_x).reshape(batch + (2, NX, NX))
        dKu = np.linalg.solve(J, rhs_u).reshape(batch + (2, NX, NU))
        Fx = np.eye(NX) + h * np.einsum("i,...ijk->...jk", _GL_B, dKx)
        Fu = h * np.einsum("i,...ijk->...jk", _GL_B, dKu)
        return xn, Fx, Fu

    def _gl_residual_jac(self, Xs, u, eye):
        h = self.dt
        batch = Xs.shape[:-2]
        J = np.broadcast_to(eye, batch + eye.shape).copy()
        for i in range(2):
            Ai, _ = self.f_jac(Xs[..., i, :], u)
            for j in range(2):
                J[..., i * NX:(i + 1) * NX, j * NX:(j + 1) * NX] -= h * _GL_A[i, j] * Ai
        return J

    # -- helpers -------------------------------------------------------------------
    def hover_input(self) -> np.ndarray:
        return np.array([self.params.weight, 0.0, 0.0, 0.0])


def hover_state(position=(0.0, 0.0, 0.0)) -> np.ndarray:
    x = np.zeros(NX)
    x[POS] = position
    x[6] = 1.0
    return x


def full_to_reduced(state13) -> np.ndarray:
    return np.asarray(state13, dtype=float)[..., :NX]
