"""Nonlinear multirotor simulator.

Rigid-body translational/rotational dynamics with linear+quadratic drag,
"+"-configuration thrust allocation with per-propeller saturation, a
geometric SO(3) attitude loop and a constant external force per episode.

States are arrays of shape ``(..., 13)`` laid out as
``[px py pz vx vy vz qw qx qy qz wx wy wz]``; every function broadcasts over
the leading axes, which is what makes batched evaluation rollouts cheap.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import quat
from .errors import DimensionMismatch, NonFinite, SingularAllocation

POS, VEL, QUAT, RATE = slice(0, 3), slice(3, 6), slice(6, 10), slice(10, 13)
STATE_DIM = 13
TRACE_HEADER = ["t", "px", "py", "pz", "vx", "vy", "vz", "qw", "qx", "qy", "qz",
                "wx", "wy", "wz", "u0", "u1", "u2", "u3", "fx", "fy", "fz"]


@dataclass
class MultirotorParams:
    mass: float = 1.0
    inertia: tuple = (0.01, 0.01, 0.02)
    gravity: float = 9.81
    drag_linear: float = 0.1
    drag_quadratic: float = 0.01
    drag_rotational: float = 0.01
    arm_length: float = 0.17
    yaw_moment_coeff: float = 0.016
    prop_thrust_min: float = 0.0
    # per-propeller upper limit as a fraction of m*g (4 * 0.75 = 3 mg total)
    prop_thrust_max_mg: float = 0.75
    att_kr: tuple = (2.67, 2.67, 1.0)
    att_kw: tuple = (0.467, 0.467, 0.3)

    def __post_init__(self):
        self.inertia = tuple(float(v) for v in self.inertia)
        self.att_kr = tuple(float(v) for v in self.att_kr)
        self.att_kw = tuple(float(v) for v in self.att_kw)
        if self.mass <= 0 or min(self.inertia) <= 0:
            raise ValueError("mass and inertia must be positive")
        if min(self.drag_linear, self.drag_quadratic, self.drag_rotational) < 0:
            raise ValueError("drag coefficients must be non-negative")
        if min(self.att_kr + self.att_kw) <= 0:
            raise ValueError("attitude gains must be positive")

    @property
    def J(self) -> np.ndarray:
        return np.asarray(self.inertia)

    @property
    def weight(self) -> float:
        return self.mass * self.gravity

    @property
    def prop_thrust_max(self) -> float:
        return self.prop_thrust_max_mg * self.weight

    @property
    def allocation(self) -> np.ndarray:
        """4x4 map from propeller thrusts to (thrust, tau_x, tau_y, tau_z).

        Propellers sit at +x, +y, -x, -y; 1 and 3 spin opposite to 2 and 4.
        """
        l, c = self.arm_length, self.yaw_moment_coeff
        return np.array([
            [1.0, 1.0, 1.0, 1.0],
            [0.0, l, 0.0, -l],
            [-l, 0.0, l, 0.0],
            [c, -c, c, -c],
        ])

    @property
    def allocation_inverse(self) -> np.ndarray:
        key = (self.arm_length, self.yaw_moment_coeff)
        cache = self.__dict__.get("_alloc_inv")
        if cache is None or cache[0] != key:
            A = self.allocation
            if abs(np.linalg.det(A)) < 1e-12:
                raise SingularAllocation("allocation matrix is not invertible")
            cache = (key, np.linalg.inv(A))
            self.__dict__["_alloc_inv"] = cache
        return cache[1]

    def scaled(self, drag_scale: float) -> "MultirotorParams":
        """Copy with translational and rotational drag scaled (model-error domain)."""
        d = {k: v for k, v in self.__dict__.items() if not k.startswith("_")}
        d["drag_linear"] *= drag_scale
        d["drag_quadratic"] *= drag_scale
        d["drag_rotational"] *= drag_scale
        return MultirotorParams(**d)


@dataclass
class DisturbanceSet:
    """Bounds on the magnitude of a constant external force [N]."""
    f_min: float = 0.0
    f_max: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.f_min <= self.f_max:
            raise ValueError(f"need 0 <= f_min <= f_max, got {self.f_min}, {self.f_max}")

    @classmethod
    def from_mg(cls, lo: float, hi: float, params: MultirotorParams) -> "DisturbanceSet":
        return cls(lo * params.weight, hi * params.weight)

    @property
    def is_empty(self) -> bool:
        return self.f_max == 0.0


@dataclass
class Command:
    """Setpoints handed to the inner loop.

    ``tilt`` (roll, pitch) drives the attitude-tracking mode with yaw held at
    zero; ``rate`` drives the rate-only mode.  ``rate_dot`` is the angular
    acceleration feed-forward.
    """
    thrust: np.ndarray
    tilt: Optional[np.ndarray] = None
    rate: Optional[np.ndarray] = None
    rate_dot: Optional[np.ndarray] = None

    def vector(self) -> np.ndarray:
        second = self.tilt if self.tilt is not None else self.rate
        thrust = np.asarray(self.thrust, dtype=float)
        second = np.asarray(second, dtype=float)
        if second.shape[-1] == 2:
            second = np.concatenate([second, np.zeros(second.shape[:-1] + (1,))], axis=-1)
        return np.concatenate([thrust[..., None], second], axis=-1)


def hover_state(batch: Optional[int] = None) -> np.ndarray:
    x = np.zeros(STATE_DIM)
    x[6] = 1.0
    return x if batch is None else np.tile(x, (batch, 1))


def _cross(a, b):
    return np.stack([
        a[..., 1] * b[..., 2] - a[..., 2] * b[..., 1],
        a[..., 2] * b[..., 0] - a[..., 0] * b[..., 2],
        a[..., 0] * b[..., 1] - a[..., 1] * b[..., 0],
    ], axis=-1)


def derivative(state, thrust, torque, f_ext, params: MultirotorParams) -> np.ndarray:
    """Time derivative of the full rigid-body state."""
    state = np.asarray(state, dtype=float)
    v = state[..., VEL]
    qw, qx, qy, qz = state[..., 6], state[..., 7], state[..., 8], state[..., 9]
    wx, wy, wz = state[..., 10], state[..., 11], state[..., 12]
    J = params.J
    out = np.empty(state.shape)
    out[..., POS] = v
    speed = np.sqrt(np.sum(v * v, axis=-1, keepdims=True))
    thrust = np.asarray(thrust, dtype=float)
    inv_m = 1.0 / params.mass
    drag = -(params.drag_linear + params.drag_quadratic * speed) * v
    a = (drag + f_ext) * inv_m
    t_m = thrust * inv_m
    out[..., 3] = a[..., 0] + t_m * 2 * (qx * qz + qw * qy)
    out[..., 4] = a[..., 1] + t_m * 2 * (qy * qz - qw * qx)
    out[..., 5] = a[..., 2] + t_m * (1 - 2 * (qx * qx + qy * qy)) - params.gravity
    # q_dot = 0.5 * q ⊗ (0, w)
    out[..., 6] = -0.5 * (qx * wx + qy * wy + qz * wz)
    out[..., 7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[..., 8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[..., 9] = 0.5 * (qw * wz + qx * wy - qy * wx)
    w = state[..., RATE]
    tau = np.asarray(torque, dtype=float) - params.drag_rotational * w
    out[..., RATE] = (tau - _cross(w, J * w)) / J
    return out


def rk4(state, thrust, torque, f_ext, params: MultirotorParams, dt: float) -> np.ndarray:
    """One classic RK4 step under a constant wrench, quaternion renormalized."""
    k1 = derivative(state, thrust, torque, f_ext, params)
    k2 = derivative(state + 0.5 * dt * k1, thrust, torque, f_ext, params)
    k3 = derivative(state + 0.5 * dt * k2, thrust, torque, f_ext, params)
    k4 = derivative(state + dt * k3, thrust, torque, f_ext, params)
    out = state + dt / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    out[..., QUAT] = quat.normalize(out[..., QUAT])
    return out


def _vee(M):
    return np.stack([M[..., 2, 1], M[..., 0, 2], M[..., 1, 0]], axis=-1)


def attitude_control(state, params: MultirotorParams, R_des=None, w_des=None, wdot_des=None) -> np.ndarray:
    """Geometric tracking controller on SO(3) (Lee, Leok & McClamroch).

    With ``R_des=None`` the attitude error is zero (rate-only mode) and the
    torque reduces to rate feedback plus feed-forward.
    """
    state = np.asarray(state, dtype=float)
    J = params.J
    kr, kw = np.asarray(params.att_kr), np.asarray(params.att_kw)
    w = state[..., RATE]
    R = quat.to_rotation(state[..., QUAT])
    w_des = np.zeros_like(w) if w_des is None else np.broadcast_to(w_des, w.shape)
    wdot_des = np.zeros_like(w) if wdot_des is None else np.broadcast_to(wdot_des, w.shape)
    if R_des is None:
        e_R = np.zeros_like(w)
        RtRd = np.broadcast_to(np.eye(3), R.shape)
    else:
        RtRd = np.swapaxes(R, -1, -2) @ R_des
        e_R = 0.5 * _vee(np.swapaxes(RtRd, -1, -2) - RtRd)
    w_ref = np.einsum("...ij,...j->...i", RtRd, w_des)
    wdot_ref = np.einsum("...ij,...j->...i", RtRd, wdot_des)
    e_w = w - w_ref
    return (-kr * e_R - kw * e_w + _cross(w, J * w)
            - J * (_cross(w, w_ref) - wdot_ref))


def tilt_to_rotation(roll, pitch, yaw=0.0) -> np.ndarray:
    return quat.to_rotation(quat.from_euler_zyx(roll, pitch, np.broadcast_to(yaw, np.shape(roll))))


def allocate(thrust, torque, params: MultirotorParams) -> np.ndarray:
    """Propeller thrusts realizing (thrust, torque); no saturation applied."""
    A_inv = params.allocation_inverse
    w = np.concatenate([np.asarray(thrust, dtype=float)[..., None], np.asarray(torque, dtype=float)], axis=-1)
    return w @ A_inv.T


def wrench(f_prop, params: MultirotorParams):
    """Forward allocation: returns (thrust, torque)."""
    w = np.asarray(f_prop, dtype=float) @ params.allocation.T
    return w[..., 0], w[..., 1:]


def saturate(f_prop, params: MultirotorParams) -> np.ndarray:
    return np.clip(f_prop, params.prop_thrust_min, params.prop_thrust_max)


def sample_disturbance(dset: DisturbanceSet, rng: np.random.Generator, size=None) -> np.ndarray:
    """Constant force drawn in spherical coordinates: magnitude ~ U(f_min, f_max),
    polar angle ~ U(0, pi), azimuth ~ U(0, 2 pi)."""
    shape = () if size is None else (size,) if np.isscalar(size) else tuple(size)
    mag = rng.uniform(dset.f_min, dset.f_max, size=shape)
    theta = rng.uniform(0.0, np.pi, size=shape)
    phi = rng.uniform(0.0, 2 * np.pi, size=shape)
    return np.stack([
        mag * np.cos(phi) * np.sin(theta),
        mag * np.sin(phi) * np.sin(theta),
        mag * np.cos(theta),
    ], axis=-1)


def check_state(state) -> None:
    if not np.all(np.isfinite(state)):
        raise NonFinite("state contains NaN/Inf")


@dataclass
class Simulator:
    """Batched episode stepper: physics at ``dt``, inner loop every
    ``attitude_decimation`` physics steps.

    Episodes whose state turns non-finite are frozen and flagged in
    ``diverged`` rather than raising, so one bad rollout does not abort a batch.
    """
    params: MultirotorParams
    state: np.ndarray
    f_ext: np.ndarray
    dt: float = 0.005
    attitude_decimation: int = 2
    t: float = 0.0
    trace: Optional[list] = None
    diverged: np.ndarray = field(default=None)

    def __post_init__(self):
        self.state = np.array(self.state, dtype=float)
        if self.state.shape[-1] != STATE_DIM:
            raise DimensionMismatch(f"state must have {STATE_DIM} entries")
        self.batched = self.state.ndim == 2
        if not self.batched:
            self.state = self.state[None]
        self.f_ext = np.broadcast_to(np.asarray(self.f_ext, dtype=float), (len(self.state), 3)).copy()
        check_state(self.state)
        self.diverged = np.zeros(len(self.state), dtype=bool)
        self._substep = 0
        self._torque = np.zeros((len(self.state), 3))
        self._prev_rate = None

    @property
    def batch(self) -> int:
        return len(self.state)

    def current(self) -> np.ndarray:
        return self.state if self.batched else self.state[0]

    def _inner_loop(self, cmd: Command, rate_dot):
        if cmd.tilt is not None:
            tilt = np.broadcast_to(np.asarray(cmd.tilt, dtype=float), (self.batch, 2))
            R_des = tilt_to_rotation(tilt[:, 0], tilt[:, 1])
            return attitude_control(self.state, self.params, R_des=R_des)
        rate = np.broadcast_to(np.asarray(cmd.rate, dtype=float), (self.batch, 3))
        return attitude_control(self.state, self.params, w_des=rate, wdot_des=rate_dot)

    def step(self, cmd: Command) -> np.ndarray:
        """Advance one physics step of length ``dt``."""
        if self._substep % self.attitude_decimation == 0:
            rate_dot = cmd.rate_dot
            self._torque = self._inner_loop(cmd, rate_dot)
        thrust = np.broadcast_to(np.asarray(cmd.thrust, dtype=float), (self.batch,))
        f_prop = saturate(allocate(thrust, self._torque, self.params), self.params)
        t_act, tau_act = wrench(f_prop, self.params)
        new = rk4(self.state, t_act, tau_act, self.f_ext, self.params, self.dt)
        bad = ~np.all(np.isfinite(new), axis=-1) | (np.abs(new).max(axis=-1) > 1e6)
        if np.any(bad):
            self.diverged |= bad
            new[bad] = self.state[bad]
        if not self.batched and self.diverged[0]:
            raise NonFinite("integration produced a non-finite state")
        self.state = new
        self._substep += 1
        self.t += self.dt
        if self.trace is not None:
            u = cmd.vector()
            u = np.broadcast_to(u, (self.batch, 4))
            self.trace.append(np.concatenate([[self.t], self.state[0], u[0], self.f_ext[0]]))
        return self.current()

    def hold(self, cmd: Command, duration: float) -> np.ndarray:
        """Zero-order hold of ``cmd`` for ``duration`` seconds.

        For rate commands without an explicit feed-forward, the angular
        acceleration setpoint is the finite difference to the previous held
        rate command.
        """
        n = int(round(duration / self.dt))
        if cmd.rate is not None and cmd.rate_dot is None:
            rate = np.broadcast_to(np.asarray(cmd.rate, dtype=float), (self.batch, 3))
            if self._prev_rate is None:
                rate_dot = np.zeros_like(rate)
            else:
                rate_dot = (rate - self._prev_rate) / duration
            self._prev_rate = rate.copy()
            cmd = Command(cmd.thrust, rate=rate, rate_dot=rate_dot)
        for _ in range(n):
            self.step(cmd)
        return self.current()

    def write_trace(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(TRACE_HEADER)
            for row in self.trace or []:
                w.writerow([repr(float(v)) for v in row])


def step(state, cmd: Command, f_ext, params: MultirotorParams, dt: float = 0.005,
         update_attitude: bool = True, torque=None):
    """Functional single-step form: returns ``(next_state, torque_used)``.

    ``update_attitude=False`` re-uses the held ``torque`` (the inner loop runs
    at half the physics rate).
    """
    state = np.asarray(state, dtype=float)
    check_state(state)
    sim = Simulator(params, state, f_ext, dt=dt)
    if not update_attitude and torque is not None:
        sim._substep = 1
        sim._torque = np.atleast_2d(torque)
    out = sim.step(cmd)
    return out, sim._torque[0] if state.ndim == 1 else sim._torque


def read_trace(path) -> np.ndarray:
    with open(path) as fh:
        rows = list(csv.reader(fh))
    if rows[0] != TRACE_HEADER:
        raise ValueError("unexpected trace header")
    return np.array([[float(v) for v in r] for r in rows[1:]])
