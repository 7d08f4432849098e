"""Reference trajectories, domains and initial-state randomization."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InfeasibleTask
from .sim import DisturbanceSet, MultirotorParams

KINDS = ("figure-eight", "circle", "step", "hover", "flip", "goto")


@dataclass
class TaskSpec:
    kind: str
    duration: float
    params: dict = field(default_factory=dict)
    init_position_radius: float = 0.1
    init_velocity_radius: float = 0.1

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")


@dataclass
class Reference:
    """Position/velocity samples ``(T+1, 6)`` at spacing ``dt``."""
    samples: np.ndarray
    dt: float

    @property
    def steps(self) -> int:
        return len(self.samples) - 1

    def window(self, k: int, length: int) -> np.ndarray:
        """``length`` samples starting at step ``k``; past the end the last
        sample is held."""
        idx = np.minimum(np.arange(k, k + length), self.steps)
        return self.samples[idx]


def phase_ramp(t, ramp: float):
    """Time warp ``s(t)`` whose rate rises smoothly from 0 to 1 over ``ramp``
    seconds, so a periodic path can start from rest.  Returns ``(s, ds/dt)``."""
    t = np.asarray(t, dtype=float)
    if ramp <= 0:
        return t, np.ones_like(t)
    inside = t < ramp
    s = np.where(inside, 0.5 * t - ramp / (2 * np.pi) * np.sin(np.pi * t / ramp), t - 0.5 * ramp)
    ds = np.where(inside, 0.5 * (1 - np.cos(np.pi * t / ramp)), 1.0)
    return s, ds


def _analytic(task: TaskSpec, t: np.ndarray) -> np.ndarray:
    p = task.params
    z = np.zeros_like(t)
    if task.kind == "figure-eight":
        w = 2 * np.pi / p.get("period", 7.5)
        a, b = p.get("amplitude", (3.9, 1.0))
        s, ds = phase_ramp(t, p.get("ramp", 0.0))
        pos = np.stack([a * np.sin(w * s), b * np.sin(2 * w * s), z], -1)
        vel = np.stack([a * w * np.cos(w * s) * ds, 2 * b * w * np.cos(2 * w * s) * ds, z], -1)
    elif task.kind == "circle":
        r, s = p.get("radius", 1.5), p.get("speed", 2.0)
        w = s / r
        pos = np.stack([r * np.sin(w * t), r * (1 - np.cos(w * t)), z], -1)
        vel = np.stack([s * np.cos(w * t), s * np.sin(w * t), z], -1)
    elif task.kind in ("step", "goto"):
        target = np.asarray(p.get("target", (p.get("size", 1.0), 0.0, 0.0)), dtype=float)
        pos = np.broadcast_to(target, t.shape + (3,)).copy()
        vel = np.zeros(t.shape + (3,))
    else:  # hover; flips use a planned reference instead
        pos = np.zeros(t.shape + (3,))
        vel = np.zeros(t.shape + (3,))
    return np.concatenate([pos, vel], axis=-1)


def gen_reference(task: TaskSpec, dt: float, position_limit: float = np.inf,
                  velocity_limit: float = np.inf) -> Reference:
    n = int(round(task.duration / dt))
    if abs(n * dt - task.duration) > 1e-9:
        raise ValueError("episode length must be a multiple of the sampling period")
    t = np.arange(n + 1) * dt
    ref = _analytic(task, t)
    if np.any(np.abs(ref[:, :3]) > position_limit) or np.any(np.abs(ref[:, 3:]) > velocity_limit):
        raise InfeasibleTask("reference leaves the state constraint set")
    return Reference(ref, dt)


@dataclass
class DomainSpec:
    name: str
    disturbance: DisturbanceSet
    drag_scale: float = 1.0

    def vehicle(self, params: MultirotorParams) -> MultirotorParams:
        return params if self.drag_scale == 1.0 else params.scaled(self.drag_scale)


def make_domain(name: str, cfg: dict, params: MultirotorParams) -> DomainSpec:
    doms = cfg["domains"]
    if name == "T2":
        return DomainSpec("T2", DisturbanceSet(), cfg["tasks"]["t2_drag_scale"])
    if name not in doms:
        raise ValueError(f"unknown domain {name!r}")
    lo, hi = doms[name]
    return DomainSpec(name, DisturbanceSet.from_mg(lo, hi, params))


def _ball(rng, radius, size):
    d = rng.normal(size=(size, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return d * (radius * rng.uniform(size=(size, 1)) ** (1 / 3))


def random_initial_states(rng: np.random.Generator, n: int, task: TaskSpec, offset=None) -> np.ndarray:
    """Hover states with position/velocity drawn uniformly from small balls."""
    x = np.zeros((n, 13))
    x[:, 6] = 1.0
    x[:, 0:3] = _ball(rng, task.init_position_radius, n)
    x[:, 3:6] = _ball(rng, task.init_velocity_radius, n)
    if offset is not None:
        x[:, 0:3] += offset
    return x


def linear_task(cfg: dict, kind: str = "figure-eight") -> TaskSpec:
    t = cfg["tasks"]
    params = {"period": t["eight_period"], "amplitude": tuple(t["eight_amplitude"]), "ramp": t["eight_ramp"]}
    return TaskSpec(kind, t["episode_linear"], params, t["init_position_radius"], t["init_velocity_radius"])
