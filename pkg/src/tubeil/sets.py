"""Boxes, H-polytopes and tube utilities.

Tube cross-sections are constant axis-aligned boxes expressed in deviation
coordinates (state minus nominal state), so a tube around a nominal point
``c`` is ``c ⊕ box``.
"""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
from scipy.optimize import linprog

from .errors import DimensionMismatch, EmptyResult, NonFinite, Overflow
from .sim import DisturbanceSet, sample_disturbance

MAX_DENSE_DIM = 20


@dataclass
class AxisBox:
    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.atleast_1d(np.asarray(self.lower, dtype=float)).copy()
        self.upper = np.atleast_1d(np.asarray(self.upper, dtype=float)).copy()
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise DimensionMismatch("lower and upper must be vectors of equal length")

    @classmethod
    def symmetric(cls, halfwidth) -> "AxisBox":
        h = np.asarray(halfwidth, dtype=float)
        return cls(-h, h)

    @classmethod
    def zero(cls, dim: int) -> "AxisBox":
        return cls(np.zeros(dim), np.zeros(dim))

    @property
    def dim(self) -> int:
        return self.lower.size

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.lower > self.upper))

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.upper - self.lower)

    def contains(self, x, tol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all((x >= self.lower - tol) & (x <= self.upper + tol), axis=-1)

    def vertices(self) -> np.ndarray:
        return sample_tube_dense(np.zeros(self.dim), self)

    def to_dict(self) -> dict:
        return {"dim": self.dim, "lower": self.lower.tolist(), "upper": self.upper.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AxisBox":
        box = cls(d["lower"], d["upper"])
        if box.dim != int(d["dim"]):
            raise DimensionMismatch("dim field does not match bounds")
        return box

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)

    @classmethod
    def load(cls, path) -> "AxisBox":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class Polytope:
    """{x | Hx <= h}."""
    H: np.ndarray
    h: np.ndarray

    def __post_init__(self):
        self.H = np.atleast_2d(np.asarray(self.H, dtype=float))
        self.h = np.atleast_1d(np.asarray(self.h, dtype=float)).ravel()
        if self.H.shape[0] != self.h.size:
            raise DimensionMismatch("H and h row counts differ")
        if np.any(np.all(self.H == 0, axis=1)):
            raise ValueError("rows of H must be nonzero")

    @classmethod
    def from_box(cls, box: AxisBox) -> "Polytope":
        n = box.dim
        keep_hi = np.isfinite(box.upper)
        keep_lo = np.isfinite(box.lower)
        H = np.vstack([np.eye(n)[keep_hi], -np.eye(n)[keep_lo]])
        h = np.r_[box.upper[keep_hi], -box.lower[keep_lo]]
        return cls(H, h)

    @property
    def dim(self) -> int:
        return self.H.shape[1]

    def contains(self, x, tol: float = 1e-9) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return np.all(x @ self.H.T <= self.h + tol, axis=-1)

    def is_empty(self) -> bool:
        res = linprog(np.zeros(self.dim), A_ub=self.H, b_ub=self.h,
                      bounds=[(None, None)] * self.dim, method="highs")
        return res.status == 2

    def bounding_box(self) -> AxisBox:
        lo, hi = np.empty(self.dim), np.empty(self.dim)
        for i in range(self.dim):
            c = np.zeros(self.dim)
            for sign, out in ((1.0, lo), (-1.0, hi)):
                c[i] = sign
                res = linprog(c, A_ub=self.H, b_ub=self.h, bounds=[(None, None)] * self.dim, method="highs")
                if res.status == 2:
                    raise EmptyResult("polytope is empty")
                out[i] = res.x[i] if res.status == 0 else sign * -np.inf
        return AxisBox(lo, hi)


def _check_dims(a: int, b: int) -> None:
    if a != b:
        raise DimensionMismatch(f"dimension mismatch: {a} vs {b}")


def minkowski_sum_box(a: AxisBox, b: AxisBox) -> AxisBox:
    _check_dims(a.dim, b.dim)
    return AxisBox(a.lower + b.lower, a.upper + b.upper)


def pontryagin_diff_polytope_box(p: Polytope, b: AxisBox) -> Polytope:
    """{x | x + w in p for all w in b}: each row shrinks by the support of b."""
    _check_dims(p.dim, b.dim)
    support = np.abs(p.H) @ b.halfwidth + p.H @ b.center
    out = Polytope(p.H.copy(), p.h - support)
    if out.is_empty():
        raise EmptyResult("tightened set is empty")
    return out


def linear_map_box(K, b: AxisBox) -> AxisBox:
    """Tightest box containing {K w | w in b}."""
    K = np.atleast_2d(np.asarray(K, dtype=float))
    _check_dims(K.shape[1], b.dim)
    c = K @ b.center
    r = np.abs(K) @ b.halfwidth
    return AxisBox(c - r, c + r)


def box_from_deviations(dev, safety: float = 1.1) -> AxisBox:
    """Symmetric box from the componentwise max |deviation|, inflated."""
    dev = np.asarray(dev, dtype=float)
    if not np.all(np.isfinite(dev)):
        raise NonFinite("non-finite deviation in tube estimate")
    h = safety * np.max(np.abs(dev.reshape(-1, dev.shape[-1])), axis=0)
    return AxisBox.symmetric(h)


def draw_disturbances(dist, n: int, rng: np.random.Generator, vertex_fraction: float) -> np.ndarray:
    n_vert = int(round(vertex_fraction * n))
    is_vertex = np.arange(n) < n_vert
    if isinstance(dist, DisturbanceSet):
        w = sample_disturbance(dist, rng, n)
        norms = np.linalg.norm(w, axis=-1, keepdims=True)
        scale = np.where(norms > 0, dist.f_max / np.where(norms > 0, norms, 1.0), 0.0)
        return np.where(is_vertex[:, None], w * scale, w)
    u = rng.uniform(size=(n, dist.dim))
    corners = rng.integers(0, 2, size=(n, dist.dim)).astype(float)
    frac = np.where(is_vertex[:, None], corners, u)
    return dist.lower + frac * (dist.upper - dist.lower)


def estimate_tube_mc(closed_loop: Callable, disturbance: Union[AxisBox, DisturbanceSet], n_rollouts: int,
                     horizon: int, rng: np.random.Generator = None, dim: int = None, safety: float = 1.1,
                     vertex_fraction: float = 0.5, x0=None) -> AxisBox:
    """Monte-Carlo outer box of the closed-loop deviation.

    ``closed_loop(e, w)`` maps a batch of deviations ``(R, n)`` and constant
    disturbances ``(R, d)`` to the next deviations.  It may instead return
    ``(e_next, visited)`` where ``visited`` holds intermediate deviations
    ``(..., R, n)`` that also count towards the box.  Half of the rollouts
    use extreme (vertex) disturbances, the rest uniform draws.
    """
    if n_rollouts < 1:
        raise ValueError("n_rollouts must be >= 1")
    rng = rng if rng is not None else np.random.default_rng(0)
    w = draw_disturbances(disturbance, n_rollouts, rng, vertex_fraction)
    if x0 is None:
        n = dim if dim is not None else w.shape[1]
        e = np.zeros((n_rollouts, n))
    else:
        e = np.broadcast_to(np.asarray(x0, dtype=float), (n_rollouts, np.size(x0))).copy()
    worst = np.abs(e).max(axis=0)
    for _ in range(horizon):
        out = closed_loop(e, w)
        if isinstance(out, tuple):
            e, visited = out
            visited = np.abs(np.asarray(visited, dtype=float)).reshape(-1, e.shape[-1])
        else:
            e, visited = out, np.zeros((1, e.shape[-1]))
        e = np.asarray(e, dtype=float)
        if not (np.all(np.isfinite(e)) and np.all(np.isfinite(visited))):
            raise NonFinite("rollout diverged during tube estimation")
        worst = np.maximum(worst, np.maximum(np.abs(e).max(axis=0), visited.max(axis=0)))
    return AxisBox.symmetric(safety * worst)


def sample_tube_sparse(center, tube: AxisBox) -> np.ndarray:
    """Facet centres of ``center ⊕ tube``: 2n samples."""
    c = np.asarray(center, dtype=float) + tube.center
    _check_dims(c.size, tube.dim)
    offs = np.concatenate([np.diag(tube.halfwidth), -np.diag(tube.halfwidth)])
    return c + offs


def sample_tube_dense(center, tube: AxisBox) -> np.ndarray:
    """All 2^n vertices of ``center ⊕ tube``."""
    c = np.asarray(center, dtype=float)
    _check_dims(c.size, tube.dim)
    if tube.dim > MAX_DENSE_DIM:
        raise Overflow(f"2^{tube.dim} vertices requested")
    bits = np.array(list(itertools.product((0.0, 1.0), repeat=tube.dim)))
    return c + tube.lower + bits * (tube.upper - tube.lower)


def sample_tube_uniform(center, tube: AxisBox, n_samples: int, rng: np.random.Generator) -> np.ndarray:
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    c = np.asarray(center, dtype=float)
    _check_dims(c.size, tube.dim)
    return c + rng.uniform(tube.lower, tube.upper, size=(n_samples, tube.dim))
