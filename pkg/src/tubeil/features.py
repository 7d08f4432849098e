"""Policy input construction."""
from __future__ import annotations

import numpy as np

from . import quat
from .errors import DimensionMismatch

LINEAR_STATE_DIM = 8
FLIP_FEATURE_DIM = 14


def featurize_linear(state, ref_window) -> np.ndarray:
    """``[x (8); flattened position/velocity window (6 per sample)]``.

    Broadcasts over a leading batch axis: ``state (B, 8)``, ``ref (B, W, 6)``.
    """
    x = np.asarray(state, dtype=float)
    r = np.asarray(ref_window, dtype=float)
    if x.shape[-1] != LINEAR_STATE_DIM or r.shape[-1] != 6:
        raise DimensionMismatch("expected an 8-dim state and a window of 6-dim samples")
    r = r.reshape(r.shape[:-2] + (-1,)) if r.ndim >= 2 else r
    if r.shape[:-1] != x.shape[:-1]:
        raise DimensionMismatch("state and reference batch shapes differ")
    return np.concatenate([x, r], axis=-1)


def linear_feature_dim(horizon: int) -> int:
    return LINEAR_STATE_DIM + 6 * horizon


def continuous_quaternion(q, prev_q) -> np.ndarray:
    """Pick the sign of ``q`` closest to ``prev_q``."""
    return quat.align_sign(q, prev_q)


def featurize_flip(state, t, p_des, prev_q=None) -> np.ndarray:
    """``[p, v, q (sign-continuous), t, p_des]`` -> 14 values.

    ``state`` holds at least ``[p, v, q]`` (10 values); extra entries such as
    body rates are ignored.  Returns ``(features, q_used)`` so callers can
    thread ``q_used`` into the next call.
    """
    s = np.asarray(state, dtype=float)
    if s.shape[-1] < 10:
        raise DimensionMismatch("flip features need position, velocity and quaternion")
    prev = quat.IDENTITY if prev_q is None else prev_q
    q = continuous_quaternion(s[..., 6:10], prev)
    t = np.broadcast_to(np.asarray(t, dtype=float), s.shape[:-1])[..., None]
    p_des = np.broadcast_to(np.asarray(p_des, dtype=float), s.shape[:-1] + (3,))
    return np.concatenate([s[..., :6], q, t, p_des], axis=-1), q


def mrp_error(q, q_ref) -> np.ndarray:
    return quat.mrp_error(q, q_ref)
