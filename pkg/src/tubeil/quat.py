"""Unit-quaternion helpers (Hamilton convention, scalar first).

All functions broadcast over leading axes, so a batch of quaternions is an
array of shape ``(..., 4)``.
"""
import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def multiply(p, q):
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    pw, px, py, pz = np.moveaxis(p, -1, 0)
    qw, qx, qy, qz = np.moveaxis(q, -1, 0)
    return np.stack([
        pw * qw - px * qx - py * qy - pz * qz,
        pw * qx + px * qw + py * qz - pz * qy,
        pw * qy - px * qz + py * qw + pz * qx,
        pw * qz + px * qy - py * qx + pz * qw,
    ], axis=-1)


def conjugate(q):
    q = np.asarray(q, dtype=float)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def normalize(q):
    q = np.asarray(q, dtype=float)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    angle = np.asarray(angle, dtype=float)[..., None]
    return np.concatenate([np.cos(angle / 2), np.sin(angle / 2) * axis], axis=-1)


def to_rotation(q):
    """Rotation matrix R(q) mapping body vectors into the world frame."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    R = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return R.reshape(q.shape[:-1] + (3, 3))


def body_z(q):
    """Third column of R(q): thrust direction in the world frame."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([2 * (x * z + w * y), 2 * (y * z - w * x), 1 - 2 * (x * x + y * y)], axis=-1)


def from_euler_zyx(roll, pitch, yaw):
    """Quaternion of R = Rz(yaw) Ry(pitch) Rx(roll)."""
    cr, sr = np.cos(np.asarray(roll) / 2), np.sin(np.asarray(roll) / 2)
    cp, sp = np.cos(np.asarray(pitch) / 2), np.sin(np.asarray(pitch) / 2)
    cy, sy = np.cos(np.asarray(yaw) / 2), np.sin(np.asarray(yaw) / 2)
    return np.stack([
        cr * cp * cy + sr * sp * sy,
        sr * cp * cy - cr * sp * sy,
        cr * sp * cy + sr * cp * sy,
        cr * cp * sy - sr * sp * cy,
    ], axis=-1)


def to_euler_zyx(q):
    """Return (roll, pitch, yaw) for R = Rz(yaw) Ry(pitch) Rx(roll)."""
    q = np.asarray(q, dtype=float)
    w, x, y, z = np.moveaxis(q, -1, 0)
    roll = np.arctan2(2 * (w * x + y * z), 1 - 2 * (x * x + y * y))
    pitch = np.arcsin(np.clip(2 * (w * y - z * x), -1.0, 1.0))
    yaw = np.arctan2(2 * (w * z + x * y), 1 - 2 * (y * y + z * z))
    return roll, pitch, yaw


def from_rotation(R):
    """Quaternion (q_w >= 0) from a single rotation matrix."""
    R = np.asarray(R, dtype=float)
    tr = np.trace(R)
    if tr > 0:
        s = 2.0 * np.sqrt(1.0 + tr)
        q = np.array([0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s])
    else:
        i = int(np.argmax(np.diag(R)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = 2.0 * np.sqrt(1.0 + R[i, i] - R[j, j] - R[k, k])
        q = np.empty(4)
        q[0] = (R[k, j] - R[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (R[j, i] + R[i, j]) / s
        q[1 + k] = (R[k, i] + R[i, k]) / s
    if q[0] < 0:
        q = -q
    return q / np.linalg.norm(q)


def align_sign(q, ref):
    """Flip ``q`` to the hemisphere of ``ref`` (same rotation, continuous sign)."""
    q = np.asarray(q, dtype=float)
    d = np.sum(q * np.asarray(ref, dtype=float), axis=-1, keepdims=True)
    return np.where(d < 0, -q, q)


def to_mrp(q):
    """Modified Rodrigues parameters q_v / (1 + q_w), using the shadow set
    (sign flip) when q_w < 0 so the result stays inside the unit ball."""
    q = align_sign(q, IDENTITY)
    return q[..., 1:] / (1.0 + q[..., :1])


def from_mrp(eps):
    eps = np.asarray(eps, dtype=float)
    n2 = np.sum(eps * eps, axis=-1, keepdims=True)
    return np.concatenate([(1 - n2) / (1 + n2), 2 * eps / (1 + n2)], axis=-1)


def mrp_error(q, q_ref):
    """Attitude error MRP(q ⊙ q_ref⁻¹)."""
    return to_mrp(multiply(q, conjugate(q_ref)))


def apply_mrp_error(eps, q_ref):
    """Inverse of :func:`mrp_error`: the quaternion whose error to ``q_ref`` is
    ``eps``, on the same hemisphere as ``q_ref``."""
    return align_sign(multiply(from_mrp(eps), q_ref), q_ref)
