"""Quaternion helpers.

Quaternions are stored as (..., 4) arrays in (w, x, y, z) order. Rotation
matrices act on column vectors, so ``quat_to_rotmat(q) @ v`` equals
``quat_rotate(q, v)`` for unit q.
"""

from __future__ import annotations

import numpy as np

IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q: np.ndarray) -> np.ndarray:
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    out = np.array(q, copy=True)
    out[..., 1:] *= -1.0
    return out


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product a ⊗ b (broadcasting over leading dims)."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_left_matrix(q: np.ndarray) -> np.ndarray:
    """4x4 matrix L(q) with L(q) @ r == quat_multiply(q, r).

    For unit q the matrix is orthogonal, so L(q).T is its inverse.
    """
    w, x, y, z = (q[..., i] for i in range(4))
    rows = [
        np.stack([w, -x, -y, -z], axis=-1),
        np.stack([x, w, -z, y], axis=-1),
        np.stack([y, z, w, -x], axis=-1),
        np.stack([z, -y, x, w], axis=-1),
    ]
    return np.stack(rows, axis=-2)


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Rotation matrix from a unit quaternion, shape (..., 3, 3)."""
    w, x, y, z = (q[..., i] for i in range(4))
    row0 = np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], axis=-1)
    row1 = np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], axis=-1)
    row2 = np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], axis=-1)
    return np.stack([row0, row1, row2], axis=-2)


def rotmat_to_quat(mat: np.ndarray) -> np.ndarray:
    """Unit quaternion from a rotation matrix, shape (..., 4).

    Uses the branch-per-largest-diagonal method so it is stable for any
    proper rotation. The sign is fixed so w >= 0.
    """
    m = np.asarray(mat)
    batch = m.shape[:-2]
    m = m.reshape(-1, 3, 3)
    n = m.shape[0]
    q = np.empty((n, 4), dtype=m.dtype)

    m00, m01, m02 = m[:, 0, 0], m[:, 0, 1], m[:, 0, 2]
    m10, m11, m12 = m[:, 1, 0], m[:, 1, 1], m[:, 1, 2]
    m20, m21, m22 = m[:, 2, 0], m[:, 2, 1], m[:, 2, 2]
    trace = m00 + m11 + m22

    # One candidate per branch; pick the numerically safest.
    choice = np.argmax(np.stack([trace, m00, m11, m22], axis=1), axis=1)
    choice = np.where(trace > 0.0, 0, choice)

    c = choice == 0
    if np.any(c):
        s = np.sqrt(trace[c] + 1.0) * 2.0
        q[c, 0] = 0.25 * s
        q[c, 1] = (m21[c] - m12[c]) / s
        q[c, 2] = (m02[c] - m20[c]) / s
        q[c, 3] = (m10[c] - m01[c]) / s
    c = choice == 1
    if np.any(c):
        s = np.sqrt(1.0 + m00[c] - m11[c] - m22[c]) * 2.0
        q[c, 0] = (m21[c] - m12[c]) / s
        q[c, 1] = 0.25 * s
        q[c, 2] = (m01[c] + m10[c]) / s
        q[c, 3] = (m02[c] + m20[c]) / s
    c = choice == 2
    if np.any(c):
        s = np.sqrt(1.0 + m11[c] - m00[c] - m22[c]) * 2.0
        q[c, 0] = (m02[c] - m20[c]) / s
        q[c, 1] = (m01[c] + m10[c]) / s
        q[c, 2] = 0.25 * s
        q[c, 3] = (m12[c] + m21[c]) / s
    c = choice == 3
    if np.any(c):
        s = np.sqrt(1.0 + m22[c] - m00[c] - m11[c]) * 2.0
        q[c, 0] = (m10[c] - m01[c]) / s
        q[c, 1] = (m02[c] + m20[c]) / s
        q[c, 2] = (m12[c] + m21[c]) / s
        q[c, 3] = 0.25 * s

    q[q[:, 0] < 0] *= -1.0
    q = quat_normalize(q)
    return q.reshape(*batch, 4)


def quat_rotate(q: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Rotate vectors v by unit quaternions q (broadcasting)."""
    qv = q[..., 1:]
    uv = np.cross(qv, v)
    uuv = np.cross(qv, uv)
    return v + 2.0 * (q[..., :1] * uv + uuv)


def random_quat(rng: np.random.Generator, n: int | None = None) -> np.ndarray:
    """Uniformly distributed unit quaternions."""
    shape = (4,) if n is None else (n, 4)
    q = rng.standard_normal(shape)
    return quat_normalize(q)
