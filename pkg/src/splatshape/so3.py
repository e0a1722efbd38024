"""Batched quaternion / axis-angle kernels with hand-written VJPs.

Quaternions are stored (w, x, y, z). All functions broadcast over leading
dimensions; gradients are exact reverse-mode VJPs verified against finite
differences in the test suite. Conventions used by every other module:
rotations are renormalized on use, so callers may hand in raw (optimizer
owned) 4-vectors.
"""

from __future__ import annotations

import numpy as np

IDENTITY_QUAT = np.array([1.0, 0.0, 0.0, 0.0])


def quat_normalize(q):
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    return q / n


def quat_normalize_vjp(q, g):
    """VJP of q / |q| with respect to q."""
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    qh = q / n
    return (g - qh * np.sum(qh * g, axis=-1, keepdims=True)) / n


def quat_conjugate(q):
    out = q.copy()
    out[..., 1:] = -out[..., 1:]
    return out


def quat_mul(a, b):
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


def quat_mul_vjp(a, b, g):
    """VJPs of quat_mul for both factors."""
    aw, ax, ay, az = (a[..., i] for i in range(4))
    bw, bx, by, bz = (b[..., i] for i in range(4))
    gw, gx, gy, gz = (g[..., i] for i in range(4))
    ga = np.stack(
        [
            gw * bw + gx * bx + gy * by + gz * bz,
            -gw * bx + gx * bw - gy * bz + gz * by,
            -gw * by + gx * bz + gy * bw - gz * bx,
            -gw * bz - gx * by + gy * bx + gz * bw,
        ],
        axis=-1,
    )
    gb = np.stack(
        [
            gw * aw + gx * ax + gy * ay + gz * az,
            -gw * ax + gx * aw + gy * az - gz * ay,
            -gw * ay - gx * az + gy * aw + gz * ax,
            -gw * az + gx * ay - gy * ax + gz * aw,
        ],
        axis=-1,
    )
    return ga, gb


def _unit_quat_to_mat(q):
    w, x, y, z = (q[..., i] for i in range(4))
    R = np.empty(q.shape[:-1] + (3, 3))
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def _unit_quat_to_mat_vjp(q, gR):
    w, x, y, z = (q[..., i] for i in range(4))
    g00 = gR[..., 0, 0]
    g01 = gR[..., 0, 1]
    g02 = gR[..., 0, 2]
    g10 = gR[..., 1, 0]
    g11 = gR[..., 1, 1]
    g12 = gR[..., 1, 2]
    g20 = gR[..., 2, 0]
    g21 = gR[..., 2, 1]
    g22 = gR[..., 2, 2]
    gw = 2 * (-z * g01 + y * g02 + z * g10 - x * g12 - y * g20 + x * g21)
    gx = 2 * (y * g01 + z * g02 + y * g10 - 2 * x * g11 - w * g12 + z * g20 + w * g21 - 2 * x * g22)
    gy = 2 * (-2 * y * g00 + x * g01 + w * g02 + x * g10 + z * g12 - w * g20 + z * g21 - 2 * y * g22)
    gz = 2 * (-2 * z * g00 - w * g01 + x * g02 + w * g10 - 2 * z * g11 + y * g12 + x * g20 + y * g21)
    return np.stack([gw, gx, gy, gz], axis=-1)


def quat_to_mat(q):
    """Rotation matrix of a (not necessarily unit) quaternion; normalizes internally."""
    return _unit_quat_to_mat(quat_normalize(q))


def quat_to_mat_vjp(q, gR):
    qh = quat_normalize(q)
    return quat_normalize_vjp(q, _unit_quat_to_mat_vjp(qh, gR))


def quat_rotate(q, v):
    """Rotate 3-vectors v by quaternions q (batched, broadcasting)."""
    R = quat_to_mat(q)
    return np.einsum("...ij,...j->...i", R, v)


def quat_rotate_vjp(q, v, g):
    R = quat_to_mat(q)
    gv = np.einsum("...ji,...j->...i", R, g)
    gR = np.einsum("...i,...j->...ij", g, v)
    return quat_to_mat_vjp(q, gR), gv


# sin(theta/2)/theta and its derivative, stable through theta -> 0
_AA_EPS = 1e-4


def _half_sinc(theta):
    small = theta < _AA_EPS
    t2 = theta * theta
    series = 0.5 - t2 / 48.0
    safe = np.where(small, 1.0, theta)
    exact = np.sin(theta / 2.0) / safe
    return np.where(small, series, exact)


def _half_sinc_prime(theta):
    small = theta < _AA_EPS
    t = np.where(small, 1.0, theta)
    exact = (0.5 * np.cos(t / 2.0) * t - np.sin(t / 2.0)) / (t * t)
    series = -theta / 24.0
    return np.where(small, series, exact)


def axis_angle_to_quat(w):
    """Exponential map: rotation vector (radians) -> unit quaternion."""
    theta = np.linalg.norm(w, axis=-1)
    s = _half_sinc(theta)
    out = np.empty(w.shape[:-1] + (4,))
    out[..., 0] = np.cos(theta / 2.0)
    out[..., 1:] = s[..., None] * w
    return out


def axis_angle_to_quat_vjp(w, g):
    theta = np.linalg.norm(w, axis=-1)
    s = _half_sinc(theta)
    sp = _half_sinc_prime(theta)
    gw_vec = g[..., 1:]
    gtheta = -0.5 * np.sin(theta / 2.0) * g[..., 0]
    gtheta = gtheta + sp * np.sum(gw_vec * w, axis=-1)
    # d theta / d w = w / theta (zero in the limit)
    safe = np.where(theta < 1e-12, 1.0, theta)
    dir_w = w / safe[..., None]
    return s[..., None] * gw_vec + gtheta[..., None] * dir_w


def mat_to_quat(R):
    """Rotation matrix -> quaternion (w >= 0 convention). Batched."""
    R = np.asarray(R)
    batch = R.shape[:-2]
    Rf = R.reshape((-1, 3, 3))
    out = np.empty((Rf.shape[0], 4))
    for i, m in enumerate(Rf):
        tr = m[0, 0] + m[1, 1] + m[2, 2]
        if tr > 0:
            s = np.sqrt(tr + 1.0) * 2
            q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
        elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
            s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
            q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
        elif m[1, 1] > m[2, 2]:
            s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
            q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
        else:
            s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
            q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
        if q[0] < 0:
            q = -q
        out[i] = q / np.linalg.norm(q)
    return out.reshape(batch + (4,))


def quat_angle(q):
    """Rotation angle in radians of a (possibly unnormalized) quaternion."""
    qh = quat_normalize(q)
    return 2.0 * np.arccos(np.clip(np.abs(qh[..., 0]), -1.0, 1.0))
