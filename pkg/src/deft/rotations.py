"""Small rotation toolkit: quaternions (w, x, y, z), angle-axis vectors,
Rodrigues matrices and discrete parallel transport.

All functions act on the trailing axis and broadcast over leading ones.
"""

import numpy as np

_SMALL = 1e-12


def cross(a, b):
    """Cross product on the trailing axis; cheaper than ``np.cross`` for small arrays."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    a0, a1, a2 = a[..., 0], a[..., 1], a[..., 2]
    b0, b1, b2 = b[..., 0], b[..., 1], b[..., 2]
    return np.stack([a1 * b2 - a2 * b1, a2 * b0 - a0 * b2, a0 * b1 - a1 * b0], axis=-1)


def quat_from_rotvec(rotvec):
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    half = 0.5 * angle
    # sin(a/2)/a -> 1/2 as a -> 0
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(angle > _SMALL, np.sin(half) / np.where(angle > _SMALL, angle, 1.0),
                         0.5 - angle**2 / 48.0)
    return np.concatenate([np.cos(half), scale * rotvec], axis=-1)


def rotvec_from_quat(q):
    """Angle-axis vector of a unit quaternion, angle in [0, pi]."""
    q = np.asarray(q, dtype=float)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    # pick the hemisphere with w >= 0 so the angle stays in [0, pi]
    q = np.where(q[..., :1] < 0.0, -q, q)
    w = q[..., :1]
    v = q[..., 1:]
    s = np.linalg.norm(v, axis=-1, keepdims=True)
    angle = 2.0 * np.arctan2(s, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(s > _SMALL, angle / np.where(s > _SMALL, s, 1.0), 2.0 / np.maximum(w, _SMALL))
    return scale * v


def quat_mul(a, b):
    """Hamilton product a ⊗ b (apply b first, then a)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ], axis=-1)


def compose_rotvec(delta, base):
    """Angle-axis of quat(delta) ⊗ quat(base)."""
    return rotvec_from_quat(quat_mul(quat_from_rotvec(delta), quat_from_rotvec(base)))


def rotation_matrix(rotvec):
    """Rodrigues rotation matrix for an angle-axis vector (..., 3) -> (..., 3, 3)."""
    rotvec = np.asarray(rotvec, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1)
    safe = np.where(angle > _SMALL, angle, 1.0)
    k = rotvec / safe[..., None]
    K = skew(k)
    s = np.where(angle > _SMALL, np.sin(angle), 0.0)[..., None, None]
    c = np.where(angle > _SMALL, 1.0 - np.cos(angle), 0.0)[..., None, None]
    eye = np.broadcast_to(np.eye(3), K.shape)
    return eye + s * K + c * (K @ K)


def skew(v):
    v = np.asarray(v, dtype=float)
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([
        np.stack([z, -w, y], axis=-1),
        np.stack([w, z, -x], axis=-1),
        np.stack([-y, x, z], axis=-1),
    ], axis=-2)


def rotate(rotvec, v):
    """Rotate vectors v by angle-axis rotvec (Rodrigues formula, no matrices)."""
    rotvec = np.asarray(rotvec, dtype=float)
    v = np.asarray(v, dtype=float)
    angle = np.linalg.norm(rotvec, axis=-1, keepdims=True)
    safe = np.where(angle > _SMALL, angle, 1.0)
    k = rotvec / safe
    cos = np.cos(angle)
    sin = np.sin(angle)
    out = v * cos + cross(k, v) * sin + k * np.sum(k * v, axis=-1, keepdims=True) * (1.0 - cos)
    return np.where(angle > _SMALL, out, v)


def parallel_transport(u, t_from, t_to):
    """Transport u by the minimal rotation taking unit t_from onto unit t_to.

    The rotation axis is t_from × t_to; when the tangents coincide the
    transport is the identity. Antiparallel tangents raise ``ValueError``.
    """
    u = np.asarray(u, dtype=float)
    axis = cross(t_from, t_to)
    s = np.linalg.norm(axis, axis=-1, keepdims=True)
    c = np.sum(t_from * t_to, axis=-1, keepdims=True)
    if np.any((s <= _SMALL) & (c < 0.0)):
        raise ValueError("antiparallel successive tangents: parallel transport is singular")
    # Rodrigues with sin = s, cos = c expressed without the angle
    safe = np.where(s > _SMALL, s, 1.0)
    k = axis / safe
    out = u * c + cross(k, u) * s + k * np.sum(k * u, axis=-1, keepdims=True) * (1.0 - c)
    return np.where(s > _SMALL, out, u)


def twist_angle(rotvec, axis):
    """Twist (swing-twist decomposition) of a rotation about a unit axis, in (-pi, pi]."""
    q = quat_from_rotvec(rotvec)
    proj = np.sum(q[..., 1:] * axis, axis=-1)
    return 2.0 * np.arctan2(proj, q[..., 0])
