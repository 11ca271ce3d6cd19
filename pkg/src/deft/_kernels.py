"""Compiled constraint sweep. Mirrors ``ConstraintSystem.sweep`` and
``ConstraintSystem.residuals`` exactly; the numpy versions stay as the
reference the tests compare against.
"""

import math

import numpy as np
from numba import njit


@njit(cache=True)
def _quat(v):
    a = math.sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    h = 0.5 * a
    if a > 1e-12:
        s = math.sin(h) / a
    else:
        s = 0.5 - a * a / 48.0
    return np.array([math.cos(h), s * v[0], s * v[1], s * v[2]])


@njit(cache=True)
def _rotvec(q):
    n = math.sqrt(q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3])
    w, x, y, z = q[0] / n, q[1] / n, q[2] / n, q[3] / n
    if w < 0.0:
        w, x, y, z = -w, -x, -y, -z
    s = math.sqrt(x * x + y * y + z * z)
    ang = 2.0 * math.atan2(s, w)
    if s > 1e-12:
        k = ang / s
    else:
        k = 2.0 / max(w, 1e-12)
    return np.array([k * x, k * y, k * z])


@njit(cache=True)
def _compose(d, o):
    a = _quat(d)
    b = _quat(o)
    q = np.array([
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ])
    return _rotvec(q)


@njit(cache=True)
def _cross(a, b):
    return np.array([a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]])


@njit(cache=True)
def _norm(a):
    return math.sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])


@njit(cache=True)
def _rotate(rv, v):
    ang = _norm(rv)
    if ang <= 1e-12:
        return v.copy()
    k = rv / ang
    c = math.cos(ang)
    s = math.sin(ang)
    kv = k[0] * v[0] + k[1] * v[1] + k[2] * v[2]
    return v * c + _cross(k, v) * s + k * kv * (1.0 - c)


@njit(cache=True)
def _current(x, omega, tangent, r, k):
    """Orientation of edge (r, k) now: the step-start value composed with t_start x t_now."""
    e = x[r, k + 1] - x[r, k]
    d = _cross(tangent[r, k], e / _norm(e))
    if d[0] != 0.0 or d[1] != 0.0 or d[2] != 0.0:
        return _compose(d, omega[r, k])
    return omega[r, k].copy()


@njit(cache=True)
def _wrap(v):
    """The other angle-axis vector of the same rotation (angle a -> a - 2 pi)."""
    a = _norm(v)
    if a <= 1e-12:
        return v.copy()
    return v * (1.0 - 2.0 * math.pi / a)


@njit(cache=True)
def _junction_gap(x, omega, tangent, p, row):
    """Omega_c - Omega_p between the closest angle-axis representatives."""
    op = _current(x, omega, tangent, 0, p)
    oc = _current(x, omega, tangent, row, 0)
    best = oc - op
    bn = _norm(best)
    for cand_p in (op, _wrap(op)):
        for cand_c in (oc, _wrap(oc)):
            g = cand_c - cand_p
            n = _norm(g)
            if n < bn - 1e-15:
                best = g
                bn = n
    return best


@njit(cache=True)
def residuals(x, rest, frozen, jp, jrow, omega, tangent, eps, use_inext, use_attach, use_orient):
    res_i = 0.0
    res_a = 0.0
    res_o = 0.0
    B, E = rest.shape
    if use_inext:
        for r in range(B):
            for k in range(E):
                if frozen[r, k]:
                    continue
                c = _norm(x[r, k + 1] - x[r, k]) - rest[r, k]
                if c * c > res_i:
                    res_i = c * c
    for j in range(jp.shape[0]):
        p = jp[j]
        row = jrow[j]
        if use_attach:
            g = x[0, p] - x[row, 0]
            a = g[0] * g[0] + g[1] * g[1] + g[2] * g[2]
            if a > res_a:
                res_a = a
        if use_orient:
            c = _norm(_junction_gap(x, omega, tangent, p, row)) - eps
            if c > 0.0 and c * c > res_o:
                res_o = c * c
    return res_i, res_a, res_o


@njit(cache=True)
def _rotate_edge(x, r, k, d):
    a = x[r, k]
    b = x[r, k + 1]
    half = 0.5 * (b - a)
    turned = _rotate(d, half)
    x[r, k] = a + half - turned
    x[r, k + 1] = b + turned - half


@njit(cache=True)
def sweep(x, k_a, k_b, rest, frozen, jp, jrow, k_p, k_c, ki_p, ki_c, omega, tangent, eps,
          use_inext, use_attach, use_orient):
    B, E = rest.shape
    junction = -np.ones(E + 1, dtype=np.int64)
    for j in range(jp.shape[0]):
        junction[jp[j]] = j
    for i in range(E):
        if use_inext:
            for r in range(B):
                if frozen[r, i]:
                    continue
                e = x[r, i + 1] - x[r, i]
                ln = _norm(e)
                push = (ln - rest[r, i]) * e / ln
                x[r, i] += k_a[r, i] @ push
                x[r, i + 1] -= k_b[r, i] @ push
        j = junction[i]
        if j < 0:
            continue
        p = jp[j]
        row = jrow[j]
        if use_attach:
            gap = x[row, 0] - x[0, p]
            x[0, p] += k_p[j] @ gap
            x[row, 0] -= k_c[j] @ gap
        if use_orient:
            gap = _junction_gap(x, omega, tangent, p, row)
            dist = _norm(gap)
            c = dist - eps
            if c <= 0.0 or dist <= 1e-15:
                continue
            u = gap * (c / dist)
            d_p = ki_p[j] @ u
            d_c = -(ki_c[j] @ u)
            if d_p[0] != 0.0 or d_p[1] != 0.0 or d_p[2] != 0.0:
                _rotate_edge(x, 0, p, d_p)
            if d_c[0] != 0.0 or d_c[1] != 0.0 or d_c[2] != 0.0:
                _rotate_edge(x, row, 0, d_c)


@njit(cache=True)
def enforce_loop(x, k_a, k_b, rest, frozen, jp, jrow, k_p, k_c, ki_p, ki_c, omega, tangent, eps,
                 use_inext, use_attach, use_orient, kap_i, kap_a, kap_o, max_sweeps, min_sweeps):
    sweeps = 0
    converged = True
    ri, ra, ro = residuals(x, rest, frozen, jp, jrow, omega, tangent, eps, use_inext, use_attach, use_orient)
    while sweeps < min_sweeps or ri > kap_i or ra > kap_a or ro > kap_o:
        if sweeps >= max_sweeps:
            converged = False
            break
        sweep(x, k_a, k_b, rest, frozen, jp, jrow, k_p, k_c, ki_p, ki_c, omega, tangent, eps,
              use_inext, use_attach, use_orient)
        sweeps += 1
        ri, ra, ro = residuals(x, rest, frozen, jp, jrow, omega, tangent, eps, use_inext, use_attach, use_orient)
    return sweeps, converged, ri, ra, ro
