"""Discrete elastic rod mechanics for (batches of) branches.

Arrays carry an optional leading batch axis: positions are ``(..., n, 3)``,
per-edge quantities ``(..., n-1, ...)`` and per-interior-vertex quantities
``(..., n-2, ...)``. Interior vertex ``i`` (1 <= i <= n-2) sits between
edges ``i-1`` and ``i``; its material curvature has two slots, slot 0
measured in the frame of edge ``i-1`` and slot 1 in the frame of edge ``i``.

Padded batches pass an ``edge_mask``; masked edges are replaced by the last
real edge so that frames stay well defined, and every energy, gradient and
force term touching them is zeroed.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .rotations import cross, parallel_transport, skew

# rotation by -90 deg acting on 2-vectors: d omega / d theta = J omega
J2 = np.array([[0.0, 1.0], [-1.0, 0.0]])

_DEGENERATE = 1e-12


class GeometryError(ValueError):
    pass


class ConvergenceError(RuntimeError):
    def __init__(self, message, grad_norm=None):
        super().__init__(message)
        self.grad_norm = grad_norm


@dataclass(frozen=True)
class FrameSet:
    t: np.ndarray
    b1: np.ndarray
    b2: np.ndarray
    m1: np.ndarray | None = None
    m2: np.ndarray | None = None


@dataclass(frozen=True)
class MaterialParams:
    """Material description of a padded batch of branches.

    ``mass`` (..., n, 3, 3), ``inertia`` (..., n-1, 3, 3), ``bend`` (..., n, 2, 2),
    ``twist`` (..., n-1), ``omega_bar`` (..., n-2, 2, 2), ``rest_lengths`` (..., n-1).
    """

    mass: np.ndarray
    inertia: np.ndarray
    bend: np.ndarray
    twist: np.ndarray
    omega_bar: np.ndarray
    rest_lengths: np.ndarray

    def __post_init__(self):
        if np.any(self.rest_lengths < 0):
            raise ValueError("rest lengths must be positive")

    def with_(self, **kw) -> "MaterialParams":
        return replace(self, **kw)

    def branch(self, k: int, n: int) -> "MaterialParams":
        """Unpadded parameters of batch row k with n real vertices."""
        return MaterialParams(self.mass[k, :n], self.inertia[k, :n - 1], self.bend[k, :n],
                              self.twist[k, :n - 1], self.omega_bar[k, :n - 2],
                              self.rest_lengths[k, :n - 1])


# ----------------------------------------------------------------------------
# geometry and frames


def _masked_edges(x, edge_mask=None):
    e = np.diff(x, axis=-2)
    if edge_mask is None:
        return e
    # padded edges copy the last real edge so tangents stay finite and collinear
    last = np.maximum(edge_mask.sum(axis=-1) - 1, 0)
    fill = np.take_along_axis(e, last[..., None, None], axis=-2)
    return np.where(edge_mask[..., None], e, fill)


def edge_vectors(x, edge_mask=None):
    e = _masked_edges(np.asarray(x, dtype=float), edge_mask)
    lengths = np.linalg.norm(e, axis=-1)
    if np.any(lengths <= _DEGENERATE):
        raise GeometryError("zero-length edge")
    return e, lengths


def transport_seed(b1_ref, t_ref, t0):
    """Move a first-edge Bishop axis from the tangent it was defined on to t0."""
    u = parallel_transport(b1_ref, t_ref, t0)
    u = u - np.sum(u * t0, axis=-1, keepdims=True) * t0
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def default_seed(t0):
    """Some unit vector orthogonal to t0 (the axis of least alignment)."""
    t0 = np.asarray(t0, dtype=float)
    pick = np.eye(3)[np.argmin(np.abs(t0), axis=-1)]
    u = pick - np.sum(pick * t0, axis=-1, keepdims=True) * t0
    return u / np.linalg.norm(u, axis=-1, keepdims=True)


def bishop_frames(x, b1_seed=None, edge_mask=None) -> FrameSet:
    """Twist-free frames along the polyline by successive parallel transport."""
    e, lengths = edge_vectors(x, edge_mask)
    t = e / lengths[..., None]
    if b1_seed is None:
        b1_seed = default_seed(t[..., 0, :])
    b1_seed = np.asarray(b1_seed, dtype=float)
    if np.any(np.abs(np.sum(b1_seed * t[..., 0, :], axis=-1)) > 1e-9):
        raise GeometryError("Bishop seed is not orthogonal to the first tangent")
    # all transport rotations at once; only their application is sequential
    axis = cross(t[..., :-1, :], t[..., 1:, :])
    s = np.linalg.norm(axis, axis=-1, keepdims=True)
    c = np.sum(t[..., :-1, :] * t[..., 1:, :], axis=-1, keepdims=True)
    if np.any((s <= 1e-12) & (c < 0.0)):
        raise GeometryError("antiparallel successive tangents: parallel transport is singular")
    turning = s > 1e-12
    k_ax = axis / np.where(turning, s, 1.0)
    b1 = np.empty_like(t)
    b1[..., 0, :] = b1_seed
    for k in range(1, t.shape[-2]):
        u, a = b1[..., k - 1, :], k_ax[..., k - 1, :]
        sk, ck = s[..., k - 1, :], c[..., k - 1, :]
        kxu = np.stack([a[..., 1] * u[..., 2] - a[..., 2] * u[..., 1],
                        a[..., 2] * u[..., 0] - a[..., 0] * u[..., 2],
                        a[..., 0] * u[..., 1] - a[..., 1] * u[..., 0]], axis=-1)
        out = u * ck + kxu * sk + a * np.sum(a * u, axis=-1, keepdims=True) * (1.0 - ck)
        b1[..., k, :] = np.where(turning[..., k - 1, :], out, u)
    b2 = cross(t, b1)
    return FrameSet(t, b1, b2)


def material_frames(frames: FrameSet, theta) -> FrameSet:
    c = np.cos(theta)[..., None]
    s = np.sin(theta)[..., None]
    m1 = frames.b1 * c + frames.b2 * s
    m2 = -frames.b1 * s + frames.b2 * c
    return replace(frames, m1=m1, m2=m2)


def curvature_binormal(e_prev, e_next):
    e_prev = np.asarray(e_prev, dtype=float)
    e_next = np.asarray(e_next, dtype=float)
    denom = (np.linalg.norm(e_prev, axis=-1) * np.linalg.norm(e_next, axis=-1)
             + np.sum(e_prev * e_next, axis=-1))
    scale = np.linalg.norm(e_prev, axis=-1) * np.linalg.norm(e_next, axis=-1)
    if np.any(denom <= 1e-12 * np.maximum(scale, 1e-300)):
        raise GeometryError("antiparallel edges: curvature binormal is singular")
    return 2.0 * cross(e_prev, e_next) / denom[..., None]


def material_curvature(kb, m1, m2):
    """(kb . m1, kb . m2) for matching leading shapes."""
    return np.stack([np.sum(kb * m1, axis=-1), np.sum(kb * m2, axis=-1)], axis=-1)


def curvatures(frames: FrameSet, kb):
    """Material curvature of every interior vertex, shape (..., n-2, 2 slots, 2)."""
    slot0 = material_curvature(kb, frames.m1[..., :-1, :], frames.m2[..., :-1, :])
    slot1 = material_curvature(kb, frames.m1[..., 1:, :], frames.m2[..., 1:, :])
    return np.stack([slot0, slot1], axis=-2)


def vertex_masks(edge_mask, shape):
    """Masks for edges (..., n-1) and interior vertices (..., n-2)."""
    if edge_mask is None:
        em = np.ones(shape, dtype=bool)
    else:
        em = np.asarray(edge_mask, dtype=bool)
    return em, em[..., 1:] & em[..., :-1]


def rest_curvature(x_rest, b1_seed=None, edge_mask=None):
    """Undeformed material curvature of a configuration at zero twist."""
    frames = material_frames(bishop_frames(x_rest, b1_seed, edge_mask),
                             np.zeros(np.shape(x_rest)[:-1])[..., :-1])
    e, _ = edge_vectors(x_rest, edge_mask)
    kb = curvature_binormal(e[..., :-1, :], e[..., 1:, :])
    _, im = vertex_masks(edge_mask, e.shape[:-1])
    return curvatures(frames, kb) * im[..., None, None]


# ----------------------------------------------------------------------------
# energies


@dataclass
class RodEval:
    """Geometry cache shared by the energy, gradient and force routines."""

    e: np.ndarray
    lengths: np.ndarray
    frames: FrameSet
    kb: np.ndarray
    omega: np.ndarray
    edge_mask: np.ndarray
    interior_mask: np.ndarray


def evaluate(x, theta, b1_seed=None, edge_mask=None, bishop: FrameSet | None = None) -> RodEval:
    e, lengths = edge_vectors(x, edge_mask)
    if bishop is None:
        bishop = bishop_frames(x, b1_seed, edge_mask)
    frames = material_frames(bishop, theta)
    kb = curvature_binormal(e[..., :-1, :], e[..., 1:, :])
    em, im = vertex_masks(edge_mask, lengths.shape)
    kb = kb * im[..., None]
    return RodEval(e, lengths, frames, kb, curvatures(frames, kb), em, im)


def _bend_residual(ev: RodEval, params: MaterialParams):
    d = (ev.omega - params.omega_bar) * ev.interior_mask[..., None, None]
    Bd = np.einsum("...ab,...sb->...sa", params.bend[..., 1:-1, :, :], d)
    return d, Bd


def bend_energy(ev: RodEval, params: MaterialParams):
    d, Bd = _bend_residual(ev, params)
    return 0.5 * np.sum(d * Bd, axis=(-3, -2, -1))


def twist_energy(theta, beta, edge_mask=None):
    theta = np.asarray(theta, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), theta.shape)
    em, im = vertex_masks(edge_mask, theta.shape)
    dth = np.diff(theta, axis=-1) * im
    return 0.5 * np.sum(beta[..., 1:] * dth**2, axis=-1)


def total_energy(ev: RodEval, theta, params: MaterialParams):
    return bend_energy(ev, params) + twist_energy(theta, params.twist, ev.edge_mask)


def _bend_theta_terms(ev: RodEval, params: MaterialParams):
    """Per (vertex, slot): gradient (B d)^T J w and Hessian diagonal contributions."""
    d, Bd = _bend_residual(ev, params)
    Jw = ev.omega @ J2.T
    g = np.sum(Bd * Jw, axis=-1)
    B = params.bend[..., 1:-1, :, :]
    BJw = np.einsum("...ab,...sb->...sa", B, Jw)
    h = np.sum(Jw * BJw, axis=-1) - np.sum(Bd * ev.omega, axis=-1)
    m = ev.interior_mask[..., None]
    return g * m, h * m


def _scatter_slots(per_vertex_slot, n_edges):
    """Interior vertex i feeds slot 0 into edge i-1 and slot 1 into edge i."""
    out = np.zeros(per_vertex_slot.shape[:-2] + (n_edges,))
    out[..., :-1] += per_vertex_slot[..., 0]
    out[..., 1:] += per_vertex_slot[..., 1]
    return out


def bend_theta_gradient(ev: RodEval, params: MaterialParams):
    g, _ = _bend_theta_terms(ev, params)
    return _scatter_slots(g, ev.lengths.shape[-1])


def twist_theta_gradient(theta, beta, edge_mask=None):
    theta = np.asarray(theta, dtype=float)
    beta = np.broadcast_to(np.asarray(beta, dtype=float), theta.shape)
    _, im = vertex_masks(edge_mask, theta.shape)
    flux = beta[..., 1:] * np.diff(theta, axis=-1) * im
    out = np.zeros_like(theta)
    out[..., 1:] += flux
    out[..., :-1] -= flux
    return out


def theta_gradient(ev: RodEval, theta, params: MaterialParams):
    """Analytic dP/dtheta per edge (bend + twist)."""
    g = bend_theta_gradient(ev, params) + twist_theta_gradient(theta, params.twist, ev.edge_mask)
    return g * ev.edge_mask


def theta_hessian_bands(ev: RodEval, params: MaterialParams):
    """Exact Hessian of P in theta as (diagonal, off-diagonal) bands."""
    _, h = _bend_theta_terms(ev, params)
    diag = _scatter_slots(h, ev.lengths.shape[-1])
    beta = np.broadcast_to(params.twist, diag.shape)
    link = beta[..., 1:] * ev.interior_mask
    diag[..., 1:] += link
    diag[..., :-1] += link
    return diag, -link


# ----------------------------------------------------------------------------
# quasi-static twist


def _solve_tridiagonal(diag, off, rhs):
    """Thomas algorithm over the last axis, batched over leading axes."""
    n = diag.shape[-1]
    c = np.zeros_like(diag)
    d = np.zeros_like(rhs)
    c[..., 0] = off[..., 0] / diag[..., 0] if n > 1 else 0.0
    d[..., 0] = rhs[..., 0] / diag[..., 0]
    for i in range(1, n):
        denom = diag[..., i] - off[..., i - 1] * c[..., i - 1]
        if i < n - 1:
            c[..., i] = off[..., i] / denom
        d[..., i] = (rhs[..., i] - off[..., i - 1] * d[..., i - 1]) / denom
    out = np.empty_like(rhs)
    out[..., -1] = d[..., -1]
    for i in range(n - 2, -1, -1):
        out[..., i] = d[..., i] - c[..., i] * out[..., i + 1]
    return out


def _energy_theta(x, theta, params, bishop, edge_mask):
    return total_energy(evaluate(x, theta, edge_mask=edge_mask, bishop=bishop), theta, params)


def optimize_theta(x, theta0, params: MaterialParams, free=None, b1_seed=None, edge_mask=None,
                   tol=1e-8, max_iters=100, bishop=None, gradient="analytic", fd_step=1e-6):
    """Minimise P over the free twist angles with damped Newton steps.

    ``free`` marks edges whose angle may move (default: every real edge except
    the first, which fixes the twist gauge). Newton steps on the exact
    tridiagonal Hessian fall back to a Gershgorin-shifted Hessian wherever
    that Hessian is not positive definite; every accepted step decreases P.

    ``gradient="numeric"`` replaces the analytic gradient by central
    differences of P and keeps the same Hessian bands (used for benchmarks).

    Returns the optimal angles and the number of iterations used.
    """
    x = np.asarray(x, dtype=float)
    theta = np.array(theta0, dtype=float)
    if bishop is None:
        bishop = bishop_frames(x, b1_seed, edge_mask)
    em, _ = vertex_masks(edge_mask, theta.shape)
    if free is None:
        free = em.copy()
        free[..., 0] = False
    free = np.asarray(free, dtype=bool) & em
    batch_shape = theta.shape[:-1]
    active = np.ones(batch_shape, dtype=bool)
    energy = _energy_theta(x, theta, params, bishop, edge_mask)
    gnorm = np.full(batch_shape, np.inf)
    for it in range(max_iters + 1):
        ev = evaluate(x, theta, edge_mask=edge_mask, bishop=bishop)
        if gradient == "analytic":
            g = theta_gradient(ev, theta, params)
        else:
            g = numeric_theta_gradient(x, theta, params, bishop, edge_mask, fd_step)
        g = np.where(free, g, 0.0)
        gnorm = np.max(np.abs(g), axis=-1) if g.shape[-1] else np.zeros(batch_shape)
        active &= gnorm > tol
        if not np.any(active):
            return theta, it
        if it == max_iters:
            break
        diag, off = theta_hessian_bands(ev, params)
        # freeze fixed edges: identity rows, no coupling
        diag = np.where(free, diag, 1.0)
        off = np.where(free[..., 1:] & free[..., :-1], off, 0.0)
        step = -_solve_tridiagonal(diag, off, g)
        descent = np.sum(step * g, axis=-1)
        curvature_ok = np.all(np.where(free, diag > 0.0, True), axis=-1)
        fallback = ~(np.isfinite(descent) & (descent < 0.0) & curvature_ok)
        if np.any(fallback):
            # Gershgorin shift: |diag| plus the off-diagonal row sums is positive definite
            pad = np.zeros(off.shape[:-1] + (1,))
            row = np.abs(np.concatenate([off, pad], axis=-1)) + np.abs(np.concatenate([pad, off], axis=-1))
            shifted = np.where(free, np.maximum(np.abs(diag) + row, 1e-12), 1.0)
            safe = -_solve_tridiagonal(shifted, off, g)
            step = np.where(fallback[..., None], safe, step)
        step = np.where(free & active[..., None], step, 0.0)
        alpha = np.ones(batch_shape)
        pending = active.copy()
        new_theta = theta
        for _ in range(40):
            trial = theta + alpha[..., None] * step
            e_trial = _energy_theta(x, trial, params, bishop, edge_mask)
            # slack of a few ulps so Newton can finish once decreases drop below roundoff
            ok = pending & (e_trial <= energy + 64 * np.finfo(float).eps * np.abs(energy))
            new_theta = np.where(ok[..., None], trial, new_theta)
            energy = np.where(ok, e_trial, energy)
            pending &= ~ok
            if not np.any(pending):
                break
            alpha = np.where(pending, 0.5 * alpha, alpha)
        # rows whose line search failed cannot improve further at this precision
        active &= ~pending
        # fallback steps are conservative; stretch them while the energy keeps dropping
        grow = fallback & active & (alpha == 1.0)
        while np.any(grow) and alpha.max() < 1024:
            alpha = np.where(grow, 2.0 * alpha, alpha)
            trial = theta + alpha[..., None] * step
            e_trial = _energy_theta(x, trial, params, bishop, edge_mask)
            grow &= e_trial < energy
            new_theta = np.where(grow[..., None], trial, new_theta)
            energy = np.where(grow, e_trial, energy)
        theta = new_theta
    raise ConvergenceError(
        f"twist optimisation did not converge in {max_iters} iterations "
        f"(max |dP/dtheta| = {np.max(gnorm):.3e})", grad_norm=float(np.max(gnorm)))


def numeric_theta_gradient(x, theta, params, bishop, edge_mask=None, step=1e-6):
    """Central-difference dP/dtheta, one edge at a time."""
    g = np.zeros_like(theta)
    for j in range(theta.shape[-1]):
        tp = theta.copy()
        tm = theta.copy()
        tp[..., j] += step
        tm[..., j] -= step
        g[..., j] = (_energy_theta(x, tp, params, bishop, edge_mask)
                     - _energy_theta(x, tm, params, bishop, edge_mask)) / (2 * step)
    em, _ = vertex_masks(edge_mask, theta.shape)
    return g * em


# ----------------------------------------------------------------------------
# vertex forces


def _kb_jacobians(e0, e1, kb):
    """d kb / d e_prev and d kb / d e_next, each (..., 3, 3)."""
    l0 = np.linalg.norm(e0, axis=-1, keepdims=True)
    l1 = np.linalg.norm(e1, axis=-1, keepdims=True)
    denom = (l0 * l1 + np.sum(e0 * e1, axis=-1, keepdims=True))[..., None]
    grad0 = (-2.0 * skew(e1) - kb[..., :, None] * (l1 * e0 / l0 + e1)[..., None, :]) / denom
    grad1 = (2.0 * skew(e0) - kb[..., :, None] * (l0 * e1 / l1 + e0)[..., None, :]) / denom
    return grad0, grad1


def energy_position_gradient(ev: RodEval, params: MaterialParams, seed_tangent=None):
    """dP/dX at fixed twist angles, shape like the positions.

    ``seed_tangent`` is the reference tangent the first Bishop axis was
    transported from (see :func:`transport_seed`); when given, the twist that
    transport induces on every frame is included.
    """
    d, Bd = _bend_residual(ev, params)
    m1, m2 = ev.frames.m1, ev.frames.m2
    # dP/dkb_i = sum_s [m1^j m2^j] (B d)_s with j = i-1+s
    dkb = (Bd[..., 0, 0, None] * m1[..., :-1, :] + Bd[..., 0, 1, None] * m2[..., :-1, :]
           + Bd[..., 1, 0, None] * m1[..., 1:, :] + Bd[..., 1, 1, None] * m2[..., 1:, :])
    e0, e1 = ev.e[..., :-1, :], ev.e[..., 1:, :]
    grad0, grad1 = _kb_jacobians(e0, e1, ev.kb)
    ge0 = np.einsum("...a,...ab->...b", dkb, grad0)
    ge1 = np.einsum("...a,...ab->...b", dkb, grad1)
    n = ev.e.shape[-2] + 1
    grad = np.zeros(ev.e.shape[:-2] + (n, 3))
    # e_prev = x_i - x_{i-1}, e_next = x_{i+1} - x_i
    grad[..., :-2, :] -= ge0
    grad[..., 1:-1, :] += ge0 - ge1
    grad[..., 2:, :] += ge1

    # Bishop holonomy: frame on edge j twists by sum_{k<=j} psi_k under deformation
    g_theta = bend_theta_gradient(ev, params) * ev.edge_mask
    suffix = np.flip(np.cumsum(np.flip(g_theta, axis=-1), axis=-1), axis=-1)
    s = suffix[..., 1:, None]  # weight on psi_k, k = 1..n-2 (edges >= k)
    l0 = ev.lengths[..., :-1, None]
    l1 = ev.lengths[..., 1:, None]
    dpsi_prev = ev.kb / (2.0 * l0)
    dpsi_next = -ev.kb / (2.0 * l1)
    grad[..., :-2, :] += s * dpsi_prev
    grad[..., 1:-1, :] -= s * (dpsi_prev + dpsi_next)
    grad[..., 2:, :] += s * dpsi_next
    if seed_tangent is not None:
        # virtual fixed edge before edge 0
        t_ref = np.asarray(seed_tangent, dtype=float)
        e0 = ev.e[..., 0, :]
        l0 = ev.lengths[..., 0, None]
        kb_ref = 2.0 * cross(t_ref, e0) / (l0 + np.sum(t_ref * e0, axis=-1, keepdims=True))
        dpsi = -suffix[..., :1] * kb_ref / (2.0 * l0)
        grad[..., 1, :] += dpsi
        grad[..., 0, :] -= dpsi
    vmask = np.zeros(grad.shape[:-1], dtype=bool)
    vmask[..., :-1] |= ev.edge_mask
    vmask[..., 1:] |= ev.edge_mask
    return grad * vmask[..., None]


def vertex_forces(ev: RodEval, params: MaterialParams, seed_tangent=None):
    return -energy_position_gradient(ev, params, seed_tangent)
