"""Momentum-preserving position projection for branched rods.

Pairwise corrections are weighted by inverse mass (or inverse inertia)
matrices ``W``: for a pair (a, b) and a violation ``C`` along unit ``n``,

    dx_a =  W_a (W_a + W_b)^-1 C n,    dx_b = -W_b (W_a + W_b)^-1 C n,

which gives ``M_a dx_a + M_b dx_b = 0`` exactly for any SPD masses and
moves the pair by exactly ``C`` along ``n`` relative to each other. A
kinematic (pinned) vertex has ``W = 0``, so its partner absorbs the whole
correction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .rotations import compose_rotvec, cross, rotate

_TINY = 1e-15


@dataclass
class OrientationTracker:
    """Accumulated angle-axis orientation per edge.

    ``tangent`` is the unit edge direction at which ``omega`` was last
    brought up to date. Within a time step the orientation is read through
    :meth:`current`, which composes one tangent cross product onto the
    step-start value; :meth:`sync` commits that once per step. Orientation
    is therefore a function of the per-step edge directions alone, and a
    recorded trajectory reproduces it exactly.
    """

    omega: np.ndarray  # (B, E, 3)
    tangent: np.ndarray  # (B, E, 3)

    @classmethod
    def start(cls, x, edge_mask=None) -> "OrientationTracker":
        t = _unit(np.diff(x, axis=-2), edge_mask)
        return cls(np.zeros_like(t), t)

    def copy(self) -> "OrientationTracker":
        return OrientationTracker(self.omega.copy(), self.tangent.copy())

    def sync(self, x, edge_mask=None) -> None:
        """Fold every edge's tangent change since the last sync into omega."""
        t_now = _unit(np.diff(x, axis=-2), edge_mask)
        delta = cross(self.tangent, t_now)
        if edge_mask is not None:
            delta = np.where(edge_mask[..., None], delta, 0.0)
            t_now = np.where(edge_mask[..., None], t_now, self.tangent)
        self.omega = compose_rotvec(delta, self.omega)
        self.tangent = t_now

    def current(self, x, row, edge) -> np.ndarray:
        """Orientation of one edge at positions x, without committing it."""
        t_now = _unit(x[row, edge + 1] - x[row, edge])
        return update_edge_orientation(self.omega[row, edge], cross(self.tangent[row, edge], t_now))


def _unit(e, edge_mask=None):
    n = np.linalg.norm(e, axis=-1, keepdims=True)
    if edge_mask is not None:
        n = np.where(edge_mask[..., None], n, 1.0)
    if np.any(n <= _TINY):
        raise ValueError("zero-length edge")
    return e / n


@dataclass
class ConstraintReport:
    sweeps_used: int = 0
    max_residuals: dict = field(default_factory=dict)
    converged: bool = True

    def as_dict(self) -> dict:
        return {"sweeps_used": self.sweeps_used, "converged": self.converged,
                **{f"max_sq_{k}": float(v) for k, v in self.max_residuals.items()}}


# ----------------------------------------------------------------------------
# closed-form corrections


def orientation_change(x_i, x_next, dx_i, dx_next):
    """Cross product of the unit edge direction before and after a correction."""
    before = np.asarray(x_next, dtype=float) - np.asarray(x_i, dtype=float)
    after = before + np.asarray(dx_next, dtype=float) - np.asarray(dx_i, dtype=float)
    return cross(_unit(before), _unit(after))


def update_edge_orientation(omega, delta):
    """Angle-axis of quat(delta) ⊗ quat(omega)."""
    delta = np.asarray(delta, dtype=float)
    if not np.all(np.isfinite(delta)):
        raise ValueError("non-finite orientation change")
    if not np.any(delta):
        return np.array(omega, dtype=float)
    return compose_rotvec(delta, omega)


def pair_weights(w_a, w_b):
    """(W_a S^-1, W_b S^-1) with S = W_a + W_b; zeros if both are immovable.

    Each ``W`` is a ``(..., 3, 3)`` matrix or a scalar (array) meaning ``w I``.
    """
    w_a, w_b = _as_matrix(w_a), _as_matrix(w_b)
    s = w_a + w_b
    frozen = np.abs(np.trace(s, axis1=-2, axis2=-1)) <= _TINY
    s = np.where(frozen[..., None, None], np.eye(3), s)
    s_inv = np.linalg.inv(s)
    k_a = np.where(frozen[..., None, None], 0.0, w_a @ s_inv)
    k_b = np.where(frozen[..., None, None], 0.0, w_b @ s_inv)
    return k_a, k_b


def _as_matrix(w):
    w = np.asarray(w, dtype=float)
    return w if w.shape[-2:] == (3, 3) else w[..., None, None] * np.eye(3)


def inextensibility_correction(x_i, x_next, w_i, w_next, rest_length):
    """Closed-form length correction of one segment (broadcasts over leading axes).

    ``w_*`` are inverse mass matrices (or scalars); ``0`` pins a vertex.
    """
    x_i = np.asarray(x_i, dtype=float)
    e = np.asarray(x_next, dtype=float) - x_i
    length = np.linalg.norm(e, axis=-1, keepdims=True)
    if np.any(length <= _TINY):
        raise ValueError("zero-length edge")
    c = length - np.abs(np.asarray(rest_length, dtype=float))[..., None]
    k_i, k_next = pair_weights(w_i, w_next)
    push = c * e / length
    return _apply(k_i, push), -_apply(k_next, push)


def attachment_correction(x_p, x_c, w_p, w_c):
    """Pull a parent junction vertex and the child's junction vertex together (broadcasts)."""
    gap = np.asarray(x_c, dtype=float) - np.asarray(x_p, dtype=float)
    k_p, k_c = pair_weights(w_p, w_c)
    # C * gap / |gap| == gap, and a zero gap gives zero corrections
    return _apply(k_p, gap), -_apply(k_c, gap)


def _apply(k, v):
    return np.einsum("...ij,...j->...i", k, v)


def equivalent_rotvec(v):
    """The other angle-axis vector of the same rotation (angle a -> a - 2 pi)."""
    v = np.asarray(v, dtype=float)
    a = np.linalg.norm(v)
    return v.copy() if a <= 1e-12 else v * (1.0 - 2.0 * np.pi / a)


def junction_gap(omega_p, omega_c):
    """``Omega_c - Omega_p`` between the closest angle-axis representatives.

    Near a half turn two almost equal rotations can have nearly opposite
    angle-axis vectors; comparing the nearest representatives keeps the
    residual a small-angle measure.
    """
    omega_p = np.asarray(omega_p, dtype=float)
    omega_c = np.asarray(omega_c, dtype=float)
    best = omega_c - omega_p
    for cp in (omega_p, equivalent_rotvec(omega_p)):
        for cc in (omega_c, equivalent_rotvec(omega_c)):
            if np.linalg.norm(cc - cp) < np.linalg.norm(best) - 1e-15:
                best = cc - cp
    return best


def orientation_residual(omega_p, omega_c, eps):
    return float(np.linalg.norm(junction_gap(omega_p, omega_c)) - eps)


def junction_orientation_correction(edge_p, edge_c, omega_p, omega_c, winv_p, winv_c, eps):
    """Rotate the two junction edges about their midpoints toward each other.

    ``edge_p``/``edge_c`` are ``(start, end)`` vertex pairs, ``winv_*``
    inverse inertia matrices (zero for an edge that may not rotate).
    Returns ``(dx_p_start, dx_p_end, dx_c_start, dx_c_end), (dOmega_p, dOmega_c)``.
    """
    gap = junction_gap(omega_p, omega_c)
    dist = np.linalg.norm(gap)
    c = dist - eps
    zero = np.zeros(3)
    if c <= 0.0 or dist <= _TINY:
        return (zero, zero, zero, zero), (zero, zero)
    k_p, k_c = pair_weights(winv_p, winv_c)
    u = gap / dist
    d_p = k_p @ (c * u)
    d_c = -(k_c @ (c * u))
    return _rotate_about_midpoint(*edge_p, d_p) + _rotate_about_midpoint(*edge_c, d_c), (d_p, d_c)


def _rotate_about_midpoint(a, b, rotvec):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    half = 0.5 * (b - a)
    turned = rotate(rotvec, half)
    # new endpoints mid -/+ R half
    return half - turned, turned - half


# ----------------------------------------------------------------------------
# Algorithm-level enforcement


@dataclass(frozen=True)
class ConstraintSettings:
    kappa: float = 0.02
    kappa_inext: float | None = None
    kappa_attach: float | None = None
    kappa_orient: float | None = None
    eps: float = 0.1
    max_sweeps: int = 50
    # sweeps run even when already within tolerance; a fixed floor above the usual count
    # makes the projection, and so a rollout, smooth in the material parameters
    min_sweeps: int = 0
    inextensibility: bool = True
    attachment: bool = True
    orientation: bool = True
    engine: str = "compiled"  # or "python", the reference implementation

    def threshold(self, cls: str) -> float:
        own = getattr(self, f"kappa_{cls}")
        return self.kappa if own is None else own


@dataclass
class ConstraintSystem:
    """Precomputed pair weights for one padded BDLO and one set of pins."""

    topo: object
    edge_mask: np.ndarray
    rest_lengths: np.ndarray
    k_inext: tuple
    frozen_edges: np.ndarray
    junctions: tuple  # (parent vertex, child row, k_p, k_c, kI_p, kI_c)
    _packed: tuple | None = field(default=None, repr=False)

    @classmethod
    def build(cls, topo, layout, inv_mass, inv_inertia, rest_lengths):
        edge_mask = layout.edge_mask
        w_a = inv_mass[:, :-1]
        w_b = inv_mass[:, 1:]
        k_a, k_b = pair_weights(w_a, w_b)
        frozen = (np.abs(np.trace(w_a + w_b, axis1=-2, axis2=-1)) <= _TINY) | ~edge_mask
        junctions = []
        for i, row in topo.junction_table:
            k_p, k_c = pair_weights(inv_mass[0, i], inv_mass[row, 0])
            ki_p, ki_c = pair_weights(inv_inertia[0, i], inv_inertia[row, 0])
            junctions.append((i, row, k_p, k_c, ki_p, ki_c))
        return cls(topo, edge_mask, rest_lengths, (k_a, k_b), frozen, tuple(junctions))

    # residuals --------------------------------------------------------------

    def residuals(self, x, tracker, settings: ConstraintSettings) -> dict:
        """Worst squared violation per constraint class."""
        out = {}
        if settings.inextensibility:
            c = np.linalg.norm(np.diff(x, axis=-2), axis=-1) - self.rest_lengths
            c = np.where(self.frozen_edges, 0.0, c)
            out["inext"] = float(np.max(c**2)) if c.size else 0.0
        if settings.attachment:
            out["attach"] = max((float(np.sum((x[0, i] - x[row, 0]) ** 2))
                                 for i, row, *_ in self.junctions), default=0.0)
        if settings.orientation:
            worst = 0.0
            for i, row, *_ in self.junctions:
                c = orientation_residual(tracker.current(x, 0, i), tracker.current(x, row, 0), settings.eps)
                worst = max(worst, max(c, 0.0) ** 2)
            out["orient"] = worst
        return out

    def packed(self):
        """Junction data as flat arrays for the compiled sweep."""
        if self._packed is None:
            nj = len(self.junctions)
            jp = np.array([j[0] for j in self.junctions], dtype=np.int64)
            jrow = np.array([j[1] for j in self.junctions], dtype=np.int64)
            mats = [np.array([j[k] for j in self.junctions]).reshape(nj, 3, 3) for k in range(2, 6)]
            k_a, k_b = self.k_inext
            self._packed = (np.ascontiguousarray(k_a), np.ascontiguousarray(k_b),
                            np.ascontiguousarray(self.rest_lengths, dtype=float),
                            np.ascontiguousarray(self.frozen_edges), jp, jrow,
                            *(np.ascontiguousarray(m) for m in mats))
        return self._packed

    def violated(self, res: dict, settings: ConstraintSettings) -> bool:
        return any(v > settings.threshold(k) for k, v in res.items())

    # one sweep --------------------------------------------------------------

    def sweep(self, x, tracker, settings: ConstraintSettings) -> None:
        k_a, k_b = self.k_inext
        n_edges = x.shape[1] - 1
        junction_at = {j[0]: j for j in self.junctions}
        rows = np.arange(x.shape[0])
        for i in range(n_edges):
            if settings.inextensibility:
                live = ~self.frozen_edges[:, i]
                if np.any(live):
                    r = rows[live]
                    e = x[r, i + 1] - x[r, i]
                    length = np.linalg.norm(e, axis=-1, keepdims=True)
                    push = (length - self.rest_lengths[r, i, None]) * e / length
                    x[r, i] += np.einsum("bij,bj->bi", k_a[r, i], push)
                    x[r, i + 1] -= np.einsum("bij,bj->bi", k_b[r, i], push)
            if i in junction_at:
                p, row, k_p, k_c, ki_p, ki_c = junction_at[i]
                if settings.attachment:
                    gap = x[row, 0] - x[0, p]
                    x[0, p] += k_p @ gap
                    x[row, 0] -= k_c @ gap
                if settings.orientation:
                    self._orient(x, tracker, p, row, ki_p, ki_c, settings.eps)

    def _orient(self, x, tracker, p, row, ki_p, ki_c, eps):
        gap = junction_gap(tracker.current(x, 0, p), tracker.current(x, row, 0))
        dist = np.linalg.norm(gap)
        c = dist - eps
        if c <= 0.0 or dist <= _TINY:
            return
        u = gap / dist
        d_p = ki_p @ (c * u)
        d_c = -(ki_c @ (c * u))
        for r, k, d in ((0, p, d_p), (row, 0, d_c)):
            if not np.any(d):
                continue
            da, db = _rotate_about_midpoint(x[r, k], x[r, k + 1], d)
            x[r, k] += da
            x[r, k + 1] += db


def enforce(x, system: ConstraintSystem, tracker: OrientationTracker,
            settings: ConstraintSettings = ConstraintSettings()):
    """Sweep all constraints in ascending segment order until every squared
    residual is within its threshold (after at least ``min_sweeps``) or
    ``max_sweeps`` is reached.

    ``x`` (padded, ``(B, N, 3)``) is updated in place and returned with the
    tracker and a :class:`ConstraintReport`. The tracker is only read: the
    caller commits the step's orientation change with ``tracker.sync``.
    """
    if settings.engine == "compiled":
        return _enforce_compiled(x, system, tracker, settings)
    report = ConstraintReport()
    res = system.residuals(x, tracker, settings)
    while report.sweeps_used < settings.min_sweeps or system.violated(res, settings):
        if report.sweeps_used >= settings.max_sweeps:
            report.converged = False
            break
        system.sweep(x, tracker, settings)
        report.sweeps_used += 1
        res = system.residuals(x, tracker, settings)
    report.max_residuals = res
    return x, tracker, report


def _enforce_compiled(x, system, tracker, settings):
    from . import _kernels

    x = np.ascontiguousarray(x, dtype=float)
    omega = np.ascontiguousarray(tracker.omega, dtype=float)
    tangent = np.ascontiguousarray(tracker.tangent, dtype=float)
    flags = (settings.inextensibility, settings.attachment, settings.orientation)
    sweeps, converged, ri, ra, ro = _kernels.enforce_loop(
        x, *system.packed(), omega, tangent, float(settings.eps), *flags,
        settings.threshold("inext") if flags[0] else np.inf,
        settings.threshold("attach") if flags[1] else np.inf,
        settings.threshold("orient") if flags[2] else np.inf,
        int(settings.max_sweeps), int(settings.min_sweeps))
    tracker.omega, tracker.tangent = omega, tangent
    res = {k: v for k, v, on in zip(("inext", "attach", "orient"), (ri, ra, ro), flags) if on}
    return x, tracker, ConstraintReport(int(sweeps), res, bool(converged))
