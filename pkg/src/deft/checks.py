"""Finite-difference checks of the analytic derivatives.

Used by the test suite and by ``deft gradcheck``. Every check returns the
worst norm-wise relative error ``max|analytic - numeric| / max|numeric|``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import rod
from .rotations import cross


def random_polyline(rng, n, segment=1.0, wiggle=0.4):
    """Random smooth-ish curve with ``n`` vertices and no near-reversals."""
    d = np.array([1.0, 0.0, 0.0])
    pts = [rng.normal(size=3)]
    for _ in range(n - 1):
        d = d + wiggle * rng.normal(size=3)
        d /= np.linalg.norm(d)
        pts.append(pts[-1] + segment * rng.uniform(0.6, 1.4) * d)
    return np.array(pts)


def random_spd2(rng, scale=1.0):
    a = rng.normal(size=(2, 2))
    return scale * (a @ a.T + 0.5 * np.eye(2))


@dataclass
class RandomRod:
    x: np.ndarray
    theta: np.ndarray
    params: rod.MaterialParams
    seed_axis: np.ndarray
    seed_tangent: np.ndarray

    def seed(self, x):
        e = x[1] - x[0]
        return rod.transport_seed(self.seed_axis, self.seed_tangent, e / np.linalg.norm(e))

    def energy(self, x=None, theta=None):
        x = self.x if x is None else x
        theta = self.theta if theta is None else theta
        return float(rod.total_energy(rod.evaluate(x, theta, self.seed(x)), theta, self.params))


def random_rod(rng, n=None, max_n=8) -> RandomRod:
    n = int(rng.integers(3, max_n + 1)) if n is None else n
    x = random_polyline(rng, n)
    x_rest = random_polyline(rng, n, wiggle=0.2)
    t_ref = rng.normal(size=3)
    t_ref /= np.linalg.norm(t_ref)
    b_ref = rod.default_seed(t_ref)
    params = rod.MaterialParams(
        mass=np.tile(np.eye(3), (n, 1, 1)),
        inertia=np.tile(np.eye(3), (n - 1, 1, 1)),
        bend=np.stack([random_spd2(rng) for _ in range(n)]),
        twist=rng.uniform(0.2, 2.0, n - 1),
        omega_bar=rod.rest_curvature(x_rest),
        rest_lengths=np.linalg.norm(np.diff(x_rest, axis=0), axis=-1),
    )
    theta = rng.normal(scale=0.5, size=n - 1)
    return RandomRod(x, theta, params, b_ref, t_ref)


def _rel(a, n):
    return float(np.max(np.abs(a - n)) / max(np.max(np.abs(n)), 1e-300))


def theta_gradient_error(r: RandomRod, step=1e-6) -> float:
    bishop = rod.bishop_frames(r.x, r.seed(r.x))
    ev = rod.evaluate(r.x, r.theta, bishop=bishop)
    a = rod.theta_gradient(ev, r.theta, r.params)
    num = rod.numeric_theta_gradient(r.x, r.theta, r.params, bishop, step=step)
    return _rel(a, num)


def force_error(r: RandomRod, step=1e-6, relax=True) -> float:
    """Analytic forces vs central differences of P in X at fixed (relaxed) theta."""
    theta = r.theta
    if relax:
        theta, _ = rod.optimize_theta(r.x, theta, r.params, b1_seed=r.seed(r.x))
    ev = rod.evaluate(r.x, theta, r.seed(r.x))
    f = rod.vertex_forces(ev, r.params, r.seed_tangent)
    num = np.zeros_like(r.x)
    for i in range(r.x.shape[0]):
        for a in range(3):
            d = np.zeros_like(r.x)
            d[i, a] = step
            num[i, a] = -(r.energy(r.x + d, theta) - r.energy(r.x - d, theta)) / (2 * step)
    return _rel(f, num)


def gradient_suite(trials=100, seed=0, max_n=8):
    """Worst theta-gradient and force errors over ``trials`` random rods."""
    rng = np.random.default_rng(seed)
    worst_theta = worst_force = 0.0
    for _ in range(trials):
        r = random_rod(rng, max_n=max_n)
        worst_theta = max(worst_theta, theta_gradient_error(r))
        worst_force = max(worst_force, force_error(r))
    return worst_theta, worst_force


def residual_gradient_error(net, feats, targets, step=1e-6) -> float:
    """Backprop weight gradients of a residual network vs central differences."""
    _, grads = net.loss_and_grad(feats, targets)
    params = net.params()
    worst = 0.0
    for k, p in enumerate(params):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            saved = p[idx]
            p[idx] = saved + step
            lp, _ = net.loss_and_grad(feats, targets)
            p[idx] = saved - step
            lm, _ = net.loss_and_grad(feats, targets)
            p[idx] = saved
            num[idx] = (lp - lm) / (2 * step)
        if np.max(np.abs(num)) > 0:
            worst = max(worst, _rel(grads[k], num))
    return worst


def residual_network_check(seed=0, hidden=(8,), samples=3) -> float:
    """Gradient check of a tiny residual network on a two-child graph with random data."""
    from .residual import FEATURE_DIM, ResidualNet
    from .topology import BranchSpec, build_topology

    topo = build_topology([BranchSpec("parent", 5), BranchSpec("a", 3, "child", 2), BranchSpec("b", 3, "child", 3)])
    rng = np.random.default_rng(seed)
    net = ResidualNet.create(topo, hidden=hidden, seed=seed)
    net.weights[-1] = rng.normal(size=net.weights[-1].shape)
    net.biases = [rng.normal(size=b.shape) for b in net.biases]
    n = net.a_hat.shape[0]
    feats = rng.normal(size=(samples, n, FEATURE_DIM))
    targets = rng.normal(size=(samples, n, 3))
    return residual_gradient_error(net, feats, targets)


# ----------------------------------------------------------------------------
# constraint projection


def random_spd3(rng, scale=1.0):
    a = rng.normal(size=(3, 3))
    return scale * (a @ a.T + 0.5 * np.eye(3))


def conservation_suite(instances=10_000, seed=0) -> dict:
    """Worst absolute balance errors over random single corrections.

    Each instance draws SPD masses (inertias) for a pair and applies one
    inextensibility, attachment and junction-orientation correction.
    Returns the worst ``|M_a dx_a + M_b dx_b|`` per class, the orientation
    analogue ``|I_p dOmega_p + I_c dOmega_c|``, and the worst sine between
    a linear correction and its connecting segment.
    """
    from .constraints import attachment_correction, inextensibility_correction, junction_orientation_correction

    rng = np.random.default_rng(seed)
    worst = {"inext": 0.0, "attach": 0.0, "orient": 0.0, "collinear": 0.0}

    mats = np.array([random_spd3(rng) for _ in range(4 * instances)]).reshape(instances, 4, 3, 3)
    invs = np.linalg.inv(mats)
    pts = rng.normal(size=(instances, 6, 3))
    rest = rng.uniform(0.1, 2.0, (instances, 2))
    scal = rng.uniform(0.1, 2.0, (instances, 2))
    om = rng.normal(scale=0.5, size=(instances, 2, 3))
    m_a, m_b, i_p, i_c = np.moveaxis(mats, 1, 0)
    w_a, w_b, wi_p, wi_c = np.moveaxis(invs, 1, 0)
    x_a, x_b = pts[:, 0], pts[:, 1]
    seg = x_b - x_a

    def imbalance(da, db):
        return float(np.max(np.abs(np.einsum("nij,nj->ni", m_a, da) + np.einsum("nij,nj->ni", m_b, db))))

    def sine(d):
        n = np.linalg.norm(d, axis=-1) * np.linalg.norm(seg, axis=-1)
        return float(np.max(np.linalg.norm(cross(d, seg), axis=-1) / np.maximum(n, 1e-300)))

    worst["inext"] = imbalance(*inextensibility_correction(x_a, x_b, w_a, w_b, rest[:, 0]))
    worst["attach"] = imbalance(*attachment_correction(x_a, x_b, w_a, w_b))
    # scalar masses: corrections must lie along the segment
    for d in (*inextensibility_correction(x_a, x_b, 1 / scal[:, 0], 1 / scal[:, 1], rest[:, 1]),
              *attachment_correction(x_a, x_b, 1 / scal[:, 0], 1 / scal[:, 1])):
        worst["collinear"] = max(worst["collinear"], sine(d))
    for k in range(instances):
        _, (d_p, d_c) = junction_orientation_correction(pts[k, 2:4], pts[k, 4:6], om[k, 0], om[k, 1], wi_p[k],
                                                        wi_c[k], 0.1)
        worst["orient"] = max(worst["orient"], float(np.max(np.abs(i_p[k] @ d_p + i_c[k] @ d_c))))
    return worst


def perturbed_comb(rng, noise=0.01, detach=0.05, children=2):
    """Default-material comb at rest plus random vertex noise and children pulled off their junctions.

    Returns ``(system, tracker, x)`` ready for :func:`constraints.enforce`.
    """
    from . import dynamics as dy
    from .constraints import OrientationTracker
    from .scenarios import comb

    topo = comb(parent_n=12, child_n=5, children=children)
    model = dy.Bdlo.from_rest(topo, dy.rest_shape(topo))
    sim = dy.Simulator(model)
    x = model.x_rest.copy()
    mask = model.layout.mask
    x[mask] += rng.normal(scale=noise, size=(int(mask.sum()), 3))
    for row in range(1, len(topo.branches)):
        off = rng.normal(size=3)
        x[row, mask[row]] += detach * off / np.linalg.norm(off)
    return sim.system, OrientationTracker.start(model.x_rest, model.edge_mask), x


def convergence_suite(trials=100, seed=0, settings=None):
    """Run the projection on ``trials`` perturbed combs.

    Returns ``(converged_count, worst_sweeps, worst_ratio)`` where the ratio
    is the largest post-hoc squared residual over its threshold.
    """
    from .constraints import ConstraintSettings, enforce

    settings = ConstraintSettings(kappa=0.02) if settings is None else settings
    rng = np.random.default_rng(seed)
    ok = 0
    worst_sweeps = 0
    worst_ratio = 0.0
    for _ in range(trials):
        system, tracker, x = perturbed_comb(rng)
        x, tracker, report = enforce(x, system, tracker, settings)
        res = system.residuals(x, tracker, settings)
        ratio = max(v / settings.threshold(k) for k, v in res.items())
        ok += report.converged and ratio <= 1.0
        worst_sweeps = max(worst_sweeps, report.sweeps_used)
        worst_ratio = max(worst_ratio, ratio)
    return ok, worst_sweeps, worst_ratio
