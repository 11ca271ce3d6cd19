"""Learned velocity residual: one graph convolution ``A_hat . MLP(F)``.

The network maps per-node features (position, velocity, material
descriptors) to a velocity correction that the integrator adds inside the
position update. Node rows follow the global order of
:class:`deft.topology.BdloTopology` (parent vertices, then each child's).

Checkpoints are JSON::

    {"format": "deft-residual", "version": 1, "topology": {...},
     "activation": "tanh", "feature_mean": [...], "feature_std": [...],
     "layers": [{"shape": [rows, cols], "weight": [...row-major...],
                 "bias": [...]}, ...]}
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .topology import Adjacency, BdloTopology, adjacency, pad_layout

log = logging.getLogger(__name__)

FORMAT = "deft-residual"
VERSION = 1
DESCRIPTOR_WIDTH = 3
FEATURE_DIM = 3 + 3 + DESCRIPTOR_WIDTH


class TrainingError(RuntimeError):
    pass


def normalize_adjacency(adj) -> np.ndarray:
    """D^-1/2 A D^-1/2 for an adjacency that already carries self-loops."""
    a = adj.a if isinstance(adj, Adjacency) else np.asarray(adj, dtype=float)
    d = a.sum(axis=1)
    if np.any(d <= 0):
        raise ValueError("every node needs a self-loop (positive degree)")
    s = 1.0 / np.sqrt(d)
    return a * s[:, None] * s[None, :]


def node_descriptors(topo: BdloTopology, params) -> np.ndarray:
    """Per-node material scalars: mass trace, mean bending eigenvalue, mean adjacent twist stiffness."""
    layout = pad_layout(topo)
    mask = layout.mask
    em = layout.edge_mask
    mass = np.trace(params.mass, axis1=-2, axis2=-1)
    bend = np.trace(params.bend, axis1=-2, axis2=-1) / 2.0
    tw = np.where(em, params.twist, 0.0)
    cnt = em.astype(float)
    beta_sum = np.zeros(mask.shape)
    beta_cnt = np.zeros(mask.shape)
    beta_sum[:, :-1] += tw
    beta_sum[:, 1:] += tw
    beta_cnt[:, :-1] += cnt
    beta_cnt[:, 1:] += cnt
    beta = beta_sum / np.maximum(beta_cnt, 1.0)
    out = np.stack([mass, bend, beta], axis=-1)
    return out[mask]


def to_nodes(padded, mask) -> np.ndarray:
    """Padded ``(B, N, k)`` array to global node rows ``(total, k)``."""
    return np.asarray(padded)[mask]


def to_padded(nodes, mask) -> np.ndarray:
    out = np.zeros(mask.shape + np.asarray(nodes).shape[1:])
    out[mask] = nodes
    return out


def features(x, v, descriptors, mask=None) -> np.ndarray:
    """Feature rows ``[x, v, descriptors]``; ``x``/``v`` padded ``(B, N, 3)`` or node rows."""
    x = np.asarray(x, dtype=float)
    v = np.asarray(v, dtype=float)
    if x.ndim == 3:
        if mask is None:
            raise ValueError("padded positions need the layout mask")
        x, v = to_nodes(x, mask), to_nodes(v, mask)
    descriptors = np.asarray(descriptors, dtype=float)
    if x.shape != v.shape or x.shape[0] != descriptors.shape[0] or x.shape[-1] != 3:
        raise ValueError(f"feature shape mismatch: x {x.shape}, v {v.shape}, descriptors {descriptors.shape}")
    return np.concatenate([x, v, descriptors], axis=-1)


_ACTIVATIONS = {
    # (function, derivative expressed through the activated output)
    "tanh": (np.tanh, lambda a: 1.0 - a**2),
}


@dataclass
class ResidualNet:
    """``out = A_hat . MLP((F - mean) / std)``; the last layer is linear."""

    a_hat: np.ndarray
    weights: list
    biases: list
    feature_mean: np.ndarray = field(default_factory=lambda: np.zeros(FEATURE_DIM))
    feature_std: np.ndarray = field(default_factory=lambda: np.ones(FEATURE_DIM))
    activation: str = "tanh"
    topo: BdloTopology | None = None

    @classmethod
    def create(cls, topo: BdloTopology, hidden=(32,), seed=0, feature_dim=FEATURE_DIM, scale=None):
        """Small random init; the output layer starts at zero so the residual starts off."""
        rng = np.random.default_rng(seed)
        dims = [feature_dim, *hidden, 3]
        weights, biases = [], []
        for k, (i, o) in enumerate(zip(dims[:-1], dims[1:])):
            s = (1.0 / np.sqrt(i)) if scale is None else scale
            w = rng.normal(0.0, s, (i, o)) if k < len(dims) - 2 else np.zeros((i, o))
            weights.append(w)
            biases.append(np.zeros(o))
        a_hat = normalize_adjacency(adjacency(topo))
        return cls(a_hat, weights, biases, np.zeros(feature_dim), np.ones(feature_dim), "tanh", topo)

    @classmethod
    def zeros_like(cls, net: "ResidualNet") -> "ResidualNet":
        return cls(net.a_hat, [np.zeros_like(w) for w in net.weights], [np.zeros_like(b) for b in net.biases],
                   net.feature_mean.copy(), net.feature_std.copy(), net.activation, net.topo)

    @property
    def feature_dim(self) -> int:
        return self.weights[0].shape[0]

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def set_params(self, flat: list) -> None:
        n = len(self.weights)
        self.weights = [np.asarray(w, dtype=float) for w in flat[:n]]
        self.biases = [np.asarray(b, dtype=float) for b in flat[n:]]

    def _check(self):
        if not all(np.all(np.isfinite(p)) for p in self.params()):
            raise ValueError("non-finite network weights")

    def _mlp(self, f, keep=False):
        act, _ = _ACTIVATIONS[self.activation]
        h = (f - self.feature_mean) / self.feature_std
        cache = [h]
        last = len(self.weights) - 1
        for k, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if k < last:
                h = act(h)
            cache.append(h)
        return (h, cache) if keep else h

    def forward(self, f, node_mask=None) -> np.ndarray:
        """One 3-vector per node; masked nodes neither send nor receive."""
        self._check()
        f = np.asarray(f, dtype=float)
        if f.shape[-2] != self.a_hat.shape[0]:
            raise ValueError(f"feature rows {f.shape[-2]} do not match the graph's {self.a_hat.shape[0]} nodes")
        h = self._mlp(f)
        if node_mask is not None:
            h = np.where(node_mask[..., None], h, 0.0)
        out = self.a_hat @ h
        if node_mask is not None:
            out = np.where(node_mask[..., None], out, 0.0)
        return out

    __call__ = forward

    def loss_and_grad(self, f, target, node_mask=None):
        """Mean squared error of ``forward(f)`` against ``target`` and its weight gradients.

        ``f``/``target`` may carry a leading sample axis.
        """
        _, dact = _ACTIVATIONS[self.activation]
        f = np.asarray(f, dtype=float)
        out_mlp, cache = self._mlp(f, keep=True)
        keep = np.ones(f.shape[:-1], dtype=bool) if node_mask is None else np.broadcast_to(node_mask, f.shape[:-1])
        h = np.where(keep[..., None], out_mlp, 0.0)
        out = np.where(keep[..., None], self.a_hat @ h, 0.0)
        diff = out - target
        count = max(int(np.sum(keep)) * 3, 1)
        loss = float(np.sum(diff**2) / count)
        g = np.where(keep[..., None], 2.0 * diff / count, 0.0)
        g = self.a_hat.T @ g
        g = np.where(keep[..., None], g, 0.0)
        gw, gb = [None] * len(self.weights), [None] * len(self.biases)
        for k in range(len(self.weights) - 1, -1, -1):
            inp = cache[k]
            gw[k] = inp.reshape(-1, inp.shape[-1]).T @ g.reshape(-1, g.shape[-1])
            gb[k] = g.reshape(-1, g.shape[-1]).sum(axis=0)
            if k > 0:
                g = (g @ self.weights[k].T) * dact(cache[k])
        return loss, gw + gb

    # persistence --------------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "format": FORMAT,
            "version": VERSION,
            "topology": None if self.topo is None else self.topo.to_dict(),
            "activation": self.activation,
            "feature_mean": self.feature_mean.tolist(),
            "feature_std": self.feature_std.tolist(),
            "layers": [{"shape": list(w.shape), "weight": w.ravel().tolist(), "bias": b.tolist()}
                       for w, b in zip(self.weights, self.biases)],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ResidualNet":
        if data.get("format") != FORMAT:
            raise ValueError(f"not a residual checkpoint (format={data.get('format')!r})")
        if data.get("version") != VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        if data.get("topology") is None:
            raise ValueError("checkpoint carries no topology")
        topo = BdloTopology.from_dict(data["topology"])
        weights, biases = [], []
        for k, layer in enumerate(data["layers"]):
            shape = tuple(layer["shape"])
            w = np.asarray(layer["weight"], dtype=float)
            if w.size != shape[0] * shape[1] or len(layer["bias"]) != shape[1]:
                raise ValueError(f"layer {k}: weight/bias sizes do not match shape {shape}")
            weights.append(w.reshape(shape))
            biases.append(np.asarray(layer["bias"], dtype=float))
        return cls(normalize_adjacency(adjacency(topo)), weights, biases,
                   np.asarray(data["feature_mean"], dtype=float), np.asarray(data["feature_std"], dtype=float),
                   data.get("activation", "tanh"), topo)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict()) + "\n")

    @classmethod
    def load(cls, path) -> "ResidualNet":
        return cls.from_dict(json.loads(Path(path).read_text()))


class ResidualField:
    """Adapter giving the simulator a ``(x, v) -> residual`` callable on padded arrays."""

    def __init__(self, net: ResidualNet, topo: BdloTopology, params):
        self.net = net
        self.mask = pad_layout(topo).mask
        self.descriptors = node_descriptors(topo, params)

    def __call__(self, x, v):
        f = features(x, v, self.descriptors, self.mask)
        return to_padded(self.net.forward(f), self.mask)


# ----------------------------------------------------------------------------
# training


@dataclass
class TrainReport:
    losses: list
    initial_loss: float
    final_loss: float
    baseline_loss: float  # one-step loss with the residual switched off


class Adam:
    def __init__(self, params, lr=1e-3, b1=0.9, b2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        out = []
        for k, (p, g) in enumerate(zip(params, grads)):
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            mh = self.m[k] / (1 - self.b1**self.t)
            vh = self.v[k] / (1 - self.b2**self.t)
            out.append(p - self.lr * mh / (np.sqrt(vh) + self.eps))
        return out


def one_step_targets(sim, frames, inputs):
    """Teacher-forced samples from a trajectory.

    For each t the physics step (residual off) is run from the recorded
    ``X_t`` with velocity ``(X_t - X_{t-1}) / dt`` under input ``u_{t+1}``
    (``inputs[t]`` is the gripper pose at frame t). Returns node-row features
    ``(T', nodes, h)`` and velocity targets ``(X_{t+1} - X_phys) / dt``.
    Because the residual enters the position update linearly, and the
    projection is treated as identity for its gradient, these targets make
    the one-step position loss equal ``dt^2`` times the residual regression loss.
    """
    from .dynamics import replay_states

    mask = sim.layout.mask
    desc = node_descriptors(sim.model.topo, sim.model.params)
    dt = sim.cfg.dt
    feats, targets = [], []
    for t, state in replay_states(sim, frames, inputs, stop=len(frames) - 1):
        res = sim.step(state, inputs[t + 1], use_residual=False)
        x_phys = res.state.x
        feats.append(features(state.x, state.v, desc, mask))
        targets.append(to_nodes((frames[t + 1] - x_phys) / dt, mask))
    if not feats:
        raise ValueError("training needs at least two consecutive frames after the first")
    return np.stack(feats), np.stack(targets)


def train(net: ResidualNet, feats, targets, epochs=300, lr=1e-2, batch_size=None, seed=0,
          standardize=True) -> TrainReport:
    """Fit the network to velocity targets with Adam (full batch by default)."""
    feats = np.asarray(feats, dtype=float)
    targets = np.asarray(targets, dtype=float)
    if standardize:
        flat = feats.reshape(-1, feats.shape[-1])
        net.feature_mean = flat.mean(axis=0)
        std = flat.std(axis=0)
        net.feature_std = np.where(std > 1e-12, std, 1.0)
    baseline = float(np.mean(targets**2))
    initial, _ = net.loss_and_grad(feats, targets)
    opt = Adam(net.params(), lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    n = feats.shape[0]
    best = (np.inf, [p.copy() for p in net.params()])
    for epoch in range(epochs):
        if batch_size is None or batch_size >= n:
            batches = [np.arange(n)]
        else:
            order = rng.permutation(n)
            batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
        for idx in batches:
            loss, grads = net.loss_and_grad(feats[idx], targets[idx])
            if not np.isfinite(loss):
                raise TrainingError(f"loss became non-finite at epoch {epoch}")
            net.set_params(opt.step(net.params(), grads))
        full, _ = net.loss_and_grad(feats, targets)
        losses.append(full)
        if full < best[0]:
            best = (full, [p.copy() for p in net.params()])
    net.set_params(best[1])
    log.info("residual training: %.3e -> %.3e", initial, best[0])
    return TrainReport(losses, float(initial), float(best[0]), baseline)
