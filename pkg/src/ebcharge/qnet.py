"""Fully-connected Q-value network in plain numpy.

ReLU hidden layers, linear output, Adam updates on the double-Q
squared-error loss, and hard target synchronisation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class TrainingFault(RuntimeError):
    """Non-finite loss or parameters during an update."""


class ArchitectureMismatch(ValueError):
    pass


@dataclass
class Minibatch:
    features: np.ndarray  # (n, d)
    actions: np.ndarray  # (n,) int
    rewards: np.ndarray  # (n,)
    next_features: np.ndarray  # (n, d)
    dones: np.ndarray  # (n,) bool
    next_mask: np.ndarray  # (n, n_out) bool, feasible entries at the next state

    def __len__(self):
        return self.actions.shape[0]


class QNetwork:
    def __init__(self, layer_sizes, lr=5e-4, seed=0, betas=(0.9, 0.999), adam_eps=1e-8):
        self.layer_sizes = tuple(int(n) for n in layer_sizes)
        if len(self.layer_sizes) < 2:
            raise ArchitectureMismatch("need at least input and output sizes")
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.adam_eps = adam_eps
        rng = np.random.default_rng(seed)
        self.W, self.b = [], []
        for fan_in, fan_out in zip(self.layer_sizes[:-1], self.layer_sizes[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            self.W.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
            self.b.append(rng.uniform(-bound, bound, size=fan_out))
        self.mW = [np.zeros_like(w) for w in self.W]
        self.vW = [np.zeros_like(w) for w in self.W]
        self.mb = [np.zeros_like(b) for b in self.b]
        self.vb = [np.zeros_like(b) for b in self.b]
        self.steps = 0

    @property
    def n_in(self):
        return self.layer_sizes[0]

    @property
    def n_out(self):
        return self.layer_sizes[-1]

    def n_params(self):
        return sum(w.size + b.size for w, b in zip(self.W, self.b))

    # -- evaluation -------------------------------------------------------------
    def forward(self, x):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = x[None, :] if single else x
        if h.shape[1] != self.n_in:
            raise ArchitectureMismatch(f"feature length {h.shape[1]} != input size {self.n_in}")
        last = len(self.W) - 1
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h[0] if single else h

    def _forward_cached(self, x):
        acts = [x]
        h = x
        last = len(self.W) - 1
        for i, (w, b) in enumerate(zip(self.W, self.b)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0.0)
            acts.append(h)
        return acts

    # -- training ---------------------------------------------------------------
    def loss_and_grads(self, x, actions, targets):
        """Mean squared error on the taken actions and its parameter gradients."""
        x = np.asarray(x, dtype=float)
        acts = self._forward_cached(x)
        q = acts[-1]
        n = x.shape[0]
        rows = np.arange(n)
        err = q[rows, actions] - targets
        loss = float(np.mean(err ** 2))
        delta = np.zeros_like(q)
        delta[rows, actions] = 2.0 * err / n
        gW, gb = [None] * len(self.W), [None] * len(self.W)
        for i in range(len(self.W) - 1, -1, -1):
            gW[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i:
                delta = (delta @ self.W[i].T) * (acts[i] > 0)
        return loss, gW, gb

    def apply_gradients(self, gW, gb):
        self.steps += 1
        b1, b2, t = self.beta1, self.beta2, self.steps
        lr_t = self.lr * np.sqrt(1 - b2 ** t) / (1 - b1 ** t)
        for P, G, M, V in ((self.W, gW, self.mW, self.vW), (self.b, gb, self.mb, self.vb)):
            for i, g in enumerate(G):
                M[i] *= b1
                M[i] += (1 - b1) * g
                V[i] *= b2
                V[i] += (1 - b2) * g * g
                P[i] -= lr_t * M[i] / (np.sqrt(V[i]) + self.adam_eps)

    def fit_targets(self, x, actions, targets):
        loss, gW, gb = self.loss_and_grads(x, actions, targets)
        if not np.isfinite(loss):
            raise TrainingFault(f"non-finite loss {loss} at update {self.steps}")
        self.apply_gradients(gW, gb)
        if not all(np.all(np.isfinite(w)) for w in self.W):
            raise TrainingFault(f"non-finite parameters after update {self.steps}")
        return loss

    # -- parameters -------------------------------------------------------------
    def copy_from(self, other: "QNetwork"):
        if other.layer_sizes != self.layer_sizes:
            raise ArchitectureMismatch(f"{other.layer_sizes} vs {self.layer_sizes}")
        self.W = [w.copy() for w in other.W]
        self.b = [b.copy() for b in other.b]

    def clone(self) -> "QNetwork":
        net = QNetwork(self.layer_sizes, self.lr, betas=(self.beta1, self.beta2), adam_eps=self.adam_eps)
        net.copy_from(self)
        return net

    def get_flat(self):
        return np.concatenate([p.ravel() for pair in zip(self.W, self.b) for p in pair])

    def set_flat(self, theta):
        theta = np.asarray(theta, float)
        pos = 0
        for i in range(len(self.W)):
            for P in (self.W, self.b):
                size = P[i].size
                P[i] = theta[pos:pos + size].reshape(P[i].shape).copy()
                pos += size

    def state_dict(self, prefix=""):
        d = {f"{prefix}layer_sizes": np.array(self.layer_sizes),
             f"{prefix}steps": np.array(self.steps),
             f"{prefix}lr": np.array(self.lr)}
        for i in range(len(self.W)):
            d[f"{prefix}W{i}"] = self.W[i]
            d[f"{prefix}b{i}"] = self.b[i]
            d[f"{prefix}mW{i}"] = self.mW[i]
            d[f"{prefix}vW{i}"] = self.vW[i]
            d[f"{prefix}mb{i}"] = self.mb[i]
            d[f"{prefix}vb{i}"] = self.vb[i]
        return d

    def load_state_dict(self, d, prefix=""):
        sizes = tuple(int(n) for n in d[f"{prefix}layer_sizes"])
        if sizes != self.layer_sizes:
            raise ArchitectureMismatch(f"checkpoint layers {sizes} do not match {self.layer_sizes}")
        self.steps = int(d[f"{prefix}steps"])
        for i in range(len(self.W)):
            self.W[i] = np.array(d[f"{prefix}W{i}"], float)
            self.b[i] = np.array(d[f"{prefix}b{i}"], float)
            self.mW[i] = np.array(d[f"{prefix}mW{i}"], float)
            self.vW[i] = np.array(d[f"{prefix}vW{i}"], float)
            self.mb[i] = np.array(d[f"{prefix}mb{i}"], float)
            self.vb[i] = np.array(d[f"{prefix}vb{i}"], float)

    def save(self, path):
        np.savez(path, **self.state_dict())

    @classmethod
    def load(cls, path, expected_sizes=None) -> "QNetwork":
        with np.load(path) as d:
            sizes = tuple(int(n) for n in d["layer_sizes"])
            if expected_sizes is not None and tuple(expected_sizes) != sizes:
                raise ArchitectureMismatch(f"checkpoint layers {sizes} do not match {tuple(expected_sizes)}")
            net = cls(sizes, lr=float(d["lr"]))
            net.load_state_dict(d)
        return net


def forward(net: QNetwork, features):
    return net.forward(features)


def sync_target(online: QNetwork, target: QNetwork) -> None:
    target.copy_from(online)


def double_q_targets(online: QNetwork, target: QNetwork, batch: Minibatch, gamma: float = 1.0):
    """``r + gamma * Q_target(s', argmax_a Q_online(s', a))`` over feasible ``a``; no bootstrap when done."""
    y = np.asarray(batch.rewards, float).copy()
    live = ~np.asarray(batch.dones, bool)
    if np.any(live):
        nf = batch.next_features[live]
        mask = batch.next_mask[live]
        q_on = np.where(mask, online.forward(nf), -np.inf)
        best = np.argmax(q_on, axis=1)
        q_tg = target.forward(nf)
        y[live] += gamma * q_tg[np.arange(best.size), best]
    return y


def td_update(online: QNetwork, target: QNetwork, batch: Minibatch, gamma: float = 1.0) -> float:
    """One optimiser step on the double-Q loss; returns the pre-step loss."""
    if len(batch) == 0:
        raise ValueError("empty minibatch")
    y = double_q_targets(online, target, batch, gamma)
    return online.fit_targets(batch.features, np.asarray(batch.actions, int), y)


# ---------------------------------------------------------------------------
# state features

@dataclass(frozen=True)
class FeatureBounds:
    e_min: float
    e_max: float
    tau_max: int
    k_max: int
    price_lo: float
    price_hi: float
    scheme: str = "symmetric"  # symmetric -> [-1, 1], unit -> [0, 1]

    def scale(self, x, lo, hi):
        if hi <= lo:
            u = np.zeros_like(np.asarray(x, float))
        else:
            u = np.clip((np.asarray(x, float) - lo) / (hi - lo), 0.0, 1.0)
        return 2.0 * u - 1.0 if self.scheme == "symmetric" else u


def encode_state(state, option=None, bounds: FeatureBounds = None) -> np.ndarray:
    """Normalised features ``(soc, B, tau, k, prices..., [option])``."""
    b = bounds
    parts = [
        b.scale(state.soc, b.e_min, b.e_max),
        b.scale(state.period_flag, 0, 1),
        b.scale(state.steps_to_departure, 0, b.tau_max),
        b.scale(state.period_index, 0, b.k_max),
    ]
    feats = np.empty(4 + len(state.price_window) + (option is not None))
    feats[:4] = parts
    feats[4:4 + len(state.price_window)] = b.scale(np.asarray(state.price_window), b.price_lo, b.price_hi)
    if option is not None:
        feats[-1] = b.scale(option, b.e_min, b.e_max)
    return feats
