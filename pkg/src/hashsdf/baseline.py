"""Reference field for the optimizer benchmark: sinusoidal encoding, deep MLP, Adam.

Same training objective as the hash-grid model, only the representation and
optimizer differ.  Spatial gradients are carried as forward-mode tangents
(one per axis) through every layer, and :meth:`PEModel.backward` runs the
reverse pass through both the values and the tangents.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import losses, network as net
from .geometry import PointCloud, SceneTransform, SpatialIndex


def positional_encoding(x, n_freqs):
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` and its Jacobian, axis-major (n, 3, D)."""
    n = len(x)
    freqs = np.pi * 2.0 ** np.arange(n_freqs)
    arg = x[:, None, :] * freqs[None, :, None]              # (n, K, 3)
    s, c = np.sin(arg), np.cos(arg)
    E = np.concatenate([x, s.reshape(n, -1), c.reshape(n, -1)], axis=1)
    D = E.shape[1]
    J = np.zeros((n, 3, D))
    for k in range(3):
        J[:, k, k] = 1.0
        ds = np.zeros_like(arg)
        dc = np.zeros_like(arg)
        ds[:, :, k] = c[:, :, k] * freqs
        dc[:, :, k] = -s[:, :, k] * freqs
        J[:, k, 3:] = np.concatenate([ds.reshape(n, -1), dc.reshape(n, -1)], axis=1)
    return E, J


@dataclass
class PECache:
    x: np.ndarray
    acts: list        # layer inputs a_0..a_L
    tangents: list    # matching (n, 3, width) tangents, or None
    sigs: list
    d: np.ndarray
    grad: np.ndarray | None
    rgb: np.ndarray


class PEModel:
    """Softplus MLP over a sinusoidal encoding; output row 0 is the SDF, rows 1-3 RGB."""

    def __init__(self, n_freqs=6, hidden=128, depth=3, seed=0, transform=None):
        rng = np.random.default_rng(seed)
        self.n_freqs = n_freqs
        self.transform = transform or SceneTransform()
        widths = [3 + 6 * n_freqs] + [hidden] * depth + [4]
        self.weights, self.biases = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            self.weights.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
            self.biases.append(np.zeros(fan_out))
        # start near a constant 0.1 field, as the hash-grid model does
        self.biases[-1][0] = 0.1 - np.log(2.0) * self.weights[-1][0].sum()

    def params(self) -> dict:
        out = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out["W%d" % i], out["b%d" % i] = W, b
        return out

    def n_params(self) -> int:
        return sum(v.size for v in self.params().values())

    def evaluate(self, x, spatial_grad: bool = True) -> PECache:
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        a, T = positional_encoding(x, self.n_freqs)
        T = T if spatial_grad else None
        acts, tans, sigs = [a], [T], []
        for W, b in zip(self.weights[:-1], self.biases[:-1]):
            h, sig = net.softplus(a @ W.T + b)
            if T is not None:
                T = sig[:, None, :] * (T @ W.T)
            a = h
            acts.append(a)
            tans.append(T)
            sigs.append(sig)
        out = a @ self.weights[-1].T + self.biases[-1]
        grad = None if T is None else T @ self.weights[-1][0]
        return PECache(x, acts, tans, sigs, out[:, 0], grad, out[:, 1:])

    def sdf(self, x):
        return self.evaluate(x, spatial_grad=False).d

    def backward(self, cache: PECache, d_up=None, rgb_up=None, grad_up=None, capture=False, tables_out=None):
        n = len(cache.d)
        d_up = np.zeros(n) if d_up is None else d_up
        rgb_up = np.zeros((n, 3)) if rgb_up is None else rgb_up
        grads = {}
        L = len(self.weights) - 1
        dout = np.column_stack([d_up, rgb_up])
        a, T = cache.acts[L], cache.tangents[L]
        grads["W%d" % L] = dout.T @ a
        grads["b%d" % L] = dout.sum(axis=0)
        w0 = self.weights[L][0]
        da = dout @ self.weights[L]
        dT = None
        if grad_up is not None:
            grads["W%d" % L][0] += np.einsum("nk,nkh->h", grad_up, T)
            dT = grad_up[:, :, None] * w0[None, None, :]
        for i in range(L - 1, -1, -1):
            W, sig = self.weights[i], cache.sigs[i]
            a_in, T_in = cache.acts[i], cache.tangents[i]
            dz = sig * da
            if dT is not None:
                zdot = T_in @ W.T
                dz += sig * (1.0 - sig) * np.einsum("nkh,nkh->nh", zdot, dT)
                dzdot = sig[:, None, :] * dT
            grads["W%d" % i] = dz.T @ a_in
            grads["b%d" % i] = dz.sum(axis=0)
            if dT is not None:
                grads["W%d" % i] += np.einsum("nkh,nkd->hd", dzdot, T_in)
                dT = dzdot @ W
            da = dz @ W
        return grads, None


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = None
    v: dict = None

    def update(self, params: dict, grads: dict):
        if self.m is None:
            self.m = {k: np.zeros_like(p) for k, p in params.items()}
            self.v = {k: np.zeros_like(p) for k, p in params.items()}
        self.step += 1
        c1, c2 = 1.0 - self.beta1 ** self.step, 1.0 - self.beta2 ** self.step
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g
            self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def train_baseline(cloud: PointCloud, config, transform=None, lr=1e-3, n_freqs=6, hidden=128, depth=3):
    """Train :class:`PEModel` with Adam on the same batches and losses as :func:`trainer.train`."""
    from .trainer import TrainLog

    model = PEModel(n_freqs, hidden, depth, config.seed, transform)
    index = SpatialIndex(cloud.positions)
    adam = AdamState(lr)
    tlog = TrainLog(phase_seconds={"adam": 0.0})
    params = model.params()
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        batch = losses.sample_batch(cloud, index, config.sizes, config.noise_sigma, config.offsets, rng)
        report, grads, _ = losses.composite_loss(batch, model, config.weights)
        if all(np.all(np.isfinite(g)) for g in grads.values()):
            adam.update(params, grads)
        else:
            tlog.skipped_steps += 1
        dt = time.perf_counter() - t0
        tlog.phase_seconds["adam"] += dt
        row = {"epoch": epoch, "loss_total": report.total, "wall_ms": dt * 1000.0, "stage": "adam"}
        row.update({"loss_" + t: report.terms[t] for t in losses.TERMS})
        tlog.rows.append(row)
    return model, tlog
