"""Lion, K-FAC for the head layers, and the staged warm-up/hybrid schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .network import HEAD_LAYERS


@njit(cache=True)
def _lion_kernel(p, g, m, lr, beta1, beta2, wd, lazy):
    for i in range(p.size):
        if lazy and g[i] == 0.0:
            continue
        c = beta1 * m[i] + (1.0 - beta1) * g[i]
        s = 1.0 if c > 0 else (-1.0 if c < 0 else 0.0)
        p[i] -= lr * (s + wd * p[i])
        m[i] = beta2 * m[i] + (1.0 - beta2) * g[i]


@dataclass
class LionState:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.99
    weight_decay: float = 0.0
    momentum: dict = field(default_factory=dict)
    skipped: int = 0
    lr_scale: dict = field(default_factory=dict)   # per-key multiplier on lr
    lazy: bool = False   # leave entries with an exactly zero gradient (and their momentum) untouched


def lion_step(state: LionState, params: dict, grads: dict) -> bool:
    """In-place Lion update of every array in ``params`` that has a gradient.

    Returns False (and counts a skip) when any gradient is non-finite.
    """
    keys = [k for k in params if k in grads]
    if not all(np.all(np.isfinite(grads[k])) for k in keys):
        state.skipped += 1
        return False
    for k in keys:
        p, g = params[k], grads[k]
        m = state.momentum.get(k)
        if m is None:
            m = state.momentum[k] = np.zeros_like(p)
        _lion_kernel(p.reshape(-1), np.ascontiguousarray(g, dtype=np.float64).reshape(-1), m.reshape(-1),
                     state.lr * state.lr_scale.get(k, 1.0), state.beta1, state.beta2, state.weight_decay, state.lazy)
    return True


class SingularFactorError(np.linalg.LinAlgError):
    pass


@dataclass
class KfacLayer:
    A: np.ndarray | None = None
    G: np.ndarray | None = None
    A_inv: np.ndarray | None = None
    G_inv: np.ndarray | None = None
    age: int = 0


@dataclass
class KfacState:
    lr: float = 1e-3
    damping: float = 1e-3
    decay: float = 0.95
    refresh: int = 10
    kl_clip: float | None = 1e-3
    layers: dict = field(default_factory=dict)
    last_scale: float = 1.0


def damped_inverse(M, damping, retries=3):
    """``(M + damping I)^-1``; damping grows x10 (at most ``retries`` times) if singular."""
    lam = damping
    eye = np.eye(len(M))
    for _ in range(retries + 1):
        Md = M + lam * eye
        try:
            L = np.linalg.cholesky(Md)
            Linv = np.linalg.solve(L, eye)
            inv = Linv.T @ Linv
            if np.all(np.isfinite(inv)):
                return (inv + inv.T) / 2
        except np.linalg.LinAlgError:
            pass
        lam *= 10.0
    raise SingularFactorError("damped factor singular even at damping %g" % (lam / 10.0))


def kfac_update_factors(state: KfacState, stats) -> KfacState:
    """Fold batch ``LayerStats`` into the factor EMAs; refresh stale inverses.

    A layer's first statistics initialise its factors directly.
    """
    rho = state.decay
    for name in stats.A:
        layer = state.layers.setdefault(name, KfacLayer())
        bA, bG = stats.A[name], stats.G[name]
        if layer.A is None:
            layer.A, layer.G = bA.copy(), bG.copy()
        else:
            layer.A = rho * layer.A + (1.0 - rho) * bA
            layer.G = rho * layer.G + (1.0 - rho) * bG
        layer.A = (layer.A + layer.A.T) / 2
        layer.G = (layer.G + layer.G.T) / 2
        layer.age += 1
        if layer.A_inv is None or layer.age >= state.refresh:
            layer.A_inv = damped_inverse(layer.A, state.damping)
            layer.G_inv = damped_inverse(layer.G, state.damping)
            layer.age = 0
    return state


def kfac_direction(A_inv, G_inv, grad):
    """``G^-1 grad A^-1``: the matrix form of ``(A^-1 kron G^-1) vec(grad)`` (column-stacking vec)."""
    return G_inv @ grad @ A_inv


def kfac_step(state: KfacState, name: str, W, grad):
    """In-place natural-gradient step on one layer's homogeneous weight ``[W | b]``."""
    layer = state.layers[name]
    if layer.A_inv is None:
        raise ValueError("layer %r has no cached inverses; call kfac_update_factors first" % name)
    W -= state.lr * kfac_direction(layer.A_inv, layer.G_inv, grad)
    return W


def kfac_apply(state: KfacState, params: dict, grads: dict):
    """K-FAC step on every head layer that has statistics.

    With ``kl_clip`` set, all layer steps share one rescaling so that the
    predicted quadratic change ``lr^2 * sum(dW . grad)`` stays below
    ``kl_clip``; damped inverses of nearly flat factors otherwise produce
    steps orders of magnitude too large.
    """
    todo = []
    for name, (wk, bk) in HEAD_LAYERS.items():
        layer = state.layers.get(name)
        if layer is None or layer.A_inv is None:
            continue
        g = np.hstack([grads[wk], grads[bk][:, None]])
        todo.append((wk, bk, g, kfac_direction(layer.A_inv, layer.G_inv, g)))
    scale = 1.0
    if state.kl_clip is not None and todo:
        vfv = state.lr ** 2 * sum(float(np.sum(d * g)) for _, _, g, d in todo)
        if vfv > state.kl_clip:
            scale = math.sqrt(state.kl_clip / vfv)
    state.last_scale = scale
    for wk, bk, _, d in todo:
        params[wk] -= scale * state.lr * d[:, :-1]
        params[bk] -= scale * state.lr * d[:, -1]


@dataclass
class Schedule:
    total_epochs: int = 500
    warmup_fraction: float = 0.6

    def __post_init__(self):
        if not 0.0 < self.warmup_fraction < 1.0:
            raise ValueError("warmup_fraction must lie in (0, 1)")
        if self.total_epochs < 1:
            raise ValueError("total_epochs must be >= 1")

    @property
    def boundary(self) -> int:
        """First epoch of the hybrid stage."""
        return math.ceil(round(self.warmup_fraction * self.total_epochs, 9))

    def stage(self, epoch: int) -> str:
        return "lion" if epoch < self.boundary else "kfac"


def staged_step(schedule: Schedule, epoch: int, params: dict, grads: dict,
                lion_tables: LionState, lion_heads: LionState, kfac: KfacState | None, stats=None) -> str:
    """Apply one optimisation step; returns the stage label ("lion" or "kfac").

    Warm-up: Lion on everything.  Hybrid: Lion on the hash tables, K-FAC on
    the heads.  ``kfac=None`` forces the all-Lion branch for every epoch.
    Each table level is a separate Lion key (``tables0``, ``tables1``, ...)
    so ``lion_tables.lr_scale`` can give levels their own rates.
    """
    stage = schedule.stage(epoch) if kfac is not None else "lion"
    if not all(np.all(np.isfinite(g)) for g in grads.values()):
        lion_tables.skipped += 1
        return stage
    tables, gt = params["tables"], grads["tables"]
    lion_step(lion_tables, {"tables%d" % l: tables[l] for l in range(len(tables))},
              {"tables%d" % l: gt[l] for l in range(len(gt))})
    heads = {k: v for k, v in params.items() if k != "tables"}
    if stage == "lion":
        lion_step(lion_heads, heads, grads)
    else:
        if stats is not None:
            kfac_update_factors(kfac, stats)
        kfac_apply(kfac, heads, grads)
    return stage
