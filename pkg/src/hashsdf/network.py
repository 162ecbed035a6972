"""Implicit field: hash encoder -> GeoNet (Softplus MLP) and ColorNet (linear).

Derivatives are closed forms for this fixed architecture.  With

    z = W1 E + b1,  h = softplus(z),  d = w2 . h + b2,  rgb = Wc E + bc

the spatial gradient is ``grad d = J^T W1^T (sigmoid(z) * w2)`` where ``J`` is
the encoder Jacobian.  :func:`backward` propagates upstream gradients on
``d``, ``rgb`` *and* ``grad d`` to every parameter; the last one brings in the
Softplus second derivative ``sigmoid * (1 - sigmoid)``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import encoding as enc
from .encoding import EncoderConfig
from .geometry import SceneTransform

PARAM_NAMES = ("tables", "W1", "b1", "W2", "b2", "Wc", "bc")
HEAD_LAYERS = {"geo1": ("W1", "b1"), "geo2": ("W2", "b2"), "color": ("Wc", "bc")}


class DivergenceError(FloatingPointError):
    """Non-finite values appeared in the model output."""


@dataclass
class FieldModel:
    config: EncoderConfig
    tables: np.ndarray   # (L, T, F)
    W1: np.ndarray       # (H, D)
    b1: np.ndarray       # (H,)
    W2: np.ndarray       # (1, H)
    b2: np.ndarray       # (1,)
    Wc: np.ndarray       # (3, D)
    bc: np.ndarray       # (3,)
    transform: SceneTransform = field(default_factory=SceneTransform)

    def __post_init__(self):
        D = self.config.out_dim
        if self.W1.shape[1] != D or self.Wc.shape[1] != D:
            raise ValueError("head input width must equal encoder width %d" % D)

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    def params(self) -> dict:
        return {k: getattr(self, k) for k in PARAM_NAMES}

    def copy(self) -> "FieldModel":
        return FieldModel(self.config, *(getattr(self, k).copy() for k in PARAM_NAMES), self.transform)

    def n_params(self, heads_only=False) -> int:
        n = sum(getattr(self, k).size for k in PARAM_NAMES[1:])
        return n if heads_only else n + self.tables.size

    def sdf(self, x):
        return forward(self, x)[0]

    def sdf_and_grad(self, x):
        d, g, _ = forward_with_spatial_grad(self, x)
        return d, g

    def evaluate(self, x, spatial_grad: bool = True) -> "Cache":
        return evaluate(self, x, spatial_grad)

    def backward(self, cache, d_up=None, rgb_up=None, grad_up=None, capture=False, tables_out=None):
        return backward(self, cache, d_up, rgb_up, grad_up, capture, tables_out)


def init_model(config: EncoderConfig = EncoderConfig(), hidden_width: int = 64, seed: int = 0,
               transform: SceneTransform | None = None, sphere_radius: float | None = None) -> FieldModel:
    """Xavier-uniform heads, zero biases, output bias set so the initial field is ~0.1.

    Softplus(0) = ln 2, so ``b2`` absorbs ``-ln2 * sum(W2)``; with near-zero
    tables the initial signed distance is then 0.1 everywhere.

    With ``sphere_radius`` the field instead starts as the signed distance to
    a sphere of that radius centred in the unit cube.  Feature 0 of the
    coarsest level holds ``|v - c| - radius`` at every lattice vertex (rows
    shared by colliding vertices get their mean), every hidden unit reads it
    with weight 1, and ``W2 = 2 / H`` gives unit slope at the surface.
    """
    rng = np.random.default_rng(seed)
    D, H = config.out_dim, hidden_width

    def xavier(fan_out, fan_in):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, (fan_out, fan_in))

    tables = enc.init_tables(config, rng)
    W1 = xavier(H, D)
    W2 = xavier(1, H)
    Wc = xavier(3, D)
    if sphere_radius is not None:
        r = config.resolutions()[0]
        v = np.stack(np.meshgrid(*[np.arange(r + 2)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        rows = enc.hash_vertex(v, config.table_size)
        radial = np.linalg.norm(v / r - 0.5, axis=1) - sphere_radius
        total = np.bincount(rows, weights=radial, minlength=config.table_size)
        hits = np.bincount(rows, minlength=config.table_size)
        used = hits > 0
        tables[0, used, 0] = total[used] / hits[used]
        W1[:, 0] = 1.0
        W2[:] = 2.0 / H
        b2 = np.array([-2.0 * np.log(2.0)])
    else:
        b2 = np.array([0.1 - np.log(2.0) * W2.sum()])
    return FieldModel(config, tables, W1, np.zeros(H), W2, b2, Wc, np.zeros(3),
                      transform or SceneTransform())


def softplus(z):
    """Softplus ``ln(1 + e^z)`` and its derivative (the logistic), sharing one exp."""
    e = np.abs(z)
    np.negative(e, out=e)
    np.exp(e, out=e)
    h = np.log1p(e)
    h += np.maximum(z, 0.0)
    sig = 1.0 / (1.0 + e)
    np.multiply(sig, e, out=sig, where=z < 0)
    return h, sig


@dataclass
class Cache:
    """Activations of one batched forward pass, consumed by :func:`backward`."""

    x: np.ndarray
    E: np.ndarray
    J: np.ndarray | None     # (n, 3, D), axis-major encoder Jacobian
    z: np.ndarray
    h: np.ndarray
    sig: np.ndarray
    d: np.ndarray
    grad: np.ndarray | None
    rgb: np.ndarray


def evaluate(model: FieldModel, x, spatial_grad: bool = True) -> Cache:
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    E, J = enc.encode_batch(model.tables, model.config, x, with_jacobian=spatial_grad)
    z = E @ model.W1.T + model.b1
    h, sig = softplus(z)
    d = h @ model.W2[0] + model.b2[0]
    rgb = E @ model.Wc.T + model.bc
    grad = None
    if spatial_grad:
        p = (sig * model.W2[0]) @ model.W1
        grad = np.einsum("nkd,nd->nk", J, p, optimize=False)
    return Cache(x, E, J, z, h, sig, d, grad, rgb)


def _check_finite(*arrays):
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise DivergenceError("non-finite field output; parameters have diverged")


def forward(model: FieldModel, x):
    """Signed distance and raw (unclamped) RGB at one point or a batch."""
    single = np.ndim(x) == 1
    cache = evaluate(model, x, spatial_grad=False)
    _check_finite(cache.d, cache.rgb)
    if single:
        return float(cache.d[0]), cache.rgb[0]
    return cache.d, cache.rgb


def forward_with_spatial_grad(model: FieldModel, x):
    single = np.ndim(x) == 1
    cache = evaluate(model, x, spatial_grad=True)
    _check_finite(cache.d, cache.grad, cache.rgb)
    if single:
        return float(cache.d[0]), cache.grad[0], cache.rgb[0]
    return cache.d, cache.grad, cache.rgb


@dataclass
class LayerStats:
    """Batch K-FAC statistics per head layer.

    ``A[name] = mean(a a^T)`` over homogeneous inputs, ``G[name] = mean((n g)(n g)^T)``
    over pre-activation gradients rescaled to per-sample losses.  Layers that
    also act on input derivatives (the spatial-gradient path) contribute one
    extra pair per axis, with a homogeneous coordinate of 0.
    """

    A: dict
    G: dict
    counts: dict


def _layer_stats(pairs):
    """Pool ``(a, one, g)`` use records into ``(A, G, n)``.

    ``a`` is the raw layer input, ``one`` its homogeneous coordinate (1 for
    a value use, 0 for a derivative use); rows whose ``g`` is all zero
    carry no signal and are dropped.
    """
    n = 0
    A = G = None
    for a, one, g in pairs:
        mask = np.any(g != 0.0, axis=1)
        if not mask.all():
            a, g = a[mask], g[mask]
        if len(a) == 0:
            continue
        a1 = np.empty((len(a), a.shape[1] + 1))
        a1[:, :-1] = a
        a1[:, -1] = one
        pa, pg = a1.T @ a1, g.T @ g
        A = pa if A is None else A + pa
        G = pg if G is None else G + pg
        n += len(a)
    if n == 0:
        return None
    A /= n
    G *= n
    return (A + A.T) / 2, (G + G.T) / 2, n


def backward(model: FieldModel, cache: Cache, d_up=None, rgb_up=None, grad_up=None,
             capture: bool = False, tables_out=None):
    """Parameter gradients of a scalar loss from upstream ``dL/dd``, ``dL/drgb``, ``dL/d(grad d)``.

    Returns ``(grads, stats)``; ``stats`` is a :class:`LayerStats` when
    ``capture`` is set, else None.  Table gradients accumulate into
    ``tables_out`` when given.
    """
    if cache is None:
        raise ValueError("backward needs the cache of a forward pass")
    n = len(cache.d)
    d_up = np.zeros(n) if d_up is None else np.asarray(d_up, dtype=np.float64)
    rgb_up = np.zeros((n, 3)) if rgb_up is None else np.asarray(rgb_up, dtype=np.float64)
    w2 = model.W2[0]

    g = {}
    g["W2"] = (d_up @ cache.h)[None, :]
    g["b2"] = np.array([d_up.sum()])
    g["Wc"] = rgb_up.T @ cache.E
    g["bc"] = rgb_up.sum(axis=0)

    dz = (d_up[:, None] * w2) * cache.sig
    dW1 = np.zeros_like(model.W1)
    p = None
    if grad_up is not None:
        if cache.J is None:
            raise ValueError("grad_up given but the forward pass skipped the spatial gradient")
        grad_up = np.asarray(grad_up, dtype=np.float64)
        q = cache.sig * w2
        p = q @ model.W1
        J = cache.J
        s = J[:, 0] * grad_up[:, :1] + J[:, 1] * grad_up[:, 1:2] + J[:, 2] * grad_up[:, 2:]
        dW1 += q.T @ s
        dq = s @ model.W1.T
        g["W2"] += (cache.sig * dq).sum(axis=0)[None, :]
        dz += cache.sig * (1.0 - cache.sig) * w2 * dq

    dW1 += dz.T @ cache.E
    g["W1"] = dW1
    g["b1"] = dz.sum(axis=0)
    dE = dz @ model.W1 + rgb_up @ model.Wc
    # J is linear in the tables, so the grad_up path scatters (dw . grad_up) * p
    tables_grad = np.zeros_like(model.tables) if tables_out is None else tables_out
    g["tables"] = enc.scatter_batch(model.config, cache.x, dE, tables_grad, p, grad_up)

    stats = None
    if capture:
        # Tangent uses: a layer applied to input derivatives sees the bias as 0.
        geo1 = [(cache.E, 1.0, dz)]
        geo2 = [(cache.h, 1.0, d_up[:, None])]
        if grad_up is not None:
            for k in range(3):
                Jk = cache.J[:, k]
                geo1.append((Jk, 0.0, q * grad_up[:, k:k + 1]))
                geo2.append((cache.sig * (Jk @ model.W1.T), 0.0, grad_up[:, k:k + 1]))
        A, G, counts = {}, {}, {}
        for name, pairs in (("geo1", geo1), ("geo2", geo2), ("color", [(cache.E, 1.0, rgb_up)])):
            res = _layer_stats(pairs)
            if res is not None:
                A[name], G[name], counts[name] = res
        stats = LayerStats(A, G, counts)
    return g, stats
