"""Multi-resolution hash-grid encoder with analytic Jacobians.

Tables are stored as one ``(L, T, F)`` array.  Two code paths compute the
same quantities: compiled per-point kernels (:func:`encode_batch`,
:func:`scatter_batch`) used for training, and a vectorised numpy path
(:func:`corners`, :func:`gather`, :func:`interpolate`) kept as a readable
reference that the tests check the kernels against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from numba import njit

PRIMES = (1, 2654435761, 805459861)

# corner c has offset bit k = (c >> k) & 1 along axis k
_OFFSETS = np.array([[(c >> k) & 1 for k in range(3)] for c in range(8)], dtype=np.int64)


@dataclass(frozen=True)
class EncoderConfig:
    levels: int = 10
    features: int = 4
    table_size: int = 2 ** 16
    base_resolution: int = 14
    per_level_scale: float = 1.5

    def __post_init__(self):
        if self.levels < 1 or self.features < 1:
            raise ValueError("levels and features must be >= 1")
        if self.table_size < 1 or self.table_size & (self.table_size - 1):
            raise ValueError("table_size must be a power of two, got %d" % self.table_size)
        if self.base_resolution < 2:
            raise ValueError("base_resolution must be >= 2")
        if not self.per_level_scale > 1:
            raise ValueError("per_level_scale must be > 1")

    @property
    def out_dim(self) -> int:
        return self.levels * self.features

    @property
    def n_params(self) -> int:
        return self.levels * self.table_size * self.features

    def resolutions(self) -> np.ndarray:
        return np.array([level_resolution(self, l) for l in range(1, self.levels + 1)], dtype=np.int64)


def level_resolution(config: EncoderConfig, level: int) -> int:
    """Grid resolution of 1-based ``level``: ``floor(R_base * s**(level - 1))``."""
    if not 1 <= level <= config.levels:
        raise ValueError("level must be in [1, %d], got %d" % (config.levels, level))
    return int(math.floor(config.base_resolution * config.per_level_scale ** (level - 1)))


def hash_vertex(v, table_size: int):
    """Spatial hash of integer vertex coordinates ``v[..., 3]`` into ``[0, table_size)``."""
    v = np.asarray(v, dtype=np.int64).astype(np.uint32)
    h = v[..., 0] * np.uint32(PRIMES[0])
    h ^= v[..., 1] * np.uint32(PRIMES[1])
    h ^= v[..., 2] * np.uint32(PRIMES[2])
    h = (h & np.uint32(table_size - 1)).astype(np.int64)
    return int(h) if h.ndim == 0 else h


def init_tables(config: EncoderConfig, rng) -> np.ndarray:
    return rng.uniform(-1e-4, 1e-4, (config.levels, config.table_size, config.features))


class Corners(NamedTuple):
    """Hashed voxel corners of a batch of queries.

    idx: (n, L, 8) rows of the flattened ``(L*T, F)`` table.
    w:   (n, L, 8) trilinear weights.
    dw:  (n, L, 8, 3) derivative of each weight w.r.t. the query point, or None.
    """

    idx: np.ndarray
    w: np.ndarray
    dw: np.ndarray | None


def corners(config: EncoderConfig, x, with_grad: bool = False) -> Corners:
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    inside = (x >= 0.0) & (x <= 1.0)
    xc = np.clip(x, 0.0, 1.0)
    res = config.resolutions().astype(np.float64)
    u = xc[:, None, :] * res[None, :, None]                       # (n, L, 3)
    base = np.floor(u)
    delta = u - base
    verts = base.astype(np.int64)[:, :, None, :] + _OFFSETS     # (n, L, 8, 3)
    idx = hash_vertex(verts, config.table_size)
    idx += (np.arange(config.levels, dtype=np.int64) * config.table_size)[None, :, None]

    bit = _OFFSETS.astype(bool)                                   # (8, 3)
    d = delta[:, :, None, :]
    axis_w = np.where(bit, d, 1.0 - d)                            # (n, L, 8, 3)
    w = axis_w[..., 0] * axis_w[..., 1] * axis_w[..., 2]
    dw = None
    if with_grad:
        sign = np.where(bit, 1.0, -1.0)
        dw = np.stack([
            sign[:, 0] * axis_w[..., 1] * axis_w[..., 2],
            sign[:, 1] * axis_w[..., 0] * axis_w[..., 2],
            sign[:, 2] * axis_w[..., 0] * axis_w[..., 1],
        ], axis=-1)
        # chain through u = r * x; clamped axes have zero derivative
        dw *= res[None, :, None, None] * inside[:, None, None, :]
    return Corners(idx, w, dw)


def gather(tables: np.ndarray, c: Corners) -> np.ndarray:
    """Corner embeddings, shape (n, L, 8, F)."""
    return tables.reshape(-1, tables.shape[-1])[c.idx]


def interpolate(rows: np.ndarray, c: Corners) -> np.ndarray:
    n, L, _, F = rows.shape
    return np.einsum("nlc,nlcf->nlf", c.w, rows).reshape(n, L * F)


def interpolate_jacobian(rows: np.ndarray, c: Corners) -> np.ndarray:
    n, L, _, F = rows.shape
    return np.einsum("nlck,nlcf->nlfk", c.dw, rows).reshape(n, L * F, 3)


@dataclass
class EncodedFeature:
    feature: np.ndarray            # (n, L*F) or (L*F,)
    jacobian: np.ndarray | None    # (n, L*F, 3) or (L*F, 3): d feature / d x


def encode(tables, config: EncoderConfig, x) -> EncodedFeature:
    single = np.ndim(x) == 1
    feat, _ = encode_batch(tables, config, x)
    return EncodedFeature(feat[0] if single else feat, None)


def encode_with_jacobian(tables, config: EncoderConfig, x) -> EncodedFeature:
    single = np.ndim(x) == 1
    feat, jac = encode_batch(tables, config, x, with_jacobian=True)
    jac = jac.transpose(0, 2, 1)
    if single:
        return EncodedFeature(feat[0], jac[0])
    return EncodedFeature(feat, jac)


def scatter_rows(c: Corners, row_grads: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Accumulate per-corner gradients (n, L, 8, F) into ``out`` (L, T, F).

    Colliding corners sum.
    """
    flat = out.reshape(-1, out.shape[-1])
    ids = c.idx.ravel()
    vals = row_grads.reshape(-1, flat.shape[1])
    for f in range(flat.shape[1]):
        flat[:, f] += np.bincount(ids, weights=vals[:, f], minlength=flat.shape[0])
    return out


def scatter_feature_grad(tables, config: EncoderConfig, x, upstream, out=None) -> np.ndarray:
    """Gradient of a scalar loss w.r.t. the tables, given ``dloss/dfeature``."""
    if out is None:
        out = np.zeros_like(tables)
    return scatter_batch(config, x, np.atleast_2d(upstream), out)


@njit(cache=True)
def _encode_kernel(x, tables, res, want_jac, E, J):
    n = x.shape[0]
    L, T, F = tables.shape
    mask = T - 1
    xc = np.empty(3)
    inside = np.empty(3)
    base = np.empty(3, dtype=np.int64)
    d = np.empty(3)
    for i in range(n):
        for k in range(3):
            v = x[i, k]
            inside[k] = 1.0 if (v >= 0.0 and v <= 1.0) else 0.0
            xc[k] = min(max(v, 0.0), 1.0)
        for l in range(L):
            r = res[l]
            for k in range(3):
                u = xc[k] * r
                b = np.floor(u)
                base[k] = np.int64(b)
                d[k] = u - b
            for c in range(8):
                bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                h = ((base[0] + bx) * 1) ^ ((base[1] + by) * 2654435761) ^ ((base[2] + bz) * 805459861)
                h &= mask
                wx = d[0] if bx else 1.0 - d[0]
                wy = d[1] if by else 1.0 - d[1]
                wz = d[2] if bz else 1.0 - d[2]
                w = wx * wy * wz
                for f in range(F):
                    E[i, l * F + f] += w * tables[l, h, f]
                if want_jac:
                    gx = (1.0 if bx else -1.0) * wy * wz * r * inside[0]
                    gy = (1.0 if by else -1.0) * wx * wz * r * inside[1]
                    gz = (1.0 if bz else -1.0) * wx * wy * r * inside[2]
                    for f in range(F):
                        t = tables[l, h, f]
                        J[i, 0, l * F + f] += gx * t
                        J[i, 1, l * F + f] += gy * t
                        J[i, 2, l * F + f] += gz * t


@njit(cache=True)
def _scatter_kernel(x, res, dE, p, grad_up, use_grad, out):
    n = x.shape[0]
    L, T, F = out.shape
    mask = T - 1
    xc = np.empty(3)
    inside = np.empty(3)
    base = np.empty(3, dtype=np.int64)
    d = np.empty(3)
    for i in range(n):
        for k in range(3):
            v = x[i, k]
            inside[k] = 1.0 if (v >= 0.0 and v <= 1.0) else 0.0
            xc[k] = min(max(v, 0.0), 1.0)
        for l in range(L):
            r = res[l]
            for k in range(3):
                u = xc[k] * r
                b = np.floor(u)
                base[k] = np.int64(b)
                d[k] = u - b
            for c in range(8):
                bx, by, bz = c & 1, (c >> 1) & 1, (c >> 2) & 1
                h = ((base[0] + bx) * 1) ^ ((base[1] + by) * 2654435761) ^ ((base[2] + bz) * 805459861)
                h &= mask
                wx = d[0] if bx else 1.0 - d[0]
                wy = d[1] if by else 1.0 - d[1]
                wz = d[2] if bz else 1.0 - d[2]
                w = wx * wy * wz
                coef = 0.0
                if use_grad:
                    coef = ((1.0 if bx else -1.0) * wy * wz * inside[0] * grad_up[i, 0]
                            + (1.0 if by else -1.0) * wx * wz * inside[1] * grad_up[i, 1]
                            + (1.0 if bz else -1.0) * wx * wy * inside[2] * grad_up[i, 2]) * r
                for f in range(F):
                    g = w * dE[i, l * F + f]
                    if use_grad:
                        g += coef * p[i, l * F + f]
                    out[l, h, f] += g


def encode_batch(tables, config: EncoderConfig, x, with_jacobian: bool = False):
    """Compiled batch encode.  Returns ``(E, J)``; ``J`` is None unless requested.

    ``J`` is laid out axis-major, shape (n, 3, L*F), so that contractions
    with per-point 3-vectors are three vectorised passes.
    """
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    n, D = len(x), config.out_dim
    E = np.zeros((n, D))
    J = np.zeros((n, 3, D)) if with_jacobian else np.zeros((0, 3, D))
    _encode_kernel(x, np.ascontiguousarray(tables), config.resolutions().astype(np.float64),
                   with_jacobian, E, J)
    return E, (J if with_jacobian else None)


def scatter_batch(config: EncoderConfig, x, dE, out, p=None, grad_up=None):
    """Accumulate table gradients into ``out`` (L, T, F).

    Every corner row receives ``w * dE_level``; when ``p`` and ``grad_up``
    are given it also receives ``(dw . grad_up) * p_level``, the gradient
    through the encoder Jacobian of a loss on ``J^T p``.
    """
    x = np.ascontiguousarray(np.atleast_2d(x), dtype=np.float64)
    use_grad = p is not None
    if not use_grad:
        p = np.zeros((0, 0))
        grad_up = np.zeros((0, 3))
    _scatter_kernel(x, config.resolutions().astype(np.float64), np.ascontiguousarray(dE, dtype=np.float64),
                    np.ascontiguousarray(p, dtype=np.float64), np.ascontiguousarray(grad_up, dtype=np.float64),
                    use_grad, out)
    return out
