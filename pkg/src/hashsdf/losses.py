"""Training-batch sampling and the eight loss terms of the composite objective."""

from __future__ import annotations

from dataclasses import dataclass, field, fields

import numpy as np

from . import network as net
from .geometry import PointCloud, SpatialIndex

TERMS = ("sdf", "zero", "eik_surf", "eik_glob", "normal", "sparse", "off", "rgb")
SURFACE_TERMS = ("sdf", "zero", "eik_surf", "normal")
REGULARIZER_TERMS = ("eik_glob", "sparse", "off")
COLOR_TERMS = ("rgb",)


@dataclass
class LossWeights:
    sdf: float = 1.0
    zero: float = 1.0
    eik_surf: float = 0.1
    eik_glob: float = 0.1
    normal: float = 0.5
    sparse: float = 0.01
    off: float = 0.5
    rgb: float = 0.5
    tau: float = 50.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (np.isfinite(v) and v >= 0):
                raise ValueError("loss weight %s must be finite and nonnegative, got %r" % (f.name, v))
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    def weight(self, term: str) -> float:
        return getattr(self, term)


@dataclass
class BatchSizes:
    surface: int = 4096
    noisy: int = 4096
    eik_surf: int = 2048
    free: int = 2048
    off: int = 4096


@dataclass
class LossBatch:
    surf_points: np.ndarray
    surf_normals: np.ndarray
    surf_colors: np.ndarray
    surf_weights: np.ndarray
    noisy_points: np.ndarray
    noisy_targets: np.ndarray
    noisy_weights: np.ndarray
    band_points: np.ndarray
    free_points: np.ndarray
    off_points: np.ndarray
    off_targets: np.ndarray


@dataclass
class LossReport:
    terms: dict
    total: float
    weights: LossWeights = field(repr=False, default_factory=LossWeights)
    normal_skipped: int = 0
    normal_degenerate: bool = False


def _choose(rng, n, k):
    return rng.choice(n, size=k, replace=k > n)


def signed_nn_distance(index: SpatialIndex, normals, x):
    """Distance to the nearest cloud point, signed by that point's normal."""
    idx, dist = index.nearest(x)
    side = np.einsum("ij,ij->i", x - index.points[idx], normals[idx])
    return np.where(side < 0, -dist, dist)


def sample_batch(cloud: PointCloud, index: SpatialIndex, sizes: BatchSizes = BatchSizes(),
                 noise_sigma: float = 0.01, offsets=(-0.1, -0.05, 0.05, 0.1), rng=None) -> LossBatch:
    if len(cloud) == 0:
        raise ValueError("cannot sample from an empty cloud")
    rng = np.random.default_rng() if rng is None else rng
    s = _choose(rng, len(cloud), sizes.surface)
    sp, sn = cloud.positions[s], cloud.normals[s]

    k = _choose(rng, len(s), sizes.noisy)
    noisy = sp[k] + rng.normal(0.0, noise_sigma, (len(k), 3)) if noise_sigma > 0 else sp[k].copy()
    targets = signed_nn_distance(index, cloud.normals, noisy) if noise_sigma > 0 else np.zeros(len(k))

    band = np.flatnonzero(np.abs(targets) <= 2.0 * noise_sigma)
    if len(band) > sizes.eik_surf:
        band = np.sort(rng.choice(band, size=sizes.eik_surf, replace=False))

    free = rng.uniform(0.0, 1.0, (sizes.free, 3))

    offsets = np.asarray(offsets, dtype=np.float64)
    off_all = (sp[None, :, :] + offsets[:, None, None] * sn[None, :, :]).reshape(-1, 3)
    off_t = np.repeat(offsets, len(sp))
    pick = _choose(rng, len(off_all), min(sizes.off, len(off_all))) if len(off_all) else np.zeros(0, int)

    return LossBatch(
        surf_points=sp, surf_normals=sn, surf_colors=cloud.colors[s], surf_weights=cloud.confidence[s],
        noisy_points=noisy, noisy_targets=targets, noisy_weights=cloud.confidence[s][k],
        band_points=noisy[band], free_points=free,
        off_points=off_all[pick], off_targets=off_t[pick],
    )


# Each term returns (value, upstream derivative w.r.t. its input).

def _weighted_sq(d, target, w):
    ws = w.sum()
    if len(d) == 0 or ws <= 0:
        return 0.0, np.zeros_like(d)
    r = d - target
    return float((w * r * r).sum() / ws), 2.0 * w * r / ws


def _zero_term(d, w):
    ws = w.sum()
    if len(d) == 0 or ws <= 0:
        return 0.0, np.zeros_like(d)
    return float((w * np.abs(d)).sum() / ws), w * np.sign(d) / ws


def _eik_term(grad):
    n = len(grad)
    if n == 0:
        return 0.0, np.zeros_like(grad)
    rho = np.linalg.norm(grad, axis=1)
    safe = np.where(rho > 0, rho, 1.0)
    up = (2.0 * (rho - 1.0) / safe / n)[:, None] * grad
    return float(((rho - 1.0) ** 2).mean()), up


def _normal_term(grad, normals):
    rho = np.linalg.norm(grad, axis=1)
    ok = rho >= 1e-8
    skipped = int((~ok).sum())
    up = np.zeros_like(grad)
    m = int(ok.sum())
    if m == 0:
        return 0.0, up, skipped
    nhat = grad[ok] / rho[ok, None]
    c = np.einsum("ij,ij->i", nhat, normals[ok])
    # d c / d grad = (n - c nhat) / rho
    up[ok] = (-2.0 * (1.0 - c) / rho[ok] / m)[:, None] * (normals[ok] - c[:, None] * nhat)
    return float(((1.0 - c) ** 2).mean()), up, skipped


def _sparse_term(d, tau):
    if len(d) == 0:
        return 0.0, np.zeros_like(d)
    e = np.exp(-tau * np.abs(d))
    return float(e.mean()), -tau * np.sign(d) * e / len(d)


def _rgb_term(rgb, target):
    n = len(rgb)
    if n == 0:
        return 0.0, np.zeros_like(rgb)
    r = rgb - target
    return float((r * r).sum(axis=1).mean()), 2.0 * r / n


def _sdf_at(model, x):
    return model.evaluate(x, spatial_grad=False).d


def _grad_at(model, x):
    return model.evaluate(x, spatial_grad=True).grad


def loss_sdf(batch: LossBatch, model) -> float:
    return _weighted_sq(_sdf_at(model, batch.noisy_points), batch.noisy_targets, batch.noisy_weights)[0]


def loss_zero(batch: LossBatch, model) -> float:
    return _zero_term(_sdf_at(model, batch.surf_points), batch.surf_weights)[0]


def loss_eikonal(points, model) -> float:
    return _eik_term(_grad_at(model, points))[0]


def loss_normal(batch: LossBatch, model):
    """Returns ``(value, n_skipped)``; value is 0 when every sample is degenerate."""
    v, _, skipped = _normal_term(_grad_at(model, batch.surf_points), batch.surf_normals)
    return v, skipped


def loss_sparse(points, model, tau: float) -> float:
    return _sparse_term(_sdf_at(model, points), tau)[0]


def loss_off_surface(batch: LossBatch, model) -> float:
    d = _sdf_at(model, batch.off_points)
    return _weighted_sq(d, batch.off_targets, np.ones(len(d)))[0]


def loss_rgb(batch: LossBatch, model) -> float:
    rgb = model.evaluate(batch.surf_points, spatial_grad=False).rgb
    return _rgb_term(rgb, batch.surf_colors)[0]


class _Group:
    """Concatenated query points sharing one forward/backward pass."""

    def __init__(self):
        self.chunks = []

    def add(self, points):
        start = sum(len(c) for c in self.chunks)
        self.chunks.append(points)
        return slice(start, start + len(points))

    def points(self):
        return np.concatenate(self.chunks) if self.chunks else np.zeros((0, 3))


def composite_loss(batch: LossBatch, model, weights: LossWeights = LossWeights(), capture: bool = False):
    """Weighted sum of all terms, with exact parameter gradients.

    Returns ``(report, grads, stats)``.  Terms with weight 0 are neither
    evaluated nor differentiated.
    """
    W = weights
    grad_group, value_group = _Group(), _Group()
    need_surf_grad = W.normal > 0
    use_surf = W.zero > 0 or W.normal > 0 or W.rgb > 0
    sl = {}
    if use_surf:
        g = grad_group if need_surf_grad else value_group
        sl["surf"] = (g, g.add(batch.surf_points))
    if W.eik_surf > 0:
        sl["band"] = (grad_group, grad_group.add(batch.band_points))
    if W.eik_glob > 0 or W.sparse > 0:
        g = grad_group if W.eik_glob > 0 else value_group
        sl["free"] = (g, g.add(batch.free_points))
    if W.sdf > 0:
        sl["noisy"] = (value_group, value_group.add(batch.noisy_points))
    if W.off > 0:
        sl["off"] = (value_group, value_group.add(batch.off_points))

    passes = {}
    for grp, spatial in ((grad_group, True), (value_group, False)):
        if grp.chunks:
            pts = grp.points()
            cache = model.evaluate(pts, spatial_grad=spatial)
            n = len(pts)
            passes[id(grp)] = (cache, np.zeros(n), np.zeros((n, 3)), np.zeros((n, 3)) if spatial else None)

    terms = {t: 0.0 for t in TERMS}
    report_extra = {"normal_skipped": 0, "normal_degenerate": False}

    def view(key):
        grp, s = sl[key]
        cache, d_up, rgb_up, g_up = passes[id(grp)]
        return s, cache, d_up, rgb_up, g_up

    if "surf" in sl:
        s, cache, d_up, rgb_up, g_up = view("surf")
        if W.zero > 0:
            terms["zero"], up = _zero_term(cache.d[s], batch.surf_weights)
            d_up[s] += W.zero * up
        if W.normal > 0:
            terms["normal"], up, skipped = _normal_term(cache.grad[s], batch.surf_normals)
            g_up[s] += W.normal * up
            report_extra["normal_skipped"] = skipped
            report_extra["normal_degenerate"] = skipped == len(batch.surf_points) and skipped > 0
        if W.rgb > 0:
            terms["rgb"], up = _rgb_term(cache.rgb[s], batch.surf_colors)
            rgb_up[s] += W.rgb * up
    if "band" in sl:
        s, cache, _, _, g_up = view("band")
        terms["eik_surf"], up = _eik_term(cache.grad[s])
        g_up[s] += W.eik_surf * up
    if "free" in sl:
        s, cache, d_up, _, g_up = view("free")
        if W.eik_glob > 0:
            terms["eik_glob"], up = _eik_term(cache.grad[s])
            g_up[s] += W.eik_glob * up
        if W.sparse > 0:
            terms["sparse"], up = _sparse_term(cache.d[s], W.tau)
            d_up[s] += W.sparse * up
    if "noisy" in sl:
        s, cache, d_up, _, _ = view("noisy")
        terms["sdf"], up = _weighted_sq(cache.d[s], batch.noisy_targets, batch.noisy_weights)
        d_up[s] += W.sdf * up
    if "off" in sl:
        s, cache, d_up, _, _ = view("off")
        terms["off"], up = _weighted_sq(cache.d[s], batch.off_targets, np.ones(s.stop - s.start))
        d_up[s] += W.off * up

    for v in terms.values():
        if not np.isfinite(v):
            raise net.DivergenceError("non-finite loss term")
    total = float(sum(W.weight(t) * terms[t] for t in TERMS))

    grads = {k: np.zeros_like(v) for k, v in model.params().items()}
    stats_list = []
    for cache, d_up, rgb_up, g_up in passes.values():
        g, st = model.backward(cache, d_up, rgb_up, g_up, capture=capture, tables_out=grads.get("tables"))
        for k in grads:
            if k != "tables":
                grads[k] += g[k]
        if st is not None:
            stats_list.append(st)
    stats = _merge_stats(stats_list) if capture else None
    return LossReport(terms, total, W, **report_extra), grads, stats


def _merge_stats(stats_list):
    """Pool per-pass statistics.

    Each pass stores ``A = sum(a a^T) / n`` and ``G = n * sum(g g^T)``; the
    pooled factors use the same convention over all ``m + n`` samples.
    """
    A, G, counts = {}, {}, {}
    for st in stats_list:
        for name in st.A:
            n = st.counts[name]
            if name not in A:
                A[name], G[name], counts[name] = st.A[name], st.G[name], n
                continue
            m = counts[name]
            A[name] = (A[name] * m + st.A[name] * n) / (m + n)
            G[name] = (G[name] / m + st.G[name] / n) * (m + n)
            counts[name] = m + n
    return net.LayerStats(A, G, counts)
