"""Point clouds, scene normalization, nearest-neighbour index and analytic shapes.

Sign convention throughout the package: signed distance is negative inside,
positive outside, and normals point outward.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .plyio import PlyError, read_ply, write_ply

log = logging.getLogger(__name__)


class EmptyCloudError(ValueError):
    """No points survived confidence filtering."""


class DegenerateCloudError(ValueError):
    """The cloud has zero spatial extent."""


@dataclass(frozen=True)
class PointCloud:
    positions: np.ndarray   # (n, 3)
    normals: np.ndarray     # (n, 3), unit length
    colors: np.ndarray      # (n, 3) in [0, 1]
    confidence: np.ndarray  # (n,) in [0, 1]

    def __post_init__(self):
        n = len(self.positions)
        for name in ("normals", "colors"):
            if getattr(self, name).shape != (n, 3):
                raise ValueError("%s has shape %s, expected (%d, 3)"
                                 % (name, getattr(self, name).shape, n))
        if self.confidence.shape != (n,):
            raise ValueError("confidence has shape %s, expected (%d,)" % (self.confidence.shape, n))

    def __len__(self):
        return len(self.positions)

    def subset(self, mask_or_idx) -> "PointCloud":
        return PointCloud(self.positions[mask_or_idx], self.normals[mask_or_idx],
                          self.colors[mask_or_idx], self.confidence[mask_or_idx])


@dataclass(frozen=True)
class SceneTransform:
    """Uniform scale + translation: ``normalized = scale * raw + offset``."""

    scale: float = 1.0
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not (np.isfinite(self.scale) and self.scale > 0):
            raise ValueError("scale must be positive and finite, got %r" % self.scale)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) * self.scale + self.offset

    def invert(self, points):
        return (np.asarray(points, dtype=np.float64) - self.offset) / self.scale


def _estimate_normals(points, k=12):
    """PCA normals oriented away from the centroid."""
    tree = cKDTree(points)
    k = min(k, len(points))
    _, nbr = tree.query(points, k=k)
    nbr = nbr.reshape(len(points), k)
    local = points[nbr] - points[nbr].mean(axis=1, keepdims=True)
    cov = np.einsum("nki,nkj->nij", local, local)
    _, vecs = np.linalg.eigh(cov)
    normals = vecs[:, :, 0]
    outward = points - points.mean(axis=0)
    flip = np.einsum("ij,ij->i", normals, outward) < 0
    normals[flip] *= -1
    return normals


def _column(props, names):
    if all(n in props for n in names):
        return np.stack([np.asarray(props[n], dtype=np.float64) for n in names], axis=1)
    return None


def load_point_cloud(path, conf_threshold: float = 0.5) -> PointCloud:
    """Read a PLY cloud and drop points with confidence below ``conf_threshold``.

    Missing confidence defaults to 1.0, missing colors to mid-grey. Normals
    that are absent or zero are re-estimated from local PCA.
    """
    data = read_ply(path)
    if "vertex" not in data:
        raise PlyError("%s: no 'vertex' element" % path)
    props = data["vertex"]
    pos = _column(props, ("x", "y", "z"))
    if pos is None:
        raise PlyError("%s: vertex element lacks x/y/z" % path)
    n = len(pos)

    colors = None
    if all(k in props for k in ("red", "green", "blue")):
        colors = _column(props, ("red", "green", "blue"))
        if props["red"].dtype == np.uint8:
            colors = colors / 255.0
    elif all(k in props for k in ("r", "g", "b")):
        colors = _column(props, ("r", "g", "b"))
    if colors is None:
        colors = np.full((n, 3), 0.5)
    colors = np.clip(colors, 0.0, 1.0)

    conf = np.asarray(props["confidence"], dtype=np.float64) if "confidence" in props else np.ones(n)
    conf = np.clip(conf, 0.0, 1.0)

    normals = _column(props, ("nx", "ny", "nz"))
    keep = conf >= conf_threshold
    log.info("%s: %d points, %d kept at confidence >= %g", path, n, int(keep.sum()), conf_threshold)
    if not keep.any():
        raise EmptyCloudError("no points left after filtering %d points at confidence >= %g; "
                              "threshold too aggressive" % (n, conf_threshold))
    pos, colors, conf = pos[keep], colors[keep], conf[keep]

    if normals is None:
        normals = _estimate_normals(pos)
    else:
        normals = normals[keep]
        norm = np.linalg.norm(normals, axis=1)
        bad = ~(norm > 1e-12)
        if bad.any():
            normals[bad] = _estimate_normals(pos)[bad] if len(pos) >= 3 else [0.0, 0.0, 1.0]
            norm = np.linalg.norm(normals, axis=1)
        normals = normals / norm[:, None]
    return PointCloud(pos, normals, colors, conf)


def save_point_cloud(path, cloud: PointCloud):
    rgb = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
    write_ply(path, {
        "x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
        "nx": cloud.normals[:, 0], "ny": cloud.normals[:, 1], "nz": cloud.normals[:, 2],
        "red": rgb[:, 0], "green": rgb[:, 1], "blue": rgb[:, 2],
        "confidence": cloud.confidence,
    })


def normalize_cloud(cloud: PointCloud, margin: float = 0.1):
    """Fit the cloud into ``[margin, 1 - margin]^3``, centred, by uniform scaling."""
    if len(cloud) == 0:
        raise EmptyCloudError("cannot normalize an empty cloud")
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    extent = float((hi - lo).max())
    if not extent > 0:
        raise DegenerateCloudError("cloud has zero extent")
    scale = (1.0 - 2.0 * margin) / extent
    offset = 0.5 - scale * (lo + hi) / 2.0
    tf = SceneTransform(scale, offset)
    return PointCloud(tf.apply(cloud.positions), cloud.normals, cloud.colors, cloud.confidence), tf


class SpatialIndex:
    """Balanced k-d tree (median splits, leaf size 16) over a point set.

    Ties are resolved towards the lowest stored index.
    """

    def __init__(self, points):
        self.points = np.ascontiguousarray(points, dtype=np.float64)
        if len(self.points) == 0:
            raise ValueError("SpatialIndex needs at least one point")
        self._tree = cKDTree(self.points, leafsize=16, balanced_tree=True, compact_nodes=True)

    def __len__(self):
        return len(self.points)

    def nearest(self, queries):
        """Return ``(index, distance)`` arrays for one (3,) or many (m, 3) queries."""
        q = np.asarray(queries, dtype=np.float64)
        single = q.ndim == 1
        q = np.atleast_2d(q)
        if len(self.points) == 1:
            idx = np.zeros(len(q), dtype=np.int64)
        else:
            dist2, idx2 = self._tree.query(q, k=2)
            idx = idx2[:, 0].astype(np.int64)
            tied = dist2[:, 1] <= dist2[:, 0]
            for i in np.flatnonzero(tied):
                r = dist2[i, 0]
                cand = np.asarray(self._tree.query_ball_point(q[i], r * (1 + 1e-9) + 1e-300), dtype=np.int64)
                dd = np.linalg.norm(self.points[cand] - q[i], axis=1)
                idx[i] = cand[dd == dd.min()].min()
        dist = np.linalg.norm(self.points[idx] - q, axis=1)
        if single:
            return int(idx[0]), float(dist[0])
        return idx, dist


def nearest(index: SpatialIndex, q):
    return index.nearest(q)


@dataclass(frozen=True)
class AnalyticShape:
    """Sphere, torus (around z) or box, centred at the origin.

    params: sphere ``(radius,)``; torus ``(major, minor)``; box ``(hx, hy, hz)``.
    """

    kind: str
    params: tuple

    def __post_init__(self):
        p = tuple(float(v) for v in self.params)
        object.__setattr__(self, "params", p)
        want = {"sphere": 1, "torus": 2, "box": 3}
        if self.kind not in want:
            raise ValueError("unknown shape kind %r (expected sphere, torus or box)" % self.kind)
        if len(p) != want[self.kind]:
            raise ValueError("%s takes %d parameters, got %d" % (self.kind, want[self.kind], len(p)))
        if not all(np.isfinite(v) and v > 0 for v in p):
            raise ValueError("%s parameters must be positive, got %s" % (self.kind, p))
        if self.kind == "torus" and p[1] >= p[0]:
            raise ValueError("torus minor radius must be smaller than the major radius")

    def sdf(self, q):
        q = np.asarray(q, dtype=np.float64)
        if self.kind == "sphere":
            return np.linalg.norm(q, axis=-1) - self.params[0]
        if self.kind == "torus":
            R, r = self.params
            ring = np.hypot(q[..., 0], q[..., 1]) - R
            return np.hypot(ring, q[..., 2]) - r
        d = np.abs(q) - np.asarray(self.params)
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        return outside + np.minimum(d.max(axis=-1), 0.0)

    def gradient(self, q):
        """Analytic gradient of :meth:`sdf` (unit length away from the medial axis)."""
        q = np.asarray(q, dtype=np.float64)
        if self.kind == "sphere":
            return q / np.linalg.norm(q, axis=-1, keepdims=True)
        if self.kind == "torus":
            R, _ = self.params
            rho = np.hypot(q[..., 0], q[..., 1])
            ring = rho - R
            tube = np.hypot(ring, q[..., 2])
            radial = ring / tube
            return np.stack([radial * q[..., 0] / rho, radial * q[..., 1] / rho, q[..., 2] / tube], axis=-1)
        b = np.asarray(self.params)
        d = np.abs(q) - b
        s = np.where(q < 0, -1.0, 1.0)
        pos = np.maximum(d, 0.0)
        pn = np.linalg.norm(pos, axis=-1, keepdims=True)
        outside = pos / np.where(pn > 0, pn, 1.0)
        inside = np.zeros_like(d)
        np.put_along_axis(inside, d.argmax(axis=-1)[..., None], 1.0, axis=-1)
        return s * np.where(pn > 0, outside, inside)

    def bounds(self):
        if self.kind == "sphere":
            h = np.full(3, self.params[0])
        elif self.kind == "torus":
            R, r = self.params
            h = np.array([R + r, R + r, r])
        else:
            h = np.asarray(self.params)
        return -h, h


def analytic_sdf(shape: AnalyticShape, q):
    return shape.sdf(q)


def procedural_color(points):
    """Smooth position-derived RGB in [0.1, 0.9] used for synthetic clouds."""
    return 0.5 + 0.4 * np.tanh(3.0 * np.asarray(points, dtype=np.float64))


def _sample_surface(shape, n, rng):
    if shape.kind == "sphere":
        v = rng.standard_normal((n, 3))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        return shape.params[0] * v, v
    if shape.kind == "torus":
        R, r = shape.params
        theta = np.empty(0)
        while len(theta) < n:
            t = rng.uniform(0, 2 * np.pi, 2 * n)
            accept = rng.uniform(0, 1, 2 * n) < (R + r * np.cos(t)) / (R + r)
            theta = np.concatenate([theta, t[accept]])
        theta = theta[:n]
        phi = rng.uniform(0, 2 * np.pi, n)
        nrm = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), np.sin(theta)], axis=1)
        centre = np.stack([R * np.cos(phi), R * np.sin(phi), np.zeros(n)], axis=1)
        return centre + r * nrm, nrm
    hx, hy, hz = shape.params
    areas = np.array([hy * hz, hy * hz, hx * hz, hx * hz, hx * hy, hx * hy])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    uv = rng.uniform(-1, 1, (n, 2))
    b = np.array([hx, hy, hz])
    pts = np.empty((n, 3))
    nrm = np.zeros((n, 3))
    for f in range(6):
        m = face == f
        axis, sign = f // 2, (1.0 if f % 2 == 0 else -1.0)
        others = [a for a in range(3) if a != axis]
        pts[m, axis] = sign * b[axis]
        pts[m, others[0]] = uv[m, 0] * b[others[0]]
        pts[m, others[1]] = uv[m, 1] * b[others[1]]
        nrm[m, axis] = sign
    return pts, nrm


def synthesize_cloud(shape: AnalyticShape, n: int, noise_sigma: float = 0.0, seed: int = 0) -> PointCloud:
    """Sample ``n`` points uniformly by area with analytic normals and procedural colors."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be nonnegative")
    rng = np.random.default_rng(seed)
    pts, nrm = _sample_surface(shape, n, rng)
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, pts.shape)
    return PointCloud(pts, nrm, procedural_color(pts), np.ones(n))


@dataclass(frozen=True)
class AnalyticField:
    """An analytic shape expressed in normalized coordinates.

    ``sdf(x) = scale * shape.sdf(invert(x))`` keeps distances in normalized
    units; the gradient is unchanged by the uniform scaling.
    """

    shape: AnalyticShape
    transform: SceneTransform = field(default_factory=SceneTransform)

    def sdf(self, x):
        return self.transform.scale * self.shape.sdf(self.transform.invert(x))

    def sdf_and_grad(self, x):
        q = self.transform.invert(x)
        return self.transform.scale * self.shape.sdf(q), self.shape.gradient(q)
