"""Surface metrics (Chamfer, normal angle error), SDF error and similarity alignment."""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field

import numpy as np

from .geometry import SpatialIndex

log = logging.getLogger(__name__)


class DegenerateCorrespondenceError(ValueError):
    """Correspondences are too few or collinear to fix a similarity."""


@dataclass(frozen=True)
class SurfaceSamples:
    points: np.ndarray   # (n, 3)
    normals: np.ndarray  # (n, 3), unit

    def __len__(self):
        return len(self.points)


def sample_surface(mesh, n: int = 200_000, seed: int = 0) -> SurfaceSamples:
    """Area-weighted triangle choice with uniform barycentric points.

    Normals come from the triangle planes, so they follow the mesh winding.
    """
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    rng = np.random.default_rng(seed)
    v = mesh.vertices[mesh.faces]
    cross = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    area = np.linalg.norm(cross, axis=1)
    tri = rng.choice(len(area), size=n, p=area / area.sum())
    r1 = np.sqrt(rng.uniform(size=n))
    r2 = rng.uniform(size=n)
    a = v[tri]
    pts = (1 - r1)[:, None] * a[:, 0] + (r1 * (1 - r2))[:, None] * a[:, 1] + (r1 * r2)[:, None] * a[:, 2]
    return SurfaceSamples(pts, cross[tri] / area[tri, None])


def _nn_sq(src, dst_index: SpatialIndex):
    idx, _ = dst_index.nearest(src)
    return np.sum((src - dst_index.points[idx]) ** 2, axis=1), idx


def chamfer(P, G) -> float:
    """``mean_p min_g |p-g|^2 + mean_g min_p |g-p|^2`` (squared distances, no root)."""
    p = np.asarray(getattr(P, "points", P), dtype=np.float64)
    g = np.asarray(getattr(G, "points", G), dtype=np.float64)
    a, _ = _nn_sq(p, SpatialIndex(g))
    b, _ = _nn_sq(g, SpatialIndex(p))
    return float(a.mean() + b.mean())


def normal_angle_error(P: SurfaceSamples, G: SurfaceSamples) -> float:
    """Mean angle in degrees between each ``p``'s normal and its nearest ``g``'s normal."""
    _, idx = _nn_sq(np.asarray(P.points, dtype=np.float64), SpatialIndex(G.points))
    a, b = P.normals, G.normals[idx]
    # atan2 form stays exact for parallel normals, where arccos loses ~1e-8 rad
    ang = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.sum(a * b, axis=1))
    return float(np.degrees(ang).mean())


@dataclass(frozen=True)
class SimilarityTransform:
    """``x -> scale * R x + t``."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def apply(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) @ self.rotation.T + self.translation

    def rotate(self, n):
        return np.asarray(n, dtype=np.float64) @ self.rotation.T


def rotation_angle_deg(R) -> float:
    return float(np.degrees(np.arccos(np.clip((np.trace(R) - 1) / 2, -1.0, 1.0))))


def umeyama(src, dst, scale: float | None = None) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst``.

    Closed form from the SVD of the cross-covariance, with the reflection
    guard; the scale is the variance ratio unless ``scale`` is given, in
    which case only the rotation and translation are fitted.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ValueError("src and dst must both be (n, 3), got %s and %s" % (src.shape, dst.shape))
    n = len(src)
    if n < 3:
        raise DegenerateCorrespondenceError("need at least 3 correspondences, got %d" % n)
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    var_s = np.sum(xs ** 2) / n
    sv_src = np.linalg.svd(xs, compute_uv=False)
    if var_s == 0 or sv_src[1] <= 1e-12 * sv_src[0]:
        raise DegenerateCorrespondenceError("source points are collinear or coincident")
    cov = xd.T @ xs / n
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    s = float(np.trace(np.diag(D) @ S) / var_s) if scale is None else float(scale)
    t = mu_d - s * R @ mu_s
    return SimilarityTransform(s, R, t)


@dataclass
class IcpResult:
    transform: SimilarityTransform
    residuals: list      # RMS nearest-neighbour distance before each iteration and at the end
    iterations: int

    @property
    def residual(self) -> float:
        return self.residuals[-1]


def icp_refine(src, dst, init: SimilarityTransform | None = None, max_iters: int = 50,
               tol: float = 1e-10) -> IcpResult:
    """Point-to-point ICP with the scale frozen at ``init.scale``.

    Each iteration matches every transformed source point to its nearest
    destination point and refits rotation and translation.  Both steps can
    only lower the summed squared distance, so the residual sequence is
    non-increasing; the loop stops when it improves by less than ``tol``.
    """
    src = np.asarray(src, dtype=np.float64)
    index = SpatialIndex(dst)
    tf = init or SimilarityTransform()

    def rms(t):
        sq, idx = _nn_sq(t.apply(src), index)
        return float(np.sqrt(sq.mean())), idx

    res, idx = rms(tf)
    residuals = [res]
    it = 0
    while it < max_iters:
        it += 1
        cand = umeyama(src, index.points[idx], scale=tf.scale)
        new, new_idx = rms(cand)
        if new > res:
            break  # rounding; keep the better transform
        tf, idx = cand, new_idx
        residuals.append(new)
        if res - new < tol:
            break
        res = new
    return IcpResult(tf, residuals, it)


def sdf_field_rmse(field, oracle, n_probe: int = 20_000, band: float = 0.3, seed: int = 0,
                   bounds=(0.0, 1.0)) -> float:
    """RMS of ``field.sdf - oracle.sdf`` over uniform probes with ``|oracle| <= band``.

    Probes are drawn in ``bounds`` (normalized coordinates) and rejected
    outside the band until ``n_probe`` remain.
    """
    rng = np.random.default_rng(seed)
    kept, total = [], 0
    for _ in range(1000):
        x = rng.uniform(bounds[0], bounds[1], (max(n_probe, 1024), 3))
        x = x[np.abs(oracle.sdf(x)) <= band]
        kept.append(x)
        total += len(x)
        if total >= n_probe:
            break
    else:
        raise ValueError("band %g too thin to collect %d probes" % (band, n_probe))
    x = np.concatenate(kept)[:n_probe]
    err = np.asarray(field.sdf(x)) - oracle.sdf(x)
    return float(np.sqrt(np.mean(err ** 2)))


def read_landmarks(path):
    """Parse ``sx sy sz dx dy dz`` lines (``#`` comments) into (src, dst) arrays."""
    src, dst = [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            try:
                vals = [float(v) for v in text.split()]
            except ValueError:
                raise ValueError("%s:%d: non-numeric landmark value" % (path, lineno)) from None
            if len(vals) != 6 or not np.all(np.isfinite(vals)):
                raise ValueError("%s:%d: expected 6 finite numbers, got %d" % (path, lineno, len(vals)))
            src.append(vals[:3])
            dst.append(vals[3:])
    if len(src) < 3:
        raise ValueError("%s: need at least 3 landmark pairs, got %d" % (path, len(src)))
    return np.array(src), np.array(dst)


@dataclass(frozen=True)
class MetricReport:
    cd: float
    nae_deg: float
    n_pred: int
    n_gt: int
    icp_residual: float

    COLUMNS = ("cd", "nae_deg", "n_pred", "n_gt", "icp_residual")

    def row(self):
        return [repr(self.cd), repr(self.nae_deg), self.n_pred, self.n_gt, repr(self.icp_residual)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(self.COLUMNS)
        w.writerow(self.row())
        return buf.getvalue()


def evaluate_meshes(pred, gt, n: int = 200_000, seed: int = 0, landmarks=None, icp: bool = True,
                    icp_points: int = 5000, icp_iters: int = 30) -> MetricReport:
    """Align ``pred`` to ``gt`` (optional landmark Umeyama, then ICP) and score it.

    The same transform moves the predicted samples and rotates their normals.
    Both meshes are sampled from the same seed, so identical meshes give
    identical samples and score exactly zero.
    """
    tf = SimilarityTransform()
    if landmarks is not None:
        tf = umeyama(*landmarks)
    P = sample_surface(pred, n, seed)
    G = sample_surface(gt, n, seed)
    residual = float("nan")
    if icp:
        k = min(icp_points, len(P))
        result = icp_refine(P.points[:k], G.points, tf, icp_iters)
        tf, residual = result.transform, result.residual
    P = SurfaceSamples(tf.apply(P.points), tf.rotate(P.normals))
    return MetricReport(chamfer(P, G), normal_angle_error(P, G), len(P), len(G), residual)
