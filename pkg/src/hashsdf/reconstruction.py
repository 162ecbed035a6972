"""Dense grid evaluation, smoothing, iso-surface extraction, coloring and export."""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy import ndimage
from skimage import measure

from . import plyio
from .geometry import SceneTransform

log = logging.getLogger(__name__)


class NonFiniteSampleError(FloatingPointError):
    pass


@dataclass(frozen=True)
class ScalarGrid:
    """Samples on a regular lattice.

    ``values[i, j, k]`` sits at ``origin + (i, j, k) * spacing``; :meth:`flat`
    gives the x-fastest linear layout.
    """

    values: np.ndarray
    origin: np.ndarray
    spacing: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 3:
            raise ValueError("grid values must be 3-D, got shape %s" % (v.shape,))
        sp = np.broadcast_to(np.asarray(self.spacing, dtype=np.float64), (3,)).copy()
        if np.any(sp <= 0):
            raise ValueError("grid spacing must be positive")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "origin", np.broadcast_to(np.asarray(self.origin, dtype=np.float64), (3,)).copy())
        object.__setattr__(self, "spacing", sp)

    @property
    def resolution(self) -> tuple:
        return self.values.shape

    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    def points(self) -> np.ndarray:
        """Lattice positions in x-fastest order, shape (n, 3)."""
        axes = [self.origin[a] + np.arange(n) * self.spacing[a] for a, n in enumerate(self.resolution)]
        Z, Y, X = np.meshgrid(axes[2], axes[1], axes[0], indexing="ij")
        return np.column_stack([X.ravel(), Y.ravel(), Z.ravel()])

    def trilinear(self, x) -> np.ndarray:
        """Trilinear interpolation at points ``x`` (n, 3); clamped to the lattice."""
        u = (np.atleast_2d(x) - self.origin) / self.spacing
        return ndimage.map_coordinates(self.values, u.T, order=1, mode="nearest")


@dataclass
class TriangleMesh:
    """Triangle mesh in normalized coordinates; export maps vertices to scene units."""

    vertices: np.ndarray
    faces: np.ndarray
    colors: np.ndarray | None = None
    normals: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if len(self.faces) and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range for %d vertices" % len(self.vertices))

    def __len__(self):
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        v = self.vertices[self.faces]
        return 0.5 * np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)

    def edge_degrees(self) -> np.ndarray:
        """Number of faces sharing each undirected edge."""
        e = np.sort(self.faces[:, [0, 1, 1, 2, 2, 0]].reshape(-1, 2), axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed_manifold(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_degrees() == 2))


def lattice(res, bounds=(0.0, 1.0)):
    """Origin and spacing of a ``res``-per-axis lattice spanning ``bounds`` (lo, hi)."""
    res = int(res)
    if res < 2:
        raise ValueError("grid resolution must be >= 2, got %d" % res)
    lo, hi = (np.broadcast_to(np.asarray(b, dtype=np.float64), (3,)) for b in bounds)
    if np.any(hi <= lo):
        raise ValueError("grid bounds must satisfy lo < hi")
    return lo.copy(), (hi - lo) / (res - 1)


def evaluate_grid(field, res: int = 128, bounds=(0.0, 1.0), chunk: int = 65536) -> ScalarGrid:
    """Sample ``field.sdf`` at every lattice point.

    ``field`` is anything with an ``sdf(points)`` method over normalized
    coordinates (a trained model, or an analytic stand-in).
    """
    origin, spacing = lattice(res, bounds)
    grid = ScalarGrid(np.zeros((res, res, res)), origin, spacing)
    pts = grid.points()
    flat = np.empty(len(pts))
    for s in range(0, len(pts), chunk):
        flat[s:s + chunk] = field.sdf(pts[s:s + chunk])
    bad = np.flatnonzero(~np.isfinite(flat))
    if len(bad):
        i, j, k = np.unravel_index(bad[0], (res, res, res), order="F")
        raise NonFiniteSampleError("non-finite SDF sample at lattice index (%d, %d, %d)" % (i, j, k))
    return replace(grid, values=flat.reshape((res, res, res), order="F"))


def gaussian_kernel(sigma: float, radius: int) -> np.ndarray:
    """Unnormalized 1-D Gaussian taps over ``[-radius, radius]`` voxels."""
    k = np.arange(-radius, radius + 1, dtype=np.float64)
    return np.exp(-0.5 * (k / sigma) ** 2)


def gaussian_smooth(grid: ScalarGrid, sigma: float = 1.0, radius: int = 2) -> ScalarGrid:
    """Normalized Gaussian average over a cubic neighbourhood of edge ``2*radius + 1``.

    ``sigma`` is in voxels.  Neighbourhoods are truncated at the border and
    the weights renormalized over the samples that exist, so constants are
    preserved everywhere.  The 3-D weight factorizes per axis, hence both
    numerator and normalizer are separable.
    """
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if radius == 0:
        return replace(grid, values=grid.values.copy())
    w = gaussian_kernel(sigma, int(radius))
    num = grid.values
    den = np.ones_like(num)
    for axis in range(3):
        num = ndimage.correlate1d(num, w, axis=axis, mode="constant", cval=0.0)
        den = ndimage.correlate1d(den, w, axis=axis, mode="constant", cval=0.0)
    return replace(grid, values=num / den)


def _refine_vertices(values, verts, iso):
    """Recompute marching-cubes vertex positions in float64.

    Every vertex lies on a lattice edge: two index coordinates are integers
    and the third is fractional.  The fractional one is re-derived by linear
    interpolation of the two edge samples.
    """
    out = np.rint(verts).astype(np.float64)
    frac = np.abs(verts - out) > 1e-4
    rows, axes = np.nonzero(frac)
    if len(rows):
        base = out[rows].astype(np.int64)
        base[np.arange(len(rows)), axes] = np.floor(verts[rows, axes]).astype(np.int64)
        hi = base.copy()
        hi[np.arange(len(rows)), axes] += 1
        s0 = values[base[:, 0], base[:, 1], base[:, 2]]
        s1 = values[hi[:, 0], hi[:, 1], hi[:, 2]]
        out[rows] = base
        out[rows, axes] += (iso - s0) / (s1 - s0)
    return out


def clean_mesh(vertices, faces):
    """Merge coincident vertices, then drop zero-area and unreferenced elements."""
    if len(faces) == 0:
        return np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64)
    uniq, inverse = np.unique(vertices, axis=0, return_inverse=True)
    f = inverse.reshape(-1)[faces]
    keep = (f[:, 0] != f[:, 1]) & (f[:, 1] != f[:, 2]) & (f[:, 2] != f[:, 0])
    f = f[keep]
    v = uniq[f]
    area2 = np.linalg.norm(np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0]), axis=1)
    f = f[area2 > 0]
    used = np.unique(f)
    remap = np.full(len(uniq), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return uniq[used], remap[f]


def marching_cubes(grid: ScalarGrid, iso: float = 0.0) -> TriangleMesh:
    """Extract the ``iso`` level set as an outward-wound triangle mesh.

    Empty when ``iso`` lies outside the sample range.
    """
    v = grid.values
    if not np.all(np.isfinite(v)):
        raise NonFiniteSampleError("grid contains non-finite samples")
    if not (v.min() <= iso <= v.max()) or v.min() == v.max():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    # lewiner tables resolve the ambiguous cases consistently across shared faces
    verts, faces, _, _ = measure.marching_cubes(v, level=iso, method="lewiner", allow_degenerate=True)
    idx = _refine_vertices(v, verts.astype(np.float64), iso)
    idx, faces = clean_mesh(idx, faces.astype(np.int64))
    return TriangleMesh(grid.origin + idx * grid.spacing, faces)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted unit vertex normals."""
    v = mesh.vertices[mesh.faces]
    fn = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
    n = np.zeros_like(mesh.vertices)
    for c in range(3):
        np.add.at(n, mesh.faces[:, c], fn)
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    return n / np.where(norm > 0, norm, 1.0)


def color_mesh(model, mesh: TriangleMesh, chunk: int = 65536) -> TriangleMesh:
    """Per-vertex RGB from the color head, clamped to [0, 1]."""
    from .network import forward

    rgb = np.empty((len(mesh.vertices), 3))
    for s in range(0, len(rgb), chunk):
        rgb[s:s + chunk] = forward(model, mesh.vertices[s:s + chunk])[1]
    return replace(mesh, colors=np.clip(rgb, 0.0, 1.0))


def to_uint8(colors) -> np.ndarray:
    return np.clip(np.rint(np.asarray(colors) * 255.0), 0, 255).astype(np.uint8)


def export_mesh(mesh: TriangleMesh, path, fmt: str | None = None, transform: SceneTransform | None = None):
    """Write PLY (with colors when present) or OBJ (geometry only).

    ``transform`` maps the normalized vertices back to scene units.
    """
    fmt = (fmt or str(path).rsplit(".", 1)[-1]).lower()
    verts = transform.invert(mesh.vertices) if transform is not None else mesh.vertices
    if fmt == "ply":
        vertex = {"x": verts[:, 0], "y": verts[:, 1], "z": verts[:, 2]}
        if mesh.colors is not None:
            c = to_uint8(mesh.colors)
            vertex.update(red=c[:, 0], green=c[:, 1], blue=c[:, 2])
        plyio.write_ply(path, vertex, mesh.faces)
    elif fmt == "obj":
        plyio.write_obj(path, verts, mesh.faces)
    else:
        raise ValueError("unknown mesh format %r (expected ply or obj)" % fmt)


def read_mesh(path) -> TriangleMesh:
    """Load a PLY or OBJ triangle mesh; PLY colors are returned in [0, 1]."""
    if str(path).lower().endswith(".obj"):
        verts, faces = plyio.read_obj(path)
        return TriangleMesh(verts, faces)
    data = plyio.read_ply(path)
    vx = data.get("vertex")
    if vx is None:
        raise plyio.PlyError("%s: no vertex element" % path)
    verts = np.column_stack([vx["x"], vx["y"], vx["z"]]) if len(vx["x"]) else np.zeros((0, 3))
    faces = np.zeros((0, 3), dtype=np.int64)
    fe = data.get("face")
    if fe is not None:
        lists = fe.get("vertex_indices", fe.get("vertex_index"))
        if lists is None:
            raise plyio.PlyError("%s: face element lacks vertex_indices" % path)
        if len(lists):
            if any(len(f) != 3 for f in lists):
                raise plyio.PlyError("%s: only triangle faces are supported" % path)
            faces = np.array([np.asarray(f) for f in lists], dtype=np.int64)
    colors = None
    if all(k in vx for k in ("red", "green", "blue")):
        colors = np.column_stack([vx["red"], vx["green"], vx["blue"]]).astype(np.float64) / 255.0
    return TriangleMesh(verts, faces, colors)
