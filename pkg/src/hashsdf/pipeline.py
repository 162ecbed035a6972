"""Train -> extract -> score glue shared by the CLI harnesses and the acceptance tests."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

from . import metrics, reconstruction as rec
from .geometry import AnalyticField, AnalyticShape, SceneTransform


def parse_shape(text: str) -> AnalyticShape:
    """``kind:p1,p2,...``, e.g. ``sphere:0.5``, ``torus:0.5,0.2``, ``box:0.3,0.2,0.1``."""
    kind, _, rest = text.partition(":")
    try:
        params = tuple(float(v) for v in rest.split(",") if v.strip())
    except ValueError:
        raise ValueError("bad shape parameters in %r" % text) from None
    return AnalyticShape(kind.strip(), params)


def extract_mesh(field, res: int = 128, sigma: float | None = 1.0, radius: int = 2, iso: float = 0.0,
                 bounds=(0.0, 1.0)) -> rec.TriangleMesh:
    """Grid evaluation, optional Gaussian smoothing, then marching cubes."""
    grid = rec.evaluate_grid(field, res, bounds)
    if sigma is not None and sigma > 0 and radius > 0:
        grid = rec.gaussian_smooth(grid, sigma, radius)
    return rec.marching_cubes(grid, iso)


def reference_mesh(shape: AnalyticShape, transform: SceneTransform | None = None, res: int = 256,
                   pad: float = 0.1) -> rec.TriangleMesh:
    """Fine marching-cubes mesh of an analytic shape, in the frame given by ``transform``."""
    tf = transform or SceneTransform()
    lo, hi = shape.bounds()
    span = float((hi - lo).max())
    lo_n, hi_n = tf.apply(lo - pad * span), tf.apply(hi + pad * span)
    return rec.marching_cubes(rec.evaluate_grid(AnalyticField(shape, tf), res, (lo_n, hi_n)))


@dataclass(frozen=True)
class Score:
    cd: float
    nae_deg: float
    sdf_rmse: float
    n_faces: int
    closed: bool


def score_field(field, shape: AnalyticShape, transform: SceneTransform, res: int = 128, n_samples: int = 200_000,
                seed: int = 0, band: float = 0.3, n_probe: int = 20_000, sigma: float | None = 1.0,
                radius: int = 2, reference: rec.TriangleMesh | None = None) -> Score:
    """CD and NAE of the extracted mesh against the analytic surface, plus SDF RMSE in a band.

    Everything is measured in normalized units; no alignment is applied
    because prediction and reference share a frame by construction.
    """
    oracle = AnalyticField(shape, transform)
    mesh = extract_mesh(field, res, sigma, radius)
    rmse = metrics.sdf_field_rmse(field, oracle, n_probe, band, seed)
    if mesh.is_empty:
        return Score(float("inf"), 180.0, rmse, 0, False)
    ref = reference if reference is not None else reference_mesh(shape, transform)
    P = metrics.sample_surface(mesh, n_samples, seed)
    G = metrics.sample_surface(ref, n_samples, seed)
    return Score(metrics.chamfer(P, G), metrics.normal_angle_error(P, G), rmse, len(mesh), mesh.is_closed_manifold())


# Ablation variants: label -> loss weights zeroed.
ABLATIONS = {
    "full": (),
    "no_sdf": ("sdf",),
    "no_zero": ("zero",),
    "no_eik": ("eik_surf", "eik_glob"),
    "no_normal": ("normal",),
    "no_sparse": ("sparse",),
    "no_off": ("off",),
}
DROP_ALIASES = {"sdf": "no_sdf", "zero": "no_zero", "eik": "no_eik", "normal": "no_normal",
                "sparse": "no_sparse", "off": "no_off"}


def ablated_weights(weights, variant: str):
    return dataclasses.replace(weights, **{t: 0.0 for t in ABLATIONS[variant]})
