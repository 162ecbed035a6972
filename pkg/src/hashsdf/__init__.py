"""Signed distance fields from oriented point clouds.

A multiresolution hash encoding feeds a small softplus network that predicts
signed distance and colour.  Training alternates Lion warm-up with a hybrid
Lion/K-FAC phase; the trained field can be meshed with marching cubes,
scored against ground truth, or followed by a surface-tracing controller.
"""

__version__ = "0.1.0"
