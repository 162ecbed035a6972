"""Mode-switched surface-tracing velocity field, trajectory integration and lawnmower coverage.

The controller drives a point onto the level set ``d = d_star`` along the
field gradient, then slides it tangentially towards a goal:

    approach  (|d - d_star| > eps):  v = -k (d - d_star) grad d
    follow    (otherwise):           v = -k (I - n n^T)(x - goal),  n = grad d / |grad d|

and clips the speed at ``v_max``.  All positions are in normalized units.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import network as net
from .geometry import AnalyticField, AnalyticShape, SceneTransform

APPROACH, FOLLOW = "approach", "follow"


class DegenerateNormalError(FloatingPointError):
    """The field gradient vanished where a surface normal was needed."""


class ModelProvider:
    """Learned field: analytic spatial gradient from the network."""

    def __init__(self, model: net.FieldModel):
        self.model = model

    def query(self, x):
        d, g, _ = net.forward_with_spatial_grad(self.model, np.asarray(x, dtype=np.float64))
        return float(d), np.asarray(g)

    def sdf(self, x):
        return self.model.sdf(x)


class AnalyticProvider:
    """Closed-form shape, optionally placed in the normalized frame by ``transform``."""

    def __init__(self, shape: AnalyticShape, transform: SceneTransform | None = None):
        self.field = AnalyticField(shape, transform or SceneTransform())

    def query(self, x):
        d, g = self.field.sdf_and_grad(np.asarray(x, dtype=np.float64))
        return float(d), np.asarray(g, dtype=np.float64)

    def sdf(self, x):
        return self.field.sdf(x)


class GridProvider:
    """Sampled field: trilinear value, central-difference gradient with a one-voxel step."""

    def __init__(self, grid):
        self.grid = grid

    def query(self, x):
        x = np.asarray(x, dtype=np.float64)
        h = self.grid.spacing
        probes = np.vstack([x, x + np.diag(h), x - np.diag(h)])
        v = self.grid.trilinear(probes)
        return float(v[0]), (v[1:4] - v[4:7]) / (2.0 * h)

    def sdf(self, x):
        return self.grid.trilinear(x)


@dataclass(frozen=True)
class TraceParams:
    gain: float = 2.0
    d_star: float = 0.05
    eps: float = 0.005
    dt: float = 0.005
    max_steps: int = 4000
    goal: np.ndarray | None = None
    v_max: float = 1.0

    def __post_init__(self):
        for name in ("gain", "eps", "dt", "v_max"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v > 0):
                raise ValueError("%s must be positive, got %r" % (name, v))
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.goal is not None:
            object.__setattr__(self, "goal", np.asarray(self.goal, dtype=np.float64).reshape(3))

    @property
    def stop_radius(self) -> float:
        return 2.0 * self.dt * self.v_max

    def with_goal(self, goal) -> "TraceParams":
        return TraceParams(self.gain, self.d_star, self.eps, self.dt, self.max_steps, goal, self.v_max)


def mode_of(d: float, params: TraceParams) -> str:
    return APPROACH if abs(d - params.d_star) > params.eps else FOLLOW


def _control(d, g, x, params: TraceParams):
    mode = mode_of(d, params)
    if mode == APPROACH:
        v = -params.gain * (d - params.d_star) * g
    else:
        gn = float(np.linalg.norm(g))
        if gn < 1e-8:
            raise DegenerateNormalError("gradient norm %.3g below 1e-8 at %s in follow mode" % (gn, x))
        if params.goal is None:
            v = np.zeros(3)
        else:
            n = g / gn
            r = x - params.goal
            v = -params.gain * (r - n * np.dot(n, r))
    speed = float(np.linalg.norm(v))
    if speed > params.v_max:
        v = v * (params.v_max / speed)
    return v, mode


def velocity(provider, params: TraceParams, x):
    """Commanded velocity and mode label at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    d, g = provider.query(x)
    return _control(d, g, x, params)


@dataclass
class Trajectory:
    t: np.ndarray
    x: np.ndarray
    d: np.ndarray
    mode: list
    converged: bool = False
    exhausted: bool = False
    skipped: int = 0
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.t)

    @staticmethod
    def empty() -> "Trajectory":
        return Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros(0), [])

    def to_csv(self, path=None, transform: SceneTransform | None = None) -> str:
        """CSV ``t,x,y,z,d,mode``; positions and distances in scene units when ``transform`` is given."""
        x, d = self.x, self.d
        if transform is not None:
            x, d = transform.invert(x), d / transform.scale
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("t", "x", "y", "z", "d", "mode"))
        for i in range(len(self)):
            w.writerow([repr(float(self.t[i]))] + [repr(float(v)) for v in x[i]] + [repr(float(d[i])), self.mode[i]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text


def integrate(provider, params: TraceParams, x0, t0: float = 0.0) -> Trajectory:
    """Explicit Euler on the controller, recording every state.

    Stops once in follow mode within ``stop_radius`` of the goal (or, with
    no goal, as soon as follow mode is reached), or after ``max_steps``.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    if x.shape != (3,) or not np.all(np.isfinite(x)):
        raise ValueError("start point must be a finite 3-vector")
    ts, xs, ds, modes = [], [], [], []
    converged = False
    for step in range(params.max_steps + 1):
        d, g = provider.query(x)
        v, mode = _control(d, g, x, params)
        ts.append(t0 + step * params.dt)
        xs.append(x.copy())
        ds.append(d)
        modes.append(mode)
        if mode == FOLLOW and (params.goal is None or np.linalg.norm(x - params.goal) < params.stop_radius):
            converged = True
            break
        if step == params.max_steps:
            break
        x = x + params.dt * v
    return Trajectory(np.array(ts), np.array(xs), np.array(ds), modes, converged, not converged)


def project(provider, params: TraceParams, x0):
    """Approach-mode descent of ``x0`` onto the ``d_star`` contour; None if it fails."""
    traj = integrate(provider, params.with_goal(None), x0)
    return traj.x[-1] if traj.converged else None


@dataclass(frozen=True)
class LawnmowerSpec:
    """Boustrophedon layout: ``slices`` planes across ``axis`` spanning ``extent``.

    On each plane, ``sweep_points`` seeds run along the next axis (direction
    alternating between planes) at height ``height`` on the remaining axis
    (defaults to the top of ``extent``); seeds are projected onto the contour
    to become goals.
    """

    axis: int = 0
    slices: int = 5
    extent: tuple = (0.2, 0.8)
    sweep_points: int = 5
    height: float | None = None

    def __post_init__(self):
        if self.axis not in (0, 1, 2):
            raise ValueError("axis must be 0, 1 or 2")
        if self.slices < 0 or self.sweep_points < 1:
            raise ValueError("slices must be >= 0 and sweep_points >= 1")
        if not self.extent[0] < self.extent[1]:
            raise ValueError("extent must satisfy lo < hi")

    @classmethod
    def from_spacing(cls, axis, spacing, extent, **kw) -> "LawnmowerSpec":
        if not spacing > 0:
            raise ValueError("spacing must be positive")
        slices = int(np.floor((extent[1] - extent[0]) / spacing + 1e-9)) + 1
        return cls(axis, slices, tuple(extent), **kw)

    def seeds(self) -> np.ndarray:
        lo, hi = self.extent
        sweep, up = (self.axis + 1) % 3, (self.axis + 2) % 3
        planes = np.linspace(lo, hi, self.slices) if self.slices > 1 else np.full(self.slices, (lo + hi) / 2)
        row = np.linspace(lo, hi, self.sweep_points) if self.sweep_points > 1 else np.array([(lo + hi) / 2])
        out = []
        for i, c in enumerate(planes):
            for s in (row if i % 2 == 0 else row[::-1]):
                p = np.empty(3)
                p[self.axis], p[sweep], p[up] = c, s, hi if self.height is None else self.height
                out.append(p)
        return np.array(out).reshape(-1, 3)


def lawnmower(provider, params: TraceParams, spec: LawnmowerSpec = LawnmowerSpec()) -> Trajectory:
    """Chain follow-mode runs through projected lawnmower goals.

    Seeds that fail to project within ``max_steps`` are skipped and counted.
    """
    goals, skipped = [], 0
    for seed in spec.seeds():
        g = project(provider, params, seed)
        if g is None:
            skipped += 1
        else:
            goals.append(g)
    if not goals:
        traj = Trajectory.empty()
        traj.skipped = skipped
        return traj
    parts = []
    x, t = goals[0], 0.0
    all_converged = True
    for g in goals:
        seg = integrate(provider, params.with_goal(g), x, t)
        parts.append(seg)
        all_converged &= seg.converged
        x, t = seg.x[-1], seg.t[-1] + params.dt
    traj = Trajectory(np.concatenate([p.t for p in parts]), np.concatenate([p.x for p in parts]),
                      np.concatenate([p.d for p in parts]), [m for p in parts for m in p.mode],
                      converged=all_converged, exhausted=not all_converged, skipped=skipped)
    traj.meta["goals"] = np.array(goals)
    return traj
