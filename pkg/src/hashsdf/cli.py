"""Command-line entry point: synth, train, reconstruct, eval, trace, ablate, bench.

Exit codes: 0 success, 2 usage or input error, 3 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
import time

import numpy as np

from . import geometry as geo
from . import metrics, pipeline, plotting, reconstruction as rec, tracer, trainer
from .baseline import train_baseline
from .plyio import PlyError

log = logging.getLogger("hashsdf")

EXIT_OK, EXIT_USAGE, EXIT_DIVERGED = 0, 2, 3


class UsageError(Exception):
    pass


def _write_text(path, text):
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)


def _csv_text(header, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _fmt(v):
    return repr(float(v))


def _need_file(path, what):
    if not os.path.isfile(path):
        raise UsageError("%s not found: %s" % (what, path))


def _train_config(args) -> trainer.TrainConfig:
    cfg = trainer.TrainConfig()
    if getattr(args, "config", None):
        _need_file(args.config, "config file")
        cfg = trainer.load_config(args.config, cfg)
    flags = {"epochs": getattr(args, "epochs", None), "seed": getattr(args, "seed", None),
             "mode": getattr(args, "mode_train", None)}
    return cfg.replace(**{k: v for k, v in flags.items() if v is not None})


def _load_cloud(path, conf):
    _need_file(path, "cloud")
    cloud = geo.load_point_cloud(path, conf)
    return geo.normalize_cloud(cloud)


# --- synth ---------------------------------------------------------------

def cmd_synth(args):
    if args.shape == "sphere":
        params = (args.radius,)
    elif args.shape == "torus":
        params = (args.major, args.minor)
    else:
        params = tuple(args.half)
    try:
        shape = geo.AnalyticShape(args.shape, params)
        cloud = geo.synthesize_cloud(shape, args.n, args.noise, args.seed)
    except ValueError as e:
        raise UsageError(str(e)) from None
    geo.save_point_cloud(args.output, cloud)
    print("wrote %d points to %s" % (len(cloud), args.output))


# --- train ---------------------------------------------------------------

def cmd_train(args):
    cfg = _train_config(args)
    cloud, tf = _load_cloud(args.cloud, args.conf_threshold)
    print("training %d points for %d epochs (%s, seed %d)" % (len(cloud), cfg.epochs, cfg.mode, cfg.seed))
    t0 = time.perf_counter()
    try:
        model, tlog = trainer.train(cloud, cfg, tf)
    except trainer.TrainingDiverged as e:
        if args.log:
            e.log.to_csv(args.log)
        print("error: %s" % e, file=sys.stderr)
        return EXIT_DIVERGED
    total = time.perf_counter() - t0
    trainer.save_model(model, args.output)
    if args.log:
        tlog.to_csv(args.log)
    if args.plot:
        plotting.plot_loss_curves(tlog.rows, args.plot, tlog.boundary_epoch)
    for stage, secs in tlog.phase_seconds.items():
        print("stage %-5s %.2f s" % (stage, secs))
    print("total %.2f s, final loss %.6g" % (total, tlog.rows[-1]["loss_total"]))
    return EXIT_OK


# --- reconstruct ---------------------------------------------------------

def _load_model(path):
    _need_file(path, "model file")
    try:
        return trainer.load_model(path)
    except ValueError as e:
        raise UsageError("cannot load model %s: %s" % (path, e)) from None


def cmd_reconstruct(args):
    model = _load_model(args.model)
    mesh = pipeline.extract_mesh(model, args.res, args.sigma, args.radius, args.iso)
    if mesh.is_empty:
        print("warning: iso-surface is empty; writing an empty mesh", file=sys.stderr)
    elif args.color == "on":
        mesh = rec.color_mesh(model, mesh)
    rec.export_mesh(mesh, args.output, args.format, model.transform)
    print("wrote %d vertices, %d faces to %s" % (len(mesh.vertices), len(mesh.faces), args.output))


# --- eval ----------------------------------------------------------------

def _read_mesh(path, what):
    _need_file(path, what)
    try:
        return rec.read_mesh(path)
    except (PlyError, ValueError) as e:
        raise UsageError("cannot read %s %s: %s" % (what, path, e)) from None


def cmd_eval(args):
    if (args.gt is None) == (args.gt_shape is None):
        raise UsageError("give exactly one of --gt or --gt-shape")
    pred = _read_mesh(args.pred, "predicted mesh")
    model = _load_model(args.model) if args.model else None
    tf = model.transform if model is not None else geo.SceneTransform()
    shape = None
    if args.gt_shape:
        try:
            shape = pipeline.parse_shape(args.gt_shape)
        except ValueError as e:
            raise UsageError(str(e)) from None
        gt = pipeline.reference_mesh(shape)
    else:
        gt = _read_mesh(args.gt, "ground-truth mesh")
    if pred.is_empty or gt.is_empty:
        raise UsageError("cannot evaluate an empty mesh")
    landmarks = None
    if args.landmarks:
        _need_file(args.landmarks, "landmarks file")
        try:
            landmarks = metrics.read_landmarks(args.landmarks)
            metrics.umeyama(*landmarks)
        except ValueError as e:
            raise UsageError(str(e)) from None
    # metrics in the model's normalized frame when a model is given
    if model is not None:
        pred = rec.TriangleMesh(tf.apply(pred.vertices), pred.faces)
        gt = rec.TriangleMesh(tf.apply(gt.vertices), gt.faces)
        if landmarks is not None:
            landmarks = (tf.apply(landmarks[0]), tf.apply(landmarks[1]))
    report = metrics.evaluate_meshes(pred, gt, args.samples, args.seed, landmarks, icp=not args.no_icp)
    header = list(metrics.MetricReport.COLUMNS)
    row = report.row()
    if shape is not None and model is not None:
        header.append("sdf_rmse")
        row.append(_fmt(metrics.sdf_field_rmse(model, geo.AnalyticField(shape, tf), args.probes, args.band,
                                               args.seed)))
    _write_text(args.output, _csv_text(header, [row]))


# --- trace ---------------------------------------------------------------

def cmd_trace(args):
    if (args.model is None) == (args.shape is None):
        raise UsageError("give exactly one of --model or --shape")
    if args.model:
        model = _load_model(args.model)
        provider, tf = tracer.ModelProvider(model), model.transform
    else:
        try:
            shape = pipeline.parse_shape(args.shape)
        except ValueError as e:
            raise UsageError(str(e)) from None
        provider, tf = tracer.AnalyticProvider(shape), geo.SceneTransform()
    try:
        params = tracer.TraceParams(args.gain, args.dstar, args.eps, args.dt, args.max_steps, None, args.v_max)
    except ValueError as e:
        raise UsageError(str(e)) from None
    if args.pattern == "lawnmower":
        lo, hi = args.extent
        spec = tracer.LawnmowerSpec(args.axis, args.slices, (float(tf.apply(np.full(3, lo))[0]),
                                                              float(tf.apply(np.full(3, hi))[0])),
                                    args.sweep_points)
        traj = tracer.lawnmower(provider, params, spec)
        goals = traj.meta.get("goals")
        if traj.skipped:
            print("warning: %d lawnmower seeds failed to project" % traj.skipped, file=sys.stderr)
    else:
        start = tf.apply(np.asarray(args.start, dtype=np.float64))
        if args.goal is not None:
            goal = tf.apply(np.asarray(args.goal, dtype=np.float64))
        else:
            goal = tracer.project(provider, params, start)
            if goal is None:
                raise UsageError("start point did not reach the d* contour within --max-steps")
        traj = tracer.integrate(provider, params.with_goal(goal), start)
        goals = goal[None]
    if traj.exhausted:
        print("warning: max steps reached before convergence", file=sys.stderr)
    traj.to_csv(args.output, tf)
    if args.plot:
        plotting.plot_trajectory(traj, args.plot, goals)
    print("wrote %d states to %s" % (len(traj), args.output))


# --- ablate --------------------------------------------------------------

def cmd_ablate(args):
    if args.drop == "all":
        variants = list(pipeline.ABLATIONS)
    elif args.drop in pipeline.DROP_ALIASES:
        variants = ["full", pipeline.DROP_ALIASES[args.drop]]
    else:
        raise UsageError("unknown loss term %r to drop (expected one of %s or all)"
                         % (args.drop, ", ".join(pipeline.DROP_ALIASES)))
    try:
        shape = pipeline.parse_shape(args.gt_shape)
    except ValueError as e:
        raise UsageError(str(e)) from None
    cfg = _train_config(args)
    cloud, tf = _load_cloud(args.cloud, args.conf_threshold)
    reference = pipeline.reference_mesh(shape, tf)
    rows = []
    for v in variants:
        vcfg = cfg.replace(weights=pipeline.ablated_weights(cfg.weights, v))
        try:
            model, _ = trainer.train(cloud, vcfg, tf)
        except trainer.TrainingDiverged as e:
            print("variant %s diverged: %s" % (v, e), file=sys.stderr)
            rows.append([v, "nan", "nan", "nan"])
            continue
        s = pipeline.score_field(model, shape, tf, args.res, args.samples, cfg.seed, args.band,
                                 reference=reference)
        rows.append([v, _fmt(s.cd), _fmt(s.nae_deg), _fmt(s.sdf_rmse)])
        print("%-10s cd %.3e  nae %.2f  sdf_rmse %.4f" % (v, s.cd, s.nae_deg, s.sdf_rmse), file=sys.stderr)
    _write_text(args.output, _csv_text(("variant", "cd", "nae_deg", "sdf_rmse"), rows))
    if args.plot:
        plotting.plot_metric_bars([r[0] for r in rows], [float(r[3]) for r in rows], args.plot,
                                  "SDF RMSE (band %g)" % args.band, "loss ablation")


# --- bench ---------------------------------------------------------------

BENCH_MODES = ("he-kfac", "pe-first")


def cmd_bench(args):
    modes = BENCH_MODES if args.mode == "all" else (args.mode,)
    for m in modes:
        if m not in BENCH_MODES:
            raise UsageError("unknown bench mode %r (expected he-kfac, pe-first or all)" % m)
    shape = None
    if args.gt_shape:
        try:
            shape = pipeline.parse_shape(args.gt_shape)
        except ValueError as e:
            raise UsageError(str(e)) from None
    cfg = _train_config(args).replace(mode="hybrid")
    cloud, tf = _load_cloud(args.cloud, args.conf_threshold)
    reference = pipeline.reference_mesh(shape, tf) if shape is not None else None
    rows, times = [], []
    for m in modes:
        t0 = time.perf_counter()
        if m == "he-kfac":
            model, tlog = trainer.train(cloud, cfg, tf)
        else:
            model, tlog = train_baseline(cloud, cfg, tf)
        wall = time.perf_counter() - t0
        row = [m, cfg.epochs, "%.3f" % wall, _fmt(tlog.rows[-1]["loss_total"])]
        if shape is not None:
            s = pipeline.score_field(model, shape, tf, args.res, args.samples, cfg.seed, reference=reference)
            row += [_fmt(s.cd), _fmt(s.nae_deg)]
        else:
            row += ["", ""]
        rows.append(row)
        times.append(wall)
        print("%-8s %.2f s" % (m, wall), file=sys.stderr)
    _write_text(args.output, _csv_text(("mode", "epochs", "wall_s", "final_loss", "cd", "nae_deg"), rows))
    if args.plot:
        plotting.plot_metric_bars(list(modes), times, args.plot, "wall time (s)", "encoding/optimizer benchmark")


# --- parser --------------------------------------------------------------

def _add_train_flags(p, with_mode=True):
    p.add_argument("--cloud", required=True, help="input point cloud (PLY)")
    p.add_argument("--config", help="INI config file")
    p.add_argument("--epochs", type=int, help="override the configured epoch count")
    p.add_argument("--seed", type=int, help="random seed (default 42)")
    p.add_argument("--conf-threshold", type=float, default=0.5, help="drop points below this confidence")
    if with_mode:
        p.add_argument("--optimizer", dest="mode_train", choices=("hybrid", "lion"),
                       help="hybrid Lion/K-FAC schedule or Lion only")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="hashsdf", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="sample a synthetic point cloud from an analytic shape")
    p.add_argument("--shape", choices=("sphere", "torus", "box"), default="sphere")
    p.add_argument("--radius", type=float, default=0.5)
    p.add_argument("--major", type=float, default=0.5)
    p.add_argument("--minor", type=float, default=0.2)
    p.add_argument("--half", type=float, nargs=3, default=(0.4, 0.3, 0.2), metavar=("HX", "HY", "HZ"))
    p.add_argument("--n", type=int, default=20000)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="fit a field to a point cloud")
    _add_train_flags(p)
    p.add_argument("-o", "--output", required=True, help="model file")
    p.add_argument("--log", help="per-epoch CSV log")
    p.add_argument("--plot", help="loss-curve PNG")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("reconstruct", help="extract a mesh from a trained model")
    p.add_argument("--model", required=True)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--sigma", type=float, default=1.0, help="smoothing bandwidth in voxels (0 disables)")
    p.add_argument("--radius", type=int, default=2, help="smoothing neighbourhood half-width in voxels")
    p.add_argument("--iso", type=float, default=0.0)
    p.add_argument("--color", choices=("on", "off"), default="on")
    p.add_argument("--format", choices=("ply", "obj"))
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_reconstruct)

    p = sub.add_parser("eval", help="score a mesh against a reference")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt")
    p.add_argument("--gt-shape", help="analytic reference, e.g. sphere:0.5")
    p.add_argument("--model", help="model whose normalized frame the metrics are reported in")
    p.add_argument("--landmarks", help="file of 'sx sy sz dx dy dz' landmark pairs")
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--no-icp", action="store_true")
    p.add_argument("--probes", type=int, default=20_000)
    p.add_argument("--band", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=42)
    p.add_argument("-o", "--output")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("trace", help="trace an iso-contour with the velocity-field controller")
    p.add_argument("--model")
    p.add_argument("--shape", help="analytic provider, e.g. sphere:0.5")
    p.add_argument("--start", type=float, nargs=3, default=(1.0, 0.0, 0.0), metavar=("X", "Y", "Z"))
    p.add_argument("--goal", type=float, nargs=3, metavar=("X", "Y", "Z"))
    p.add_argument("--dstar", type=float, default=0.05)
    p.add_argument("--gain", type=float, default=2.0)
    p.add_argument("--eps", type=float, default=0.005)
    p.add_argument("--dt", type=float, default=0.005)
    p.add_argument("--v-max", type=float, default=1.0)
    p.add_argument("--max-steps", type=int, default=4000)
    p.add_argument("--pattern", choices=("single", "lawnmower"), default="single")
    p.add_argument("--axis", type=int, choices=(0, 1, 2), default=0)
    p.add_argument("--slices", type=int, default=5)
    p.add_argument("--sweep-points", type=int, default=5)
    p.add_argument("--extent", type=float, nargs=2, default=(-0.4, 0.4), metavar=("LO", "HI"))
    p.add_argument("-o", "--output", required=True)
    p.add_argument("--plot")
    p.set_defaults(func=cmd_trace)

    p = sub.add_parser("ablate", help="retrain with loss terms removed")
    _add_train_flags(p)
    p.add_argument("--drop", required=True, help="sdf, zero, eik, normal, sparse, off, or all")
    p.add_argument("--gt-shape", required=True)
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("--band", type=float, default=0.3)
    p.add_argument("-o", "--output")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("bench", help="hash encoding + K-FAC against positional encoding + Adam")
    _add_train_flags(p, with_mode=False)
    p.add_argument("--mode", default="all", help="he-kfac, pe-first or all")
    p.add_argument("--gt-shape")
    p.add_argument("--res", type=int, default=128)
    p.add_argument("--samples", type=int, default=200_000)
    p.add_argument("-o", "--output")
    p.add_argument("--plot")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        code = args.func(args)
    except UsageError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except (trainer.ConfigError, PlyError, geo.EmptyCloudError, geo.DegenerateCloudError,
            metrics.DegenerateCorrespondenceError) as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    except trainer.TrainingDiverged as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_DIVERGED
    except OSError as e:
        print("error: %s" % e, file=sys.stderr)
        return EXIT_USAGE
    return EXIT_OK if code is None else code


if __name__ == "__main__":
    sys.exit(main())
