"""Training loop, INI-style configuration and the binary model format."""

from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import logging
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import losses, network as net, optim
from .encoding import EncoderConfig
from .geometry import PointCloud, SceneTransform, SpatialIndex

log = logging.getLogger(__name__)

MAGIC = b"FINS"
VERSION = 1


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    def __init__(self, msg, log):
        super().__init__(msg)
        self.log = log


@dataclass
class TrainConfig:
    epochs: int = 500
    seed: int = 42
    mode: str = "hybrid"            # "hybrid" (Lion warm-up then K-FAC heads) or "lion"
    warmup_fraction: float = 0.6
    hidden: int = 64
    init_sphere_radius: float = 0.3   # > 0: start from a sphere's signed distance
    noise_sigma: float = 0.01
    offsets: tuple = (-0.1, -0.05, 0.05, 0.1)
    snapshot_every: int = 0
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    sizes: losses.BatchSizes = field(default_factory=losses.BatchSizes)
    weights: losses.LossWeights = field(default_factory=losses.LossWeights)
    lion_lr_encoder: float = 3e-4
    lion_lr_heads: float = 1e-4
    lion_level_decay: float = 1.0
    lion_lazy_tables: bool = True
    lion_beta1: float = 0.9
    lion_beta2: float = 0.99
    lion_weight_decay: float = 0.0
    kfac_lr: float = 1e-3
    kfac_damping: float = 1e-3
    kfac_decay: float = 0.95
    kfac_refresh: int = 10
    kfac_kl_clip: float = 1e-3

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.mode not in ("hybrid", "lion"):
            raise ConfigError("mode must be 'hybrid' or 'lion', got %r" % self.mode)
        if self.hidden < 1:
            raise ConfigError("hidden width must be >= 1")
        optim.Schedule(self.epochs, self.warmup_fraction)

    def replace(self, **kw) -> "TrainConfig":
        return dataclasses.replace(self, **kw)


# section -> {ini key: (target, attribute, type)}; target None means TrainConfig itself
_INT, _FLOAT, _STR = int, float, str


def _BOOL(text):
    v = text.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(text)


def _floats(text):
    return tuple(float(v) for v in text.replace(",", " ").split())


_SCHEMA = {
    "encoder": {"levels": ("encoder", "levels", _INT), "features": ("encoder", "features", _INT),
                "table_size": ("encoder", "table_size", _INT),
                "base_resolution": ("encoder", "base_resolution", _INT),
                "per_level_scale": ("encoder", "per_level_scale", _FLOAT)},
    "net": {"hidden": (None, "hidden", _INT), "init_sphere_radius": (None, "init_sphere_radius", _FLOAT)},
    "loss": {**{"w_" + t: ("weights", t, _FLOAT) for t in losses.TERMS},
             "tau": ("weights", "tau", _FLOAT),
             "noise_sigma": (None, "noise_sigma", _FLOAT),
             "offsets": (None, "offsets", _floats)},
    "optim.lion": {"lr_encoder": (None, "lion_lr_encoder", _FLOAT), "lr_heads": (None, "lion_lr_heads", _FLOAT),
                   "level_decay": (None, "lion_level_decay", _FLOAT),
                   "lazy_tables": (None, "lion_lazy_tables", _BOOL),
                   "beta1": (None, "lion_beta1", _FLOAT), "beta2": (None, "lion_beta2", _FLOAT),
                   "weight_decay": (None, "lion_weight_decay", _FLOAT)},
    "optim.kfac": {"lr": (None, "kfac_lr", _FLOAT), "damping": (None, "kfac_damping", _FLOAT),
                   "decay": (None, "kfac_decay", _FLOAT), "refresh": (None, "kfac_refresh", _INT),
                   "kl_clip": (None, "kfac_kl_clip", _FLOAT)},
    "train": {"epochs": (None, "epochs", _INT), "seed": (None, "seed", _INT), "mode": (None, "mode", _STR),
              "warmup_fraction": (None, "warmup_fraction", _FLOAT),
              "snapshot_every": (None, "snapshot_every", _INT),
              **{"batch_" + f.name: ("sizes", f.name, _INT) for f in dataclasses.fields(losses.BatchSizes)}},
}


def parse_config(text: str, base: TrainConfig | None = None) -> TrainConfig:
    """Parse INI text with sections [encoder] [net] [loss] [optim.lion] [optim.kfac] [train]."""
    cp = configparser.ConfigParser(interpolation=None)
    try:
        cp.read_string(text)
    except configparser.Error as e:
        raise ConfigError("config parse error: %s" % e) from None
    cfg = base or TrainConfig()
    top, subs = {}, {"encoder": {}, "sizes": {}, "weights": {}}
    for section in cp.sections():
        if section not in _SCHEMA:
            raise ConfigError("unknown config section [%s]" % section)
        for key, raw in cp.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError("unknown config key %r in section [%s]" % (key, section))
            target, attr, typ = _SCHEMA[section][key]
            try:
                value = typ(raw)
            except ValueError:
                raise ConfigError("bad value %r for key %r in [%s]" % (raw, key, section)) from None
            (top if target is None else subs[target])[attr] = value
    try:
        for target, changes in subs.items():
            if changes:
                top[target] = dataclasses.replace(getattr(cfg, target), **changes)
        return cfg.replace(**top)
    except (ValueError, TypeError) as e:
        raise ConfigError(str(e)) from None


def load_config(path, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


LOG_COLUMNS = ("epoch", "loss_total") + tuple("loss_" + t for t in losses.TERMS) + ("wall_ms", "stage")


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    boundary_epoch: int | None = None
    phase_seconds: dict = field(default_factory=lambda: {"lion": 0.0, "kfac": 0.0})
    skipped_steps: int = 0
    nonfinite_epochs: int = 0
    snapshots: dict = field(default_factory=dict, repr=False)

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in self.rows:
            w.writerow([r["epoch"], repr(r["loss_total"])] + [repr(r["loss_" + t]) for t in losses.TERMS]
                       + ["%.3f" % r["wall_ms"], r["stage"]])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
        return text

    def totals(self):
        return np.array([r["loss_total"] for r in self.rows])


def train(cloud: PointCloud, config: TrainConfig = TrainConfig(), transform: SceneTransform | None = None,
          callback=None):
    """Fit a field to a normalized cloud.  Returns ``(model, TrainLog)``.

    One freshly sampled batch per epoch, drawn from an rng stream keyed on
    ``(seed, epoch)``.  ``callback(epoch, model, report)`` runs after each
    step; ``snapshot_every`` > 0 stores model copies in ``log.snapshots``.
    """
    if len(cloud) == 0:
        raise ValueError("training cloud is empty")
    model = net.init_model(config.encoder, config.hidden, config.seed, transform,
                           config.init_sphere_radius if config.init_sphere_radius > 0 else None)
    index = SpatialIndex(cloud.positions)
    schedule = optim.Schedule(config.epochs, config.warmup_fraction)
    lion_tables = optim.LionState(config.lion_lr_encoder, config.lion_beta1, config.lion_beta2,
                                  config.lion_weight_decay)
    lion_tables.lazy = config.lion_lazy_tables
    lion_tables.lr_scale = {"tables%d" % l: config.lion_level_decay ** l for l in range(config.encoder.levels)}
    lion_heads = optim.LionState(config.lion_lr_heads, config.lion_beta1, config.lion_beta2,
                                 config.lion_weight_decay)
    kfac = None
    if config.mode == "hybrid":
        kfac = optim.KfacState(config.kfac_lr, config.kfac_damping, config.kfac_decay, config.kfac_refresh,
                               config.kfac_kl_clip if config.kfac_kl_clip > 0 else None)
    tlog = TrainLog(boundary_epoch=schedule.boundary if kfac is not None else None)
    params = model.params()
    bad_run = 0
    for epoch in range(config.epochs):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, epoch])
        batch = losses.sample_batch(cloud, index, config.sizes, config.noise_sigma, config.offsets, rng)
        stage = schedule.stage(epoch) if kfac is not None else "lion"
        try:
            report, grads, stats = losses.composite_loss(batch, model, config.weights, capture=stage == "kfac")
            finite = np.isfinite(report.total)
        except net.DivergenceError:
            report, finite = None, False
        if finite:
            bad_run = 0
            optim.staged_step(schedule, epoch, params, grads, lion_tables, lion_heads, kfac, stats)
        else:
            bad_run += 1
            tlog.nonfinite_epochs += 1
        dt = time.perf_counter() - t0
        tlog.phase_seconds[stage] += dt
        terms = report.terms if report is not None else {t: float("nan") for t in losses.TERMS}
        row = {"epoch": epoch, "loss_total": report.total if report is not None else float("nan"),
               "wall_ms": dt * 1000.0, "stage": stage}
        row.update({"loss_" + t: terms[t] for t in losses.TERMS})
        tlog.rows.append(row)
        if callback is not None:
            callback(epoch, model, report)
        if config.snapshot_every and (epoch + 1) % config.snapshot_every == 0:
            tlog.snapshots[epoch + 1] = model.copy()
        if bad_run >= 3:
            tlog.skipped_steps = lion_tables.skipped + lion_heads.skipped
            raise TrainingDiverged("loss non-finite for 3 consecutive epochs (last epoch %d)" % epoch, tlog)
    tlog.skipped_steps = lion_tables.skipped + lion_heads.skipped
    return model, tlog


# --- model file -----------------------------------------------------------

_HEADER = struct.Struct("<4sI IIII d I d3d")


def model_to_bytes(model: net.FieldModel) -> bytes:
    c = model.config
    head = _HEADER.pack(MAGIC, VERSION, c.levels, c.features, c.table_size, c.base_resolution,
                        c.per_level_scale, model.hidden, model.transform.scale, *model.transform.offset)
    body = b"".join(np.ascontiguousarray(getattr(model, k), dtype="<f8").tobytes() for k in net.PARAM_NAMES)
    return head + body


def model_from_bytes(data: bytes) -> net.FieldModel:
    if len(data) < 4 or data[:4] != MAGIC:
        raise ValueError("not a model file: expected magic %r, found %r" % (MAGIC, bytes(data[:4])))
    if len(data) < _HEADER.size:
        raise ValueError("model file truncated inside the header")
    _, version, L, F, T, R, s, H, scale, ox, oy, oz = _HEADER.unpack_from(data)
    if version != VERSION:
        raise ValueError("unsupported model file version %d (expected %d)" % (version, VERSION))
    cfg = EncoderConfig(L, F, T, R, s)
    D = cfg.out_dim
    shapes = {"tables": (L, T, F), "W1": (H, D), "b1": (H,), "W2": (1, H), "b2": (1,), "Wc": (3, D), "bc": (3,)}
    need = _HEADER.size + 8 * sum(int(np.prod(v)) for v in shapes.values())
    if len(data) != need:
        raise ValueError("model file has %d bytes, expected %d (truncated or corrupt)" % (len(data), need))
    off = _HEADER.size
    arrays = {}
    for k in net.PARAM_NAMES:
        n = int(np.prod(shapes[k]))
        arrays[k] = np.frombuffer(data, "<f8", n, off).astype(np.float64).reshape(shapes[k])
        off += 8 * n
    return net.FieldModel(cfg, *(arrays[k] for k in net.PARAM_NAMES),
                          transform=SceneTransform(scale, np.array([ox, oy, oz])))


def save_model(model: net.FieldModel, path):
    with open(path, "wb") as fh:
        fh.write(model_to_bytes(model))


def load_model(path) -> net.FieldModel:
    with open(path, "rb") as fh:
        return model_from_bytes(fh.read())
