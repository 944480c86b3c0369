"""Experiment plumbing: JSON configs, per-frame metric rows, CSV/JSON reports.

A configuration is one JSON document.  Command-line flags override fields of
the document, which override the defaults below::

    defaults  <  --config file  <  --seed / --snr-db / --lambda / --out / --checkpoint

Rows are sorted by ``(snr_db, lambda, seed, frame)`` before writing and floats
are printed with 9 significant digits, so a fixed config reproduces the CSV
byte for byte.
"""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import SeededRng
from .pipeline import LAMBDA_SET, SNR_SET_DB, CvstModel, GopConfig, ModelConfig, run_gop
from .video import ClipSpec, psnr, synth_video

CSV_FLOAT = "{:.9g}"


@dataclass(frozen=True)
class ClipSettings:
    height: int = 32
    width: int = 32
    frames: int = 12
    speed: tuple = (4, 0)
    pattern_seed: int = 1000


@dataclass(frozen=True)
class ChannelSettings:
    n_tx: int = 2
    n_rx: int = 2
    csi: str = "perfect"
    pilot_length: int | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one ``run`` needs; see the module docstring for precedence."""

    clip: ClipSettings = field(default_factory=ClipSettings)
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    lambdas: tuple = (0.12,)
    snrs_db: tuple = (9.0,)
    seeds: tuple = tuple(range(5))
    checkpoint: str | None = None
    train_seed: int = 0
    out_csv: str | None = None
    out_json: str | None = None
    workers: int = 1

    def gop(self, model_cfg: ModelConfig) -> GopConfig:
        return GopConfig(self.clip.frames, model_cfg.s, model_cfg.channels, model_cfg.radius)

    def to_dict(self) -> dict:
        d = asdict(self)
        return json.loads(json.dumps(d))  # tuples -> lists

    def validate(self, model_cfg: ModelConfig | None = None) -> "ExperimentConfig":
        mc = model_cfg or ModelConfig()
        for name in ("lambdas", "snrs_db", "seeds"):
            if len(getattr(self, name)) == 0:
                raise ConfigError(name, "grid must be non-empty")
        for i, lam in enumerate(self.lambdas):
            if not (isinstance(lam, (int, float)) and lam > 0):
                raise ConfigError(f"lambdas[{i}]", "must be a positive number")
        for i, s in enumerate(self.snrs_db):
            if not (isinstance(s, (int, float)) and math.isfinite(s)):
                raise ConfigError(f"snrs_db[{i}]", "must be a finite number")
        for i, s in enumerate(self.seeds):
            if not (isinstance(s, int) and 0 <= s < 2**64):
                raise ConfigError(f"seeds[{i}]", "must be an unsigned 64-bit integer")
        c = self.clip
        for name in ("height", "width"):
            v = getattr(c, name)
            if not isinstance(v, int) or v < 1:
                raise ConfigError(f"clip.{name}", "must be a positive integer")
            if v % mc.s:
                raise ConfigError(f"clip.{name}", f"{v} is not divisible by the latent factor {mc.s}")
            if v != getattr(mc, name):
                raise ConfigError(f"clip.{name}", f"{v} does not match the model's {getattr(mc, name)}")
        if not isinstance(c.frames, int) or c.frames < 2:
            raise ConfigError("clip.frames", "a GoP needs at least two frames")
        if len(c.speed) != 2 or not all(isinstance(v, int) for v in c.speed):
            raise ConfigError("clip.speed", "expected two integers (dx, dy)")
        ch = self.channel
        if ch.csi not in ("perfect", "ls"):
            raise ConfigError("channel.csi", f"unknown mode {ch.csi!r}")
        if ch.n_tx != mc.n_tx:
            raise ConfigError("channel.n_tx", f"the model was built for {mc.n_tx} transmit antennas")
        if not isinstance(ch.n_rx, int) or ch.n_rx < ch.n_tx:
            raise ConfigError("channel.n_rx", "need at least as many receive as transmit antennas")
        if ch.pilot_length is not None and ch.pilot_length < ch.n_tx:
            raise ConfigError("channel.pilot_length", "shorter than the number of transmit antennas")
        if self.workers < 1:
            raise ConfigError("workers", "must be >= 1")
        return self


_SECTIONS = {"clip": ClipSettings, "channel": ChannelSettings}


def _coerce(path, value, default):
    if isinstance(default, tuple):
        if not isinstance(value, (list, tuple)):
            raise ConfigError(path, "expected a list")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(path, "expected true/false")
        return value
    if isinstance(default, int) and not isinstance(default, bool):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(path, "expected an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(path, "expected a number")
        return float(value)
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(path, "expected a string")
    return value


def _build(cls, data, prefix=""):
    if not isinstance(data, dict):
        raise ConfigError(f"{prefix.rstrip('.') or '<root>'}", "expected an object")
    known = {f.name: f for f in fields(cls)}
    for key in data:
        if key not in known:
            raise ConfigError(f"{prefix}{key}", "unknown field")
    base = cls()
    kwargs = {}
    for key, value in data.items():
        if cls is ExperimentConfig and key in _SECTIONS:
            kwargs[key] = _build(_SECTIONS[key], value, f"{key}.")
        else:
            kwargs[key] = _coerce(prefix + key, value, getattr(base, key))
    return cls(**kwargs)


def config_from_dict(data) -> ExperimentConfig:
    """Parse a JSON object; every schema violation names its field path."""
    return _build(ExperimentConfig, data)


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except OSError as exc:
        raise ConfigError("<file>", f"cannot read {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("<file>", f"invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return config_from_dict(data)


@dataclass(frozen=True)
class MetricRow:
    seed: int
    frame: int
    snr_db: float
    lam: float
    psnr_db: float
    cbr: float
    k_c: int
    k_v: int
    k_cz: int
    k_vz: int

    HEADER = ("seed", "frame", "snr_db", "lambda", "psnr_db", "cbr", "k_c", "k_v", "k_cz", "k_vz")

    def cells(self) -> list:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(CSV_FLOAT.format(v) if isinstance(v, float) else str(v))
        return out

    def sort_key(self):
        return (self.snr_db, self.lam, self.seed, self.frame)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(MetricRow.HEADER)
    for r in sorted(rows, key=MetricRow.sort_key):
        w.writerow(r.cells())
    return buf.getvalue()


def clip_for_seed(cfg: ExperimentConfig, seed: int) -> np.ndarray:
    c = cfg.clip
    spec = ClipSpec(c.height, c.width, c.frames, tuple(c.speed), pattern_seed=c.pattern_seed)
    return synth_video(spec, SeededRng(seed, 0xC11B))


def _run_one(model: CvstModel, cfg: ExperimentConfig, seed: int, snr: float, lam: float):
    x = clip_for_seed(cfg, seed)
    # the link draw depends on the seed only, so grid points are paired
    res = run_gop(x, model, lam, snr, SeededRng(seed, 0x11D4), csi=cfg.channel.csi, n_rx=cfg.channel.n_rx,
                  gop=cfg.gop(model.cfg), pilot_length=cfg.channel.pilot_length)
    rows = []
    for t, led in enumerate(res.ledgers):
        rows.append(MetricRow(int(seed), t, float(snr), float(lam), psnr(x[t], res.frames[t]), float(led.cbr),
                              led.k_c, led.k_v, led.k_cz, led.k_vz))
    return rows


def obtain_model(cfg: ExperimentConfig) -> CvstModel:
    """Load ``cfg.checkpoint`` or, without one, train the desk model on the fly."""
    from .training import load_checkpoint, train_model

    if cfg.checkpoint:
        try:
            model, _ = load_checkpoint(cfg.checkpoint)
        except OSError as exc:
            raise ConfigError("checkpoint", f"cannot read {cfg.checkpoint}: {exc}") from exc
        return model
    model, _ = train_model(seed=cfg.train_seed)
    return model


def summarize(rows, cfg: ExperimentConfig | None = None) -> dict:
    """Per (snr, lambda) grid point: seed-level mean/std of PSNR and CBR."""
    groups: dict = {}
    for r in rows:
        groups.setdefault((r.snr_db, r.lam), {}).setdefault(r.seed, []).append(r)
    points = []
    for (snr, lam) in sorted(groups):
        per_seed = groups[(snr, lam)]
        p = np.array([np.mean([r.psnr_db for r in v]) for _, v in sorted(per_seed.items())])
        c = np.array([np.mean([r.cbr for r in v]) for _, v in sorted(per_seed.items())])
        points.append({"snr_db": snr, "lambda": lam, "seeds": len(p),
                       "psnr_mean": float(p.mean()), "psnr_std": float(p.std()),
                       "cbr_mean": float(c.mean()), "cbr_std": float(c.std())})
    out = {"points": points, "rows": len(rows)}
    if cfg is not None:
        out["config"] = cfg.to_dict()
    return out


def _ensure_parent(path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)


def run(cfg: ExperimentConfig, model: CvstModel | None = None):
    """Execute every (snr, lambda, seed) GoP; returns ``(rows, summary)`` and writes outputs if asked."""
    if model is None and not cfg.checkpoint:
        cfg.validate(ModelConfig())  # fail before spending time on training
    model = model or obtain_model(cfg)
    cfg.validate(model.cfg)
    jobs = [(s, snr, lam) for snr in cfg.snrs_db for lam in cfg.lambdas for s in cfg.seeds]
    if cfg.workers > 1:
        with ThreadPoolExecutor(cfg.workers) as pool:
            parts = list(pool.map(lambda j: _run_one(model, cfg, *j), jobs))
    else:
        parts = [_run_one(model, cfg, *j) for j in jobs]
    rows = sorted((r for p in parts for r in p), key=MetricRow.sort_key)
    summary = summarize(rows, cfg)
    if cfg.out_csv:
        _ensure_parent(cfg.out_csv)
        with open(cfg.out_csv, "w", newline="") as fh:
            fh.write(rows_to_csv(rows))
    if cfg.out_json:
        _ensure_parent(cfg.out_json)
        with open(cfg.out_json, "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return rows, summary


def sweep_config(cfg: ExperimentConfig, axis: str) -> ExperimentConfig:
    """Fill an unspecified grid with the trained set: ``axis`` is "snr" or "lambda"."""
    if axis == "snr":
        return replace(cfg, snrs_db=tuple(float(s) for s in SNR_SET_DB))
    if axis == "lambda":
        return replace(cfg, lambdas=tuple(LAMBDA_SET))
    raise ConfigError("axis", f"unknown sweep axis {axis!r}")
