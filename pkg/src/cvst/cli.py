"""Command-line front-end: ``cvst {simulate,sweep,train,selftest,synth}``.

Flags override the JSON config given with ``--config``, which overrides the
built-in defaults.  List flags take space- or comma-separated values
(``--snr-db 0 6 14`` or ``--snr-db 0,6,14``).
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import experiment, selftest, training
from .errors import ConfigError, CvstError
from .numerics import SeededRng
from .pipeline import LAMBDA_SET, SNR_SET_DB, ModelConfig
from .video import ClipSpec, synth_video, write_raw_clip


def _floats(values):
    out = []
    for v in values or []:
        for part in str(v).split(","):
            if part.strip():
                try:
                    out.append(float(part))
                except ValueError as exc:
                    raise ConfigError("argv", f"not a number: {part!r}") from exc
    return tuple(out)


def _u64(text):
    v = int(text, 0)
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cvst", description="Semantic video transmission over MIMO links: experiments and tools.")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, grids=True, checkpoint=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=_u64, help="base seed (u64)")
        sp.add_argument("--out", help="output path")
        if grids:
            sp.add_argument("--snr-db", nargs="+", help="SNR value(s) in dB")
            sp.add_argument("--lambda", dest="lam", nargs="+", help="rate point(s)")
        if checkpoint:
            sp.add_argument("--checkpoint", help="model checkpoint (trained on the fly if omitted)")
        return sp

    common(sub.add_parser("simulate", help="one (SNR, lambda) point over the configured seeds"))
    sw = common(sub.add_parser("sweep", help="SNR x lambda grid; unset grids default to the trained sets"))
    sw.add_argument("--workers", type=int, help="concurrent GoPs")
    common(sub.add_parser("train", help="run the two-stage schedule and write a checkpoint"), grids=False)
    common(sub.add_parser("selftest", help="invariant suite with a pass/fail table"), grids=False, checkpoint=False)
    common(sub.add_parser("synth", help="write a synthetic raw clip"), grids=False, checkpoint=False)
    return p


def _experiment_config(args, sweep=False):
    cfg = experiment.load_config(args.config) if args.config else experiment.ExperimentConfig()
    snrs, lams = _floats(args.snr_db), _floats(args.lam)
    if snrs:
        cfg = replace(cfg, snrs_db=snrs)
    elif sweep and not args.config:
        cfg = replace(cfg, snrs_db=tuple(float(s) for s in SNR_SET_DB))
    if lams:
        cfg = replace(cfg, lambdas=lams)
    elif sweep and not args.config:
        cfg = replace(cfg, lambdas=tuple(LAMBDA_SET))
    if args.seed is not None:
        cfg = replace(cfg, seeds=tuple(args.seed + i for i in range(len(cfg.seeds))))
    if args.checkpoint:
        cfg = replace(cfg, checkpoint=args.checkpoint)
    if getattr(args, "workers", None):
        cfg = replace(cfg, workers=args.workers)
    if args.out:
        out = Path(args.out)
        cfg = replace(cfg, out_csv=str(out), out_json=str(out.with_suffix(".json")))
    if not sweep and (len(cfg.snrs_db) != 1 or len(cfg.lambdas) != 1):
        raise ConfigError("snrs_db" if len(cfg.snrs_db) != 1 else "lambdas",
                          "simulate takes a single value; use sweep for grids")
    return cfg


def _print_summary(summary):
    for pt in summary["points"]:
        print(f"snr {pt['snr_db']:5.1f} dB  lambda {pt['lambda']:.3f}  "
              f"PSNR {pt['psnr_mean']:.2f} +- {pt['psnr_std']:.2f} dB  CBR {pt['cbr_mean']:.4f}  "
              f"({pt['seeds']} seeds)")


def cmd_run(args, sweep):
    cfg = _experiment_config(args, sweep)
    rows, summary = experiment.run(cfg)
    _print_summary(summary)
    if cfg.out_csv:
        print(f"wrote {len(rows)} rows to {cfg.out_csv} and summary to {cfg.out_json}")
    return 0


def cmd_train(args):
    model_cfg = ModelConfig()
    schedule = training.Schedule()
    if args.config:
        try:
            with open(args.config) as fh:
                data = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError("<file>", str(exc)) from exc
        unknown = set(data) - {"model", "schedule"}
        if unknown:
            raise ConfigError(sorted(unknown)[0], "unknown field (expected 'model' and/or 'schedule')")
        try:
            if "model" in data:
                model_cfg = training.config_from_dict(data["model"])
            if "schedule" in data:
                sch = {k: tuple(v) if isinstance(v, list) else v for k, v in data["schedule"].items()}
                schedule = training.Schedule(**sch)
        except TypeError as exc:
            raise ConfigError("model" if "model" in str(exc) else "schedule", str(exc)) from exc
    seed = args.seed or 0
    out = args.checkpoint or args.out or "cvst.ckpt"

    def progress(step, rep):
        if step % 100 == 0 or step == schedule.total_steps:
            print(f"step {step:5d}  stage {rep.stage}  loss {rep.L_t:10.2f}  k {rep.k_t:7.1f}  D {rep.D_t:9.2f}",
                  flush=True)

    model, trainer = training.train_model(model_cfg, schedule, seed=seed, callback=progress)
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    training.save_checkpoint(out, model, trainer.step_index)
    print(f"wrote checkpoint {out} ({model.params.size()} parameters, {trainer.step_index} steps)")
    return 0


def cmd_synth(args):
    clip = experiment.ClipSettings()
    if args.config:
        clip = experiment.load_config(args.config).clip
    seed = 0 if args.seed is None else args.seed
    spec = ClipSpec(clip.height, clip.width, clip.frames, tuple(clip.speed), pattern_seed=clip.pattern_seed)
    frames = synth_video(spec, SeededRng(seed, 0xC11B))
    out = args.out or "clip.raw"
    Path(out).parent.mkdir(parents=True, exist_ok=True)
    write_raw_clip(out, frames)
    print(f"wrote {frames.shape[0]} frames of {clip.height}x{clip.width} to {out}")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_run(args, sweep=False)
        if args.command == "sweep":
            return cmd_run(args, sweep=True)
        if args.command == "train":
            return cmd_train(args)
        if args.command == "selftest":
            return selftest.selftest(seed=args.seed or 0)
        if args.command == "synth":
            return cmd_synth(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except CvstError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
