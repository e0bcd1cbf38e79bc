"""Command-line entry point: ``lrti {gen,train,eval,bench,attn-stats}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import csv
import logging
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import plotting
from .config import ConfigError, coerce, read_kv, split_sections
from .data import FormatError, SyntheticSpec, bicubic_upsample, generate, load_dataset, save_frames, write_manifest, write_ppm
from .model import (
    CheckpointError,
    ModelConfig,
    ModelWeights,
    attention_statistics,
    forward_full,
    load_checkpoint,
    save_checkpoint,
)
from .propagation import ConfigurationError
from .training import Arm, TrainConfig, TrainingError, compare_strategies, train_loop

logger = logging.getLogger("lrti_vsr")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageFailure(Exception):
    """Bad flags, files or config; maps to exit code 2."""


GEN_SCHEMA = {
    "count": int,
    "frames": int,
    "height": int,
    "width": int,
    "sprites": int,
    "max_speed": int,
    "sprite_min": int,
    "sprite_max": int,
    "background": str,
    "scale": int,
    "seed": int,
}

MODEL_SCHEMA = {f"model.{f.name}": (str if f.name == "activation" else int) for f in fields(ModelConfig)}
TRAIN_SCHEMA = {
    "train.clip_len": int,
    "train.samples": int,
    "train.iterations": int,
    "train.lr": float,
    "train.lr_floor": float,
    "train.seed": int,
    "train.strategy": str,
    "train.batch_size": int,
    "train.checkpoint_every": int,
}


def _setup_logging() -> None:
    level = os.environ.get("LRTI_LOG", "error").lower()
    if level not in ("error", "info", "debug"):
        level = "error"
    logging.basicConfig(level=getattr(logging, level.upper()), format="%(levelname)s %(name)s: %(message)s")


def _load_config(path: Path | None) -> tuple[ModelConfig, dict]:
    """Model config plus a dict of ``train.*`` overrides from a dotted-key file."""
    if path is None:
        return ModelConfig(), {}
    try:
        values = coerce(read_kv(path), {**MODEL_SCHEMA, **TRAIN_SCHEMA}, str(path))
    except (ConfigError, FileNotFoundError) as e:
        raise UsageFailure(str(e)) from None
    sections = split_sections(values)
    try:
        cfg = ModelConfig(**sections.get("model", {}))
    except ValueError as e:
        raise UsageFailure(f"{path}: {e}") from None
    return cfg, sections.get("train", {})


def _load_data(manifest: Path):
    try:
        videos = load_dataset(manifest)
    except (FileNotFoundError, FormatError) as e:
        raise UsageFailure(str(e)) from None
    if not videos:
        raise UsageFailure(f"manifest {manifest} lists no sequences")
    return videos


def _write_csv(path: Path, rows: list[dict], columns: list[str]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------- gen


def gen_specs(path: Path, seed: int | None = None) -> list[SyntheticSpec]:
    try:
        values = coerce(read_kv(path), GEN_SCHEMA, str(path))
    except (ConfigError, FileNotFoundError) as e:
        raise UsageFailure(str(e)) from None
    count = values.pop("count", 1)
    if count < 1:
        raise UsageFailure(f"{path}: count must be >= 1")
    lo, hi = values.pop("sprite_min", 12), values.pop("sprite_max", 24)
    base = values.pop("seed", 0) if seed is None else seed
    specs = []
    for i in range(count):
        spec = SyntheticSpec(**values, sprite_size=(lo, hi), seed=base + i)
        try:
            spec.validate()
        except ValueError as e:
            raise UsageFailure(f"{path}: {e}") from None
        specs.append(spec)
    return specs


def cmd_gen(args) -> int:
    specs = gen_specs(args.spec, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    dirs = [out / f"seq_{i:03d}" for i in range(len(specs))]

    def build(i):
        save_frames(generate(specs[i]), dirs[i])

    with ThreadPoolExecutor(max_workers=max(1, args.threads)) as pool:
        list(pool.map(build, range(len(specs))))
    write_manifest(out / "dataset.txt", dirs)
    print(len(specs))
    return EXIT_OK


# ---------------------------------------------------------------- train


def cmd_train(args) -> int:
    cfg, overrides = _load_config(args.config)
    for flag, key in (("clip_len", "clip_len"), ("samples", "samples"), ("iters", "iterations"), ("seed", "seed"), ("lr", "lr")):
        value = getattr(args, flag)
        if value is not None:
            overrides[key] = value
    if args.strategy is not None:
        overrides["strategy"] = args.strategy
    overrides.setdefault("checkpoint_every", 50)
    tcfg = TrainConfig(**overrides)
    try:
        tcfg.validate()
    except ValueError as e:
        raise UsageFailure(str(e)) from None
    videos = _load_data(args.data)
    for v in videos:
        if v.scale != cfg.scale:
            raise UsageFailure(f"sequence {v.name} has scale {v.scale}, config expects {cfg.scale}")
        if tcfg.clip_len > v.frames:
            raise UsageFailure(f"clip length {tcfg.clip_len} exceeds {v.frames} frames in {v.name}")
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    weights = ModelWeights.init(cfg, tcfg.seed)
    save_checkpoint(out, cfg, weights)
    metrics = Path(args.metrics) if args.metrics else out.with_suffix(".csv")
    try:
        result = train_loop(videos, weights, cfg, tcfg, log_path=metrics, checkpoint_path=out)
    except TrainingError as e:
        print(f"error: {e}; last good checkpoint kept at {out}", file=sys.stderr)
        return EXIT_RUNTIME
    final = result.log[-1]["loss"] if result.log else float("nan")
    if result.log and not math.isfinite(final):
        print(f"error: final loss {final} not finite", file=sys.stderr)
        return EXIT_RUNTIME
    save_checkpoint(out, cfg, weights)
    if result.log:
        plotting.plot_training_log(result.log, plotting.figure_path(metrics))
    print(f"iterations {result.iterations} final_loss {final:.6f} checkpoint {out} metrics {metrics}")
    return EXIT_OK


# ---------------------------------------------------------------- eval

EVAL_COLUMNS = ["sequence", "frame", "psnr_db", "ssim"]


def eval_rows(videos, weights: ModelWeights | None, cfg: ModelConfig, dump: Path | None = None, threads: int = 1) -> list[dict]:
    """Per-frame metrics, then one mean row per sequence and a global mean row."""
    from .metrics import psnr_rgb, ssim_rgb

    def run(v):
        if weights is None:
            sr = np.stack([bicubic_upsample(f, v.scale) for f in v.lr])
        else:
            sr, _ = forward_full(v, weights, cfg, record_cache=False)
        sr = np.clip(sr, 0.0, 1.0)
        if dump is not None:
            (dump / v.name).mkdir(parents=True, exist_ok=True)
            for t in range(v.frames):
                write_ppm(dump / v.name / f"{t:06d}.ppm", sr[t])
        return [
            {"sequence": v.name, "frame": t, "psnr_db": psnr_rgb(sr[t], v.hr[t]), "ssim": ssim_rgb(sr[t], v.hr[t])}
            for t in range(v.frames)
        ]

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        per_video = list(pool.map(run, videos))
    rows = [r for chunk in per_video for r in chunk]
    for v, chunk in zip(videos, per_video):
        rows.append({
            "sequence": v.name, "frame": "mean",
            "psnr_db": float(np.mean([r["psnr_db"] for r in chunk])), "ssim": float(np.mean([r["ssim"] for r in chunk])),
        })  # fmt: skip
    frames = [r for chunk in per_video for r in chunk]
    rows.append({
        "sequence": "all", "frame": "mean",
        "psnr_db": float(np.mean([r["psnr_db"] for r in frames])), "ssim": float(np.mean([r["ssim"] for r in frames])),
    })  # fmt: skip
    return rows


def cmd_eval(args) -> int:
    expect = _load_config(args.config)[0] if args.config else None
    if args.baseline == "bicubic":
        cfg, weights = expect or ModelConfig(), None
    else:
        if args.ckpt is None:
            raise UsageFailure("eval needs --ckpt or --baseline bicubic")
        try:
            cfg, weights = load_checkpoint(args.ckpt, expect)
        except (FileNotFoundError, CheckpointError) as e:
            raise UsageFailure(str(e)) from None
    videos = _load_data(args.data)
    dump = Path(args.dump_frames) if args.dump_frames else None
    rows = eval_rows(videos, weights, cfg, dump, args.threads)
    _write_csv(Path(args.out), rows, EVAL_COLUMNS)
    print(f"mean_psnr_db {rows[-1]['psnr_db']:.4f} mean_ssim {rows[-1]['ssim']:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------- bench

BENCH_COLUMNS = [
    "arm", "peak_tape_bytes", "wall_ms_per_iter", "final_psnr",
    "step_ms_per_iter", "cache_ms_per_iter", "cache_builds", "final_loss",
]  # fmt: skip


def cmd_bench(args) -> int:
    cfg, _ = _load_config(args.config)
    try:
        arms = [Arm.parse(a) for a in args.arms.split(",") if a.strip()]
    except ValueError as e:
        raise UsageFailure(str(e)) from None
    if not arms:
        raise UsageFailure("no arms given")
    train = _load_data(args.data)
    held = _load_data(args.eval_data) if args.eval_data else []
    for arm in arms:
        short = min(v.frames for v in train)
        if arm.clip_len > short:
            raise UsageFailure(f"arm {arm.label}: clip length exceeds shortest sequence ({short} frames)")
    rows = compare_strategies(arms, train, held, cfg, args.iters, seed=args.seed, lr=args.lr)
    out = Path(args.out)
    _write_csv(out, rows, BENCH_COLUMNS)
    plotting.plot_bench(rows, plotting.figure_path(out))
    for r in rows:
        print(f"{r['arm']}: peak_tape_bytes {r['peak_tape_bytes']} wall_ms_per_iter {r['wall_ms_per_iter']:.1f} final_psnr {r['final_psnr']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------- attn-stats

ATTN_COLUMNS = [
    "block", "module", "frame", "activation", "zero_fraction", "top50_mass",
    "baseline_zero_fraction", "baseline_top50_mass",
]  # fmt: skip


def cmd_attn_stats(args) -> int:
    if args.ckpt is not None:
        try:
            cfg, weights = load_checkpoint(args.ckpt)
        except (FileNotFoundError, CheckpointError) as e:
            raise UsageFailure(str(e)) from None
    else:
        cfg, _ = _load_config(args.config)
        weights = ModelWeights.init(cfg, args.seed)
    if args.softmax:
        cfg = ModelConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(ModelConfig)}, "activation": "softmax"})
    videos = _load_data(args.data)
    video = videos[args.sequence] if args.sequence < len(videos) else None
    if video is None:
        raise UsageFailure(f"sequence index {args.sequence} out of range ({len(videos)} sequences)")
    frames = None
    if args.frames:
        try:
            frames = [int(f) for f in args.frames.split(",")]
        except ValueError:
            raise UsageFailure(f"bad --frames list {args.frames!r}") from None
        bad = [f for f in frames if not 0 <= f < video.frames]
        if bad:
            raise UsageFailure(f"frames {bad} outside 0..{video.frames - 1}")
    rows = attention_statistics(video, weights, cfg, frames)
    out = Path(args.out)
    _write_csv(out, rows, ATTN_COLUMNS)
    plotting.plot_attention_stats(rows, plotting.figure_path(out))
    print(f"rows {len(rows)}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="lrti", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--spec", type=Path, required=True, help="key = value generator spec")
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=None, help="overrides the spec's seed")
    g.add_argument("--threads", type=int, default=1)
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="train under either strategy")
    t.add_argument("--data", type=Path, required=True, help="dataset manifest")
    t.add_argument("--config", type=Path, default=None)
    t.add_argument("--strategy", choices=("truncated", "vanilla"), default=None)
    t.add_argument("--out", type=Path, required=True, help="checkpoint path")
    t.add_argument("--metrics", type=Path, default=None, help="CSV log (default: checkpoint path with .csv)")
    t.add_argument("--clip-len", type=int, default=None)
    t.add_argument("--samples", type=int, default=None)
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="per-frame PSNR/SSIM")
    e.add_argument("--ckpt", type=Path, default=None)
    e.add_argument("--config", type=Path, default=None, help="expected model config")
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--out", type=Path, required=True)
    e.add_argument("--baseline", choices=("bicubic",), default=None)
    e.add_argument("--dump-frames", type=Path, default=None)
    e.add_argument("--threads", type=int, default=1)
    e.set_defaults(func=cmd_eval)

    b = sub.add_parser("bench", help="memory/time/quality of training strategies")
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--eval-data", type=Path, default=None, help="held-out manifest for final_psnr")
    b.add_argument("--arms", required=True, help="e.g. vanilla:8,vanilla:24,truncated:8:2")
    b.add_argument("--out", type=Path, required=True)
    b.add_argument("--config", type=Path, default=None)
    b.add_argument("--iters", type=int, default=20)
    b.add_argument("--seed", type=int, default=0)
    b.add_argument("--lr", type=float, default=1e-3)
    b.set_defaults(func=cmd_bench)

    a = sub.add_parser("attn-stats", help="attention sparsity per block")
    a.add_argument("--ckpt", type=Path, default=None)
    a.add_argument("--config", type=Path, default=None, help="used with --seed when no checkpoint")
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--sequence", type=int, default=0)
    a.add_argument("--frames", default=None, help="comma-separated 0-based frame indices")
    a.add_argument("--softmax", action="store_true", help="run the softmax arm as the main activation")
    a.add_argument("--out", type=Path, required=True)
    a.set_defaults(func=cmd_attn_stats)
    return p


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    try:
        return args.func(args)
    except UsageFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigurationError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001
        logger.debug("failure", exc_info=True)
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
