"""Truncated-backpropagation training over cached long-sequence hidden states.

Each visit to a long video first runs a recording-free pass over all ``T``
frames to cache every module's hidden states. Then ``samples`` clips of
length ``L`` are drawn uniformly; each clip is run with its four neighbouring
cached states frozen as constants, and backpropagation only sees the clip.
The ``vanilla`` strategy draws the same clips but starts them from zero
states, which is plain BPTT over ``L`` frames.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VideoSequence, bicubic_upsample
from .metrics import psnr_rgb, ssim_rgb
from .model import ModelConfig, ModelWeights, clip_boundary, copy_weights, forward_clip, forward_full, save_checkpoint
from .propagation import ConfigurationError, HiddenStateCache

logger = logging.getLogger(__name__)

STRATEGIES = ("truncated", "vanilla")
LOG_COLUMNS = ("iter", "loss", "lr", "tape_bytes_peak", "wall_ms")


class TrainingError(RuntimeError):
    """Raised when the loss stops being finite."""


def split_rng(seed: int, n: int) -> list[np.random.Generator]:
    """Independent counter-based streams derived from one seed."""
    return [np.random.Generator(np.random.Philox(s)) for s in np.random.SeedSequence(seed).spawn(n)]


@dataclass
class TrainConfig:
    clip_len: int = 8
    samples: int = 4
    iterations: int = 200
    lr: float = 1e-3
    lr_floor: float = 1e-7
    seed: int = 0
    strategy: str = "truncated"
    batch_size: int = 1
    checkpoint_every: int = 0

    def validate(self) -> None:
        if self.strategy not in STRATEGIES:
            raise ValueError(f"strategy must be one of {STRATEGIES}")
        if self.clip_len < 1 or self.samples < 1 or self.iterations < 0:
            raise ValueError("clip_len and samples must be >= 1, iterations >= 0")
        if self.batch_size != 1:
            raise ValueError("only batch_size = 1 is supported")


def cosine_lr(step: int, total: int, base: float, floor: float = 1e-7) -> float:
    """Cosine decay from ``base`` at step 0 to ``floor`` at step ``total - 1``."""
    if total <= 1:
        return base
    frac = min(step, total - 1) / (total - 1)
    return floor + 0.5 * (base - floor) * (1.0 + math.cos(math.pi * frac))


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


class Adam:
    def __init__(self, params: Sequence[Tensor], betas=(0.9, 0.99), eps: float = 1e-8):
        self.params = list(params)
        self.betas, self.eps = betas, eps
        self.state = OptimizerState([np.zeros_like(p.data) for p in self.params], [np.zeros_like(p.data) for p in self.params])

    def step(self, lr: float) -> None:
        b1, b2 = self.betas
        st = self.state
        st.step += 1
        c1, c2 = 1 - b1**st.step, 1 - b2**st.step
        for p, m, v in zip(self.params, st.m, st.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


# ---------------------------------------------------------------- clips


@dataclass
class ClipSample:
    t_start: int  # 0-based
    lr: np.ndarray
    hr: np.ndarray
    boundary: dict | None
    video: VideoSequence

    @property
    def length(self) -> int:
        return len(self.lr)


def sample_start(frames: int, length: int, rng: np.random.Generator) -> int:
    if length > frames:
        raise ConfigurationError(f"clip length {length} exceeds sequence length {frames}")
    return int(rng.integers(0, frames - length + 1))


def sample_clip(video: VideoSequence, cache: HiddenStateCache | None, length: int, rng: np.random.Generator) -> ClipSample:
    """Draw a uniform clip; with a cache its boundary states are detached copies.

    Without a cache the clip runs standalone from zero states (vanilla BPTT).
    """
    t0 = sample_start(video.frames, length, rng)
    return make_clip(video, cache, t0, length)


def make_clip(video: VideoSequence, cache: HiddenStateCache | None, t0: int, length: int) -> ClipSample:
    boundary = clip_boundary(cache, t0, length) if cache is not None else None
    return ClipSample(t0, video.lr[t0 : t0 + length], video.hr[t0 : t0 + length], boundary, video)


def clip_loss(weights: ModelWeights, cfg: ModelConfig, sample: ClipSample) -> Tensor:
    video = sample.video
    out = forward_clip(
        sample.lr, weights, cfg, t0=sample.t_start, frames=video.frames, boundary=sample.boundary, flows=video.flow
    )
    pred = ad.concat([o.reshape(1, *o.shape) for o in out], axis=0)
    target = np.ascontiguousarray(sample.hr.transpose(0, 3, 1, 2)).astype(pred.dtype)
    return ad.charbonnier_loss(pred, target)


def compute_gradients(weights: ModelWeights, cfg: ModelConfig, sample: ClipSample) -> tuple[float, int]:
    """Forward + backward on one clip; returns (loss, peak tape bytes)."""
    tape = ad.active_tape()
    tape.clear()
    tape.reset_peak()
    weights.zero_grad()
    loss = clip_loss(weights, cfg, sample)
    peak = tape.peak_nbytes
    if not np.isfinite(loss.data):
        tape.clear()
        return float(loss.data), peak
    ad.backward(loss)
    return float(loss.data), peak


def train_step_truncated(weights: ModelWeights, cfg: ModelConfig, sample: ClipSample, opt: Adam, lr: float) -> tuple[float, int]:
    loss, peak = compute_gradients(weights, cfg, sample)
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss} on clip starting at frame {sample.t_start} of {sample.video.name}")
    opt.step(lr)
    return loss, peak


# ---------------------------------------------------------------- loop


@dataclass
class TrainResult:
    weights: ModelWeights
    log: list[dict] = field(default_factory=list)
    cache_builds: int = 0
    cache_ms: float = 0.0
    step_ms: float = 0.0
    peak_tape_bytes: int = 0

    @property
    def iterations(self) -> int:
        return len(self.log)


def train_loop(
    dataset: Sequence[VideoSequence],
    weights: ModelWeights,
    cfg: ModelConfig,
    tcfg: TrainConfig,
    log_path: Path | None = None,
    checkpoint_path: Path | None = None,
    on_step: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``tcfg.iterations`` optimizer updates under the chosen strategy."""
    tcfg.validate()
    if not dataset:
        raise ConfigurationError("empty dataset")
    video_rng, clip_rng = split_rng(tcfg.seed, 2)
    opt = Adam(weights.parameters())
    result = TrainResult(weights)
    writer = None
    fh = None
    if log_path is not None:
        fh = open(log_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=LOG_COLUMNS)
        writer.writeheader()
    it = 0
    try:
        while it < tcfg.iterations:
            video = dataset[int(video_rng.integers(0, len(dataset)))]
            cache = None
            if tcfg.strategy == "truncated":
                t = time.perf_counter()
                _, cache = forward_full(video, weights, cfg, record_cache=True)
                result.cache_ms += (time.perf_counter() - t) * 1e3
                result.cache_builds += 1
            for _ in range(tcfg.samples):
                if it >= tcfg.iterations:
                    break
                t = time.perf_counter()
                sample = sample_clip(video, cache, tcfg.clip_len, clip_rng)
                lr = cosine_lr(it, tcfg.iterations, tcfg.lr, tcfg.lr_floor)
                try:
                    loss, peak = train_step_truncated(weights, cfg, sample, opt, lr)
                except TrainingError:
                    weights.zero_grad()
                    raise
                wall = (time.perf_counter() - t) * 1e3
                result.step_ms += wall
                result.peak_tape_bytes = max(result.peak_tape_bytes, peak)
                row = {"iter": it, "loss": loss, "lr": lr, "tape_bytes_peak": peak, "wall_ms": round(wall, 3)}
                result.log.append(row)
                if writer is not None:
                    writer.writerow(row)
                if on_step is not None:
                    on_step(row)
                it += 1
                if checkpoint_path is not None and tcfg.checkpoint_every and it % tcfg.checkpoint_every == 0:
                    save_checkpoint(checkpoint_path, cfg, weights)
                if it % 100 == 0:
                    logger.info("iter %d loss %.5f lr %.2e", it, loss, lr)
    finally:
        if fh is not None:
            fh.close()
    return result


# ---------------------------------------------------------------- evaluation


def evaluate(weights: ModelWeights | None, cfg: ModelConfig, videos: Sequence[VideoSequence]) -> list[dict]:
    """Per-frame PSNR/SSIM of full-sequence inference, clamped to [0, 1].

    ``weights=None`` evaluates the bicubic upsampling baseline.
    """
    rows = []
    for v in videos:
        if weights is None:
            sr = np.stack([bicubic_upsample(f, v.scale) for f in v.lr])
        else:
            sr, _ = forward_full(v, weights, cfg, record_cache=False)
        sr = np.clip(sr, 0.0, 1.0)
        for t in range(v.frames):
            rows.append({"sequence": v.name, "frame": t, "psnr_db": psnr_rgb(sr[t], v.hr[t]), "ssim": ssim_rgb(sr[t], v.hr[t])})
    return rows


def mean_psnr(rows: Sequence[dict]) -> float:
    return float(np.mean([r["psnr_db"] for r in rows]))


# ---------------------------------------------------------------- strategy comparison


@dataclass(frozen=True)
class Arm:
    strategy: str
    clip_len: int
    samples: int = 1

    @classmethod
    def parse(cls, text: str) -> "Arm":
        parts = text.strip().split(":")
        if parts[0] == "vanilla" and len(parts) in (2, 3):
            return cls("vanilla", int(parts[1]), int(parts[2]) if len(parts) == 3 else 1)
        if parts[0] == "truncated" and len(parts) == 3:
            return cls("truncated", int(parts[1]), int(parts[2]))
        raise ValueError(f"bad arm {text!r}; expected vanilla:L or truncated:L:N")

    @property
    def label(self) -> str:
        return f"vanilla:{self.clip_len}" if self.strategy == "vanilla" else f"truncated:{self.clip_len}:{self.samples}"


def compare_strategies(
    arms: Sequence[Arm],
    train_set: Sequence[VideoSequence],
    eval_set: Sequence[VideoSequence],
    cfg: ModelConfig,
    iterations: int,
    seed: int = 0,
    lr: float = 1e-3,
    init: ModelWeights | None = None,
) -> list[dict]:
    """Train every arm from identical initial weights and seed; report cost and quality."""
    init = init if init is not None else ModelWeights.init(cfg, seed)
    rows = []
    for arm in arms:
        weights = copy_weights(init)
        tcfg = TrainConfig(clip_len=arm.clip_len, samples=arm.samples, iterations=iterations, lr=lr, seed=seed, strategy=arm.strategy)
        t = time.perf_counter()
        res = train_loop(train_set, weights, cfg, tcfg)
        wall = (time.perf_counter() - t) * 1e3
        psnr = mean_psnr(evaluate(weights, cfg, eval_set)) if eval_set else float("nan")
        n = max(res.iterations, 1)
        rows.append({
            "arm": arm.label,
            "peak_tape_bytes": res.peak_tape_bytes,
            "wall_ms_per_iter": wall / n,
            "step_ms_per_iter": res.step_ms / n,
            "cache_ms_per_iter": res.cache_ms / n,
            "cache_builds": res.cache_builds,
            "final_loss": res.log[-1]["loss"] if res.log else float("nan"),
            "final_psnr": psnr,
        })  # fmt: skip
        logger.info("arm %s: peak %d bytes, %.1f ms/iter, PSNR %.3f", arm.label, res.peak_tape_bytes, wall / n, psnr)
    return rows
