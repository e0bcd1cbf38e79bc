"""Full network: shallow conv features, grid propagation, pixel-shuffle head."""

from __future__ import annotations

import logging
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import VideoSequence, bicubic_upsample
from .propagation import (
    ConfigurationError,
    HiddenStateCache,
    PropagationModuleWeights,
    grid_forward,
    zero_flow,
)
from .ritb import RitbConfig

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"LRTI"
CHECKPOINT_VERSION = 1
_DTYPE_TAGS = {np.dtype("<f4"): 0, np.dtype("<f8"): 1}


class InputError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    modules: int = 2
    blocks: int = 2
    dim: int = 32
    heads: int = 4
    window: int = 8
    scale: int = 4
    activation: str = "refocus"
    ffn_ratio: int = 2
    recon_channels: int = 8

    def __post_init__(self):
        if self.scale not in (2, 4):
            raise ValueError("scale must be 2 or 4")
        if self.modules < 1 or self.blocks < 1:
            raise ValueError("need at least one module and one block")
        self.ritb  # validates dim/heads/window/activation

    @property
    def ritb(self) -> RitbConfig:
        return RitbConfig(self.dim, self.heads, self.window, self.activation, self.ffn_ratio)

    @classmethod
    def from_dict(cls, values: Mapping[str, object]) -> "ModelConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        out = {}
        for key, value in values.items():
            if key not in kinds:
                raise KeyError(key)
            out[key] = str(value) if key == "activation" else int(value)
        return cls(**out)


@dataclass
class ModelWeights:
    conv_in: Tensor
    conv_in_b: Tensor
    modules: list[PropagationModuleWeights]
    conv_up: Tensor
    conv_up_b: Tensor
    conv_out: Tensor
    conv_out_b: Tensor

    @classmethod
    def init(cls, cfg: ModelConfig, seed: int | np.random.Generator = 0, dtype=np.float32) -> "ModelWeights":
        rng = seed if isinstance(seed, np.random.Generator) else np.random.Generator(np.random.Philox(seed))
        d, c_up, s = cfg.dim, cfg.recon_channels, cfg.scale

        def conv(c_out, c_in, gain=1.0):
            std = gain / np.sqrt(c_in * 9)
            return Tensor(rng.normal(0, std, size=(c_out, c_in, 3, 3)).astype(dtype), requires_grad=True)

        def bias(n):
            return Tensor(np.zeros(n, dtype=dtype), requires_grad=True)

        conv_in = conv(d, 3)
        mods = [PropagationModuleWeights.init(cfg.ritb, cfg.blocks, rng, dtype) for _ in range(cfg.modules)]
        conv_up = conv(c_up * s * s, d)
        conv_out = conv(3, c_up, gain=0.02)
        return cls(conv_in, bias(d), mods, conv_up, bias(c_up * s * s), conv_out, bias(3))

    @classmethod
    def zeros(cls, cfg: ModelConfig, dtype=np.float32) -> "ModelWeights":
        d, c_up, s = cfg.dim, cfg.recon_channels, cfg.scale

        def z(*shape):
            return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True)

        mods = [PropagationModuleWeights.zeros(cfg.ritb, cfg.blocks, dtype) for _ in range(cfg.modules)]
        return cls(z(d, 3, 3, 3), z(d), mods, z(c_up * s * s, d, 3, 3), z(c_up * s * s), z(3, c_up, 3, 3), z(3))

    def named(self) -> dict[str, Tensor]:
        out = {"conv_in.w": self.conv_in, "conv_in.b": self.conv_in_b}
        for m, mod in enumerate(self.modules):
            out.update({f"m{m}.{k}": v for k, v in mod.named().items()})
        out.update({
            "conv_up.w": self.conv_up, "conv_up.b": self.conv_up_b,
            "conv_out.w": self.conv_out, "conv_out.b": self.conv_out_b,
        })  # fmt: skip
        return out

    def parameters(self) -> list[Tensor]:
        return list(self.named().values())

    def parameter_count(self) -> int:
        return int(sum(p.size for p in self.parameters()))

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def astype(self, dtype) -> "ModelWeights":
        return _map_weights(self, lambda t: Tensor(t.data.astype(dtype), requires_grad=True))


def _map_weights(w: ModelWeights, fn) -> ModelWeights:
    mods = []
    for mod in w.modules:
        blocks = [type(b)(**{k: fn(v) for k, v in b.named().items()}) for b in mod.blocks]
        mods.append(PropagationModuleWeights(blocks, fn(mod.w_fuse)))
    return ModelWeights(fn(w.conv_in), fn(w.conv_in_b), mods, fn(w.conv_up), fn(w.conv_up_b), fn(w.conv_out), fn(w.conv_out_b))


def copy_weights(w: ModelWeights) -> ModelWeights:
    return _map_weights(w, lambda t: Tensor(t.data.copy(), requires_grad=True))


# ---------------------------------------------------------------- forward


def _frame_tensor(frame: np.ndarray, dtype) -> Tensor:
    return Tensor(np.ascontiguousarray(frame.transpose(2, 0, 1)).astype(dtype))


def shallow_features(lr_frame: Tensor, weights: ModelWeights) -> Tensor:
    return ad.conv2d(lr_frame, weights.conv_in) + weights.conv_in_b.reshape(-1, 1, 1)


def reconstruct(features: Tensor, lr_frame: np.ndarray, weights: ModelWeights, s: int) -> Tensor:
    """``C x h x w`` features -> ``3 x sh x sw`` frame with a bicubic global residual.

    ``lr_frame`` is the ``h x w x 3`` low-resolution input of the same frame.
    """
    up = ad.conv2d(features, weights.conv_up) + weights.conv_up_b.reshape(-1, 1, 1)
    up = ad.pixel_shuffle(up, s)
    out = ad.conv2d(up, weights.conv_out) + weights.conv_out_b.reshape(-1, 1, 1)
    base = bicubic_upsample(lr_frame, s).transpose(2, 0, 1).astype(out.dtype)
    return out + Tensor(np.ascontiguousarray(base))


def clip_boundary(cache: HiddenStateCache, t0: int, length: int) -> dict[tuple[int, int], Tensor]:
    """Frozen boundary states for a clip: the two frames before it and the two after.

    Each module gets all four entries that lie inside the sequence; the module's
    direction decides which pair its recursion actually reads.
    """
    out = {}
    for m in range(cache.modules):
        for t in (t0 - 2, t0 - 1, t0 + length, t0 + length + 1):
            if 0 <= t < cache.frames:
                state = cache.get(m, t)
                if state is None:
                    raise ConfigurationError(f"cache lacks module {m}, frame {t}")
                out[(m, t)] = state.detach()
    return out


def forward_clip(
    lr: np.ndarray,
    weights: ModelWeights,
    cfg: ModelConfig,
    t0: int = 0,
    frames: int | None = None,
    boundary: Mapping[tuple[int, int], Tensor] | None = None,
    flows=None,
    cache: HiddenStateCache | None = None,
    stats: list | None = None,
    block_inputs: dict | None = None,
) -> list[Tensor]:
    """Super-resolve the clip ``lr`` (``L x h x w x 3``) sitting at frames ``t0..t0+L-1``.

    ``boundary`` holds detached states for frames just outside the clip; any
    frame in range that is neither in the clip nor in ``boundary`` raises.
    """
    if not np.all(np.isfinite(lr)):
        raise InputError("non-finite values in input frames")
    frames = t0 + len(lr) if frames is None else frames
    if boundary:
        for (m, t), state in boundary.items():
            if state.shape != (cfg.dim, lr.shape[1], lr.shape[2]):
                raise ConfigurationError(f"boundary state ({m}, {t}) has shape {state.shape}")
            if state.requires_grad:
                boundary = {k: v.detach() for k, v in boundary.items()}
                break
    dtype = weights.conv_in.dtype
    flows = flows or zero_flow(lr.shape[1:3])
    lr_t = [_frame_tensor(f, dtype) for f in lr]
    feats = [shallow_features(x, weights) for x in lr_t]
    refined = grid_forward(
        feats, weights.modules, cfg.ritb, t0=t0, frames=frames, boundary=boundary, flows=flows,
        patch=cfg.window, cache=cache, stats=stats, block_inputs=block_inputs,
    )  # fmt: skip
    return [reconstruct(f, frame, weights, cfg.scale) for f, frame in zip(refined, lr)]


def forward_full(
    video: VideoSequence | np.ndarray,
    weights: ModelWeights,
    cfg: ModelConfig,
    record_cache: bool = True,
    stats: list | None = None,
) -> tuple[np.ndarray, HiddenStateCache | None]:
    """Whole-sequence inference with recording disabled.

    Returns the ``T x sH x sW x 3`` output (unclamped) and, if requested, the
    complete hidden-state cache.
    """
    lr = video.lr if isinstance(video, VideoSequence) else np.asarray(video)
    if lr.ndim != 4 or lr.shape[0] < 1:
        raise InputError(f"expected T x H x W x 3 frames, got {lr.shape}")
    flows = video.flow if isinstance(video, VideoSequence) else None
    cache = HiddenStateCache(cfg.modules, lr.shape[0]) if record_cache else None
    with ad.no_grad():
        out = forward_clip(lr, weights, cfg, flows=flows, cache=cache, stats=stats)
    sr = np.stack([o.data.transpose(1, 2, 0) for o in out])
    return sr, cache


def to_video(frames: list[Tensor]) -> np.ndarray:
    return np.stack([f.data.transpose(1, 2, 0) for f in frames])


# ---------------------------------------------------------------- checkpoint


def _config_text(cfg: ModelConfig) -> bytes:
    return "".join(f"{k} = {v}\n" for k, v in asdict(cfg).items()).encode("utf-8")


def save_checkpoint(path: Path, cfg: ModelConfig, weights: ModelWeights) -> None:
    """Write ``LRTI`` magic, version, config record and a parameter table."""
    named = weights.named()
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION)]
    text = _config_text(cfg)
    parts += [struct.pack("<I", len(text)), text, struct.pack("<I", len(named))]
    for name, tensor in named.items():
        arr = np.ascontiguousarray(tensor.data)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        key = name.encode("utf-8")
        parts += [struct.pack("<I", len(key)), key, struct.pack("<BI", _DTYPE_TAGS[arr.dtype], arr.ndim)]
        parts += [struct.pack(f"<{arr.ndim}I", *arr.shape), arr.tobytes()]
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path: Path, expect: ModelConfig | None = None) -> tuple[ModelConfig, ModelWeights]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    (n,) = struct.unpack_from("<I", raw, 8)
    pos = 12 + n
    values = {}
    for line in raw[12:pos].decode("utf-8").splitlines():
        k, v = line.split("=", 1)
        values[k.strip()] = v.strip()
    cfg = ModelConfig.from_dict(values)
    if expect is not None:
        for f in fields(ModelConfig):
            if getattr(cfg, f.name) != getattr(expect, f.name):
                raise CheckpointError(
                    f"checkpoint/config mismatch in field {f.name!r}: "
                    f"{getattr(cfg, f.name)} vs {getattr(expect, f.name)}"
                )
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    tags = {v: k for k, v in _DTYPE_TAGS.items()}
    arrays = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos : pos + klen].decode("utf-8")
        pos += klen
        tag, rank = struct.unpack_from("<BI", raw, pos)
        pos += 5
        shape = struct.unpack_from(f"<{rank}I", raw, pos)
        pos += 4 * rank
        dtype = tags[tag]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(raw[pos : pos + nbytes], dtype=dtype).reshape(shape).copy()
        pos += nbytes
    first = next(iter(arrays.values()))
    weights = ModelWeights.zeros(cfg, dtype=first.dtype)
    named = weights.named()
    if set(named) != set(arrays):
        missing = sorted(set(named) ^ set(arrays))
        raise CheckpointError(f"{path}: parameter names do not match config: {missing[:5]}")
    for name, tensor in named.items():
        if tensor.shape != arrays[name].shape:
            raise CheckpointError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {tensor.shape}")
        tensor.data = arrays[name]
    return cfg, weights


# ---------------------------------------------------------------- attention statistics


def attention_statistics(
    video: VideoSequence, weights: ModelWeights, cfg: ModelConfig, frames: Sequence[int] | None = None
) -> list[dict]:
    """Sparsity of both activations on the same pre-activation scores.

    One row per (block, frame); ``block`` counts depth across modules.
    """
    from .ritb import activate_array, top_mass, zero_fraction

    stats: list = []
    forward_full(video, weights, cfg, record_cache=False, stats=stats)
    keep = None if frames is None else set(frames)
    other = "softmax" if cfg.activation == "refocus" else "refocus"
    rows = []
    for m, n, t, scores in stats:
        if keep is not None and t not in keep:
            continue
        main = activate_array(scores, cfg.activation)
        base = activate_array(scores, other)
        rows.append({
            "block": m * cfg.blocks + n, "module": m, "frame": t, "activation": cfg.activation,
            "zero_fraction": zero_fraction(main), "top50_mass": top_mass(main),
            "baseline_zero_fraction": zero_fraction(base), "baseline_top50_mass": top_mass(base),
        })  # fmt: skip
    rows.sort(key=lambda r: (r["block"], r["frame"]))
    return rows
