"""Bidirectional second-order grid propagation over stacks of RITB blocks.

Frames are indexed from 0. A forward module visits frames in increasing
order and treats ``t-1, t-2`` as the previous frames; a backward module visits
them in decreasing order with ``t+1, t+2``. Module ``m`` (0-based) runs
forward when ``m`` is even.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .ritb import HiddenStatePair, RitbConfig, RitbWeights, ritb_tokens, window_merge, window_partition

FORWARD, BACKWARD = "forward", "backward"

FlowProvider = Callable[[int, int], np.ndarray]


class ConfigurationError(ValueError):
    """Raised when a clip run lacks the boundary states it needs."""


def direction_of(m: int) -> str:
    return FORWARD if m % 2 == 0 else BACKWARD


def zero_flow(shape: tuple[int, int]) -> FlowProvider:
    """Fallback provider reporting no motion anywhere."""

    def provider(src: int, dst: int) -> np.ndarray:
        return np.zeros((2, *shape))

    return provider


# ---------------------------------------------------------------- alignment


def round_half_toward_zero(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.ceil(np.abs(x) - 0.5)


def patch_displacements(flow: np.ndarray, patch: int) -> np.ndarray:
    """Rounded mean flow per patch, ``2 x nPh x nPw`` integers (ragged edges allowed)."""
    _, h, w = flow.shape
    nph, npw = -(-h // patch), -(-w // patch)
    out = np.zeros((2, nph, npw), dtype=np.int64)
    for i in range(nph):
        for j in range(npw):
            block = flow[:, i * patch : (i + 1) * patch, j * patch : (j + 1) * patch]
            out[:, i, j] = round_half_toward_zero(block.reshape(2, -1).mean(axis=1))
    return out


_ALIGN_CACHE: dict[tuple, tuple[np.ndarray, np.ndarray]] = {}


def _align_index(disp: np.ndarray, c: int, h: int, w: int, patch: int):
    key = (disp.tobytes(), c, h, w, patch)
    hit = _ALIGN_CACHE.get(key)
    if hit is not None:
        return hit
    source = np.full(h * w, -1, dtype=np.int64)
    nph, npw = disp.shape[1:]
    for i in range(nph):
        for j in range(npw):
            dx, dy = disp[0, i, j], disp[1, i, j]
            ys, xs = np.mgrid[i * patch : min((i + 1) * patch, h), j * patch : min((j + 1) * patch, w)]
            ty, tx = ys + dy, xs + dx
            ok = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            # later patches overwrite earlier ones, so every source lands at most once
            source[(ty[ok] * w + tx[ok])] = (ys[ok] * w + xs[ok])
    valid = source >= 0
    full_src = (np.arange(c)[:, None] * (h * w) + np.where(valid, source, 0)[None, :]).ravel()
    full_valid = np.broadcast_to(valid, (c, h * w)).ravel()
    if len(_ALIGN_CACHE) > 4096:
        _ALIGN_CACHE.clear()
    _ALIGN_CACHE[key] = (full_src, full_valid)
    return full_src, full_valid


def patch_align(h: Tensor, flow: np.ndarray, patch: int) -> Tensor:
    """Translate each ``patch x patch`` block of ``h`` by its rounded mean flow.

    ``flow`` (``2 x H x W``, x first) carries ``h``'s frame onto the current
    one. Pixels pushed outside the map are dropped; uncovered targets are zero.
    """
    c, hh, ww = h.shape
    disp = patch_displacements(flow, patch)
    if not disp.any():
        return h
    src, valid = _align_index(disp, c, hh, ww, patch)
    return ad.gather_flat(h, src, valid)


# ---------------------------------------------------------------- cache


@dataclass
class HiddenStateCache:
    """Value-only store ``(module, frame) -> C x H x W`` array."""

    modules: int
    frames: int
    states: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)

    def put(self, m: int, t: int, value: Tensor | np.ndarray) -> None:
        data = value.data if isinstance(value, Tensor) else value
        self.states[(m, t)] = np.array(data, copy=True)

    def get(self, m: int, t: int) -> Tensor | None:
        arr = self.states.get((m, t))
        return None if arr is None else Tensor(arr)

    def direction(self, m: int) -> str:
        return direction_of(m)

    def complete(self) -> bool:
        return all((m, t) in self.states for m in range(self.modules) for t in range(self.frames))


def previous_frames(t: int, direction: str) -> tuple[int, int]:
    return (t - 1, t - 2) if direction == FORWARD else (t + 1, t + 2)


def second_order_gather(
    cache: HiddenStateCache,
    m: int,
    direction: str,
    t: int,
    flows: FlowProvider | None = None,
    patch: int = 8,
    like: Tensor | None = None,
) -> HiddenStatePair:
    """Aligned hidden states of the two frames preceding ``t`` in ``direction``.

    Frames outside the sequence contribute zero maps.
    """
    out = []
    for p in previous_frames(t, direction):
        state = cache.get(m, p) if 0 <= p < cache.frames else None
        if state is None:
            ref = like if like is not None else next(iter(cache.states.values()), None)
            if ref is None:
                raise ConfigurationError("cannot infer hidden-state shape from an empty cache")
            out.append(Tensor(np.zeros(ref.shape, dtype=ref.dtype)))
            continue
        out.append(patch_align(state, flows(p, t), patch) if flows is not None else state)
    return HiddenStatePair(*out)


# ---------------------------------------------------------------- modules


@dataclass
class PropagationModuleWeights:
    blocks: list[RitbWeights]
    w_fuse: Tensor  # 3C x C

    @classmethod
    def init(cls, cfg: RitbConfig, n_blocks: int, rng: np.random.Generator, dtype=np.float32):
        blocks = [RitbWeights.init(cfg, rng, dtype) for _ in range(n_blocks)]
        w_fuse = Tensor((rng.normal(0, 0.5 / np.sqrt(3 * cfg.dim), size=(3 * cfg.dim, cfg.dim))).astype(dtype), requires_grad=True)
        return cls(blocks, w_fuse)

    @classmethod
    def zeros(cls, cfg: RitbConfig, n_blocks: int, dtype=np.float32):
        blocks = [RitbWeights.zeros(cfg, dtype) for _ in range(n_blocks)]
        return cls(blocks, Tensor(np.zeros((3 * cfg.dim, cfg.dim), dtype=dtype), requires_grad=True))

    def named(self) -> dict[str, Tensor]:
        out = {"w_fuse": self.w_fuse}
        for n, block in enumerate(self.blocks):
            out.update({f"b{n}.{k}": v for k, v in block.named().items()})
        return out


def _lookup(t, computed, boundary, m, frames, like, role):
    if t in computed:
        return computed[t]
    if t < 0 or t >= frames or boundary is None:
        return Tensor(np.zeros(like.shape, dtype=like.dtype))
    state = boundary.get((m, t))
    if state is None:
        raise ConfigurationError(f"missing boundary state for module {m}, frame {t} ({role})")
    return state


def propagate_direction(
    feats: list[Tensor],
    weights: PropagationModuleWeights,
    cfg: RitbConfig,
    direction: str,
    t0: int = 0,
    frames: int | None = None,
    boundary: Mapping[tuple[int, int], Tensor] | None = None,
    flows: FlowProvider | None = None,
    patch: int | None = None,
    m: int = 0,
    stats: list | None = None,
    block_inputs: dict | None = None,
) -> list[Tensor]:
    """Run one propagation module over ``feats`` (frames ``t0 .. t0+L-1``).

    Returns the per-frame hidden states in time order. With ``boundary=None``
    the clip is treated as a standalone sequence (zero states outside it);
    otherwise states of frames outside the clip but inside ``0 .. frames-1``
    must be present in ``boundary``.
    """
    frames = t0 + len(feats) if frames is None else frames
    patch = patch or cfg.window
    _, h, w = feats[0].shape
    if flows is None:
        flows = zero_flow((h, w))
    order = range(len(feats)) if direction == FORWARD else range(len(feats) - 1, -1, -1)
    computed: dict[int, Tensor] = {}
    for i in order:
        t = t0 + i
        x = feats[i]
        p1, p2 = previous_frames(t, direction)
        raw1 = _lookup(p1, computed, boundary, m, frames, x, "first previous")
        raw2 = _lookup(p2, computed, boundary, m, frames, x, "second previous")
        a1 = patch_align(raw1, flows(p1, t), patch) if 0 <= p1 < frames else raw1
        a2 = patch_align(raw2, flows(p2, t), patch) if 0 <= p2 < frames else raw2
        if block_inputs is not None:
            block_inputs[(m, t)] = (x.data.copy(), a1.data.copy(), a2.data.copy())
        xt, h1t, h2t = (window_partition(v, cfg.window) for v in (x, a1, a2))
        tokens = xt + ad.concat([xt, h1t, h2t], axis=2) @ weights.w_fuse
        for n, block in enumerate(weights.blocks):
            local = [] if stats is not None else None
            tokens = ritb_tokens(tokens, h1t, h2t, block, cfg, local)
            if stats is not None:
                stats.append((m, n, t, local[0]))
        computed[t] = window_merge(tokens, cfg.window, h, w)
    return [computed[t0 + i] for i in range(len(feats))]


def grid_forward(
    feats: list[Tensor],
    modules: list[PropagationModuleWeights],
    cfg: RitbConfig,
    t0: int = 0,
    frames: int | None = None,
    boundary: Mapping[tuple[int, int], Tensor] | None = None,
    flows: FlowProvider | None = None,
    patch: int | None = None,
    cache: HiddenStateCache | None = None,
    stats: list | None = None,
    block_inputs: dict | None = None,
) -> list[Tensor]:
    """Alternate forward/backward modules; each consumes the previous one's outputs."""
    if not modules:
        raise ConfigurationError("need at least one propagation module")
    current = feats
    for m, weights in enumerate(modules):
        current = propagate_direction(
            current, weights, cfg, direction_of(m), t0=t0, frames=frames, boundary=boundary,
            flows=flows, patch=patch, m=m, stats=stats, block_inputs=block_inputs,
        )  # fmt: skip
        if cache is not None:
            for i, state in enumerate(current):
                cache.put(m, t0 + i, state)
    return current
