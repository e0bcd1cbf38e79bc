"""Refocused intra&inter-frame transformer block.

Queries come from the current frame's window tokens; keys and values come
from the two aligned previous hidden states stacked with the current tokens.
Scores are activated by a squared rectifier (or softmax, as a baseline), and
the feed-forward part gates a projection of the previous hidden state.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import NamedTuple

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

ACTIVATIONS = ("refocus", "softmax")


class AlignmentError(ValueError):
    """Raised when hidden states are not on the current frame's grid."""


@dataclass(frozen=True)
class RitbConfig:
    dim: int = 32
    heads: int = 4
    window: int = 8
    activation: str = "refocus"
    ffn_ratio: int = 2

    def __post_init__(self):
        if self.dim % self.heads:
            raise ValueError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def head_dim(self) -> int:
        return self.dim // self.heads


class HiddenStatePair(NamedTuple):
    """Aligned hidden states of the two previous frames (``C x H x W`` each)."""

    h_prev1: Tensor
    h_prev2: Tensor


@dataclass
class RitbWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    bias_table: Tensor  # heads x (2w-1)^2
    w_fx: Tensor
    w_fh: Tensor
    w_g: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    lnh_g: Tensor  # gain-only norm on hidden-state tokens, so zero states stay zero

    @classmethod
    def init(cls, cfg: RitbConfig, rng: np.random.Generator, dtype=np.float32) -> "RitbWeights":
        d, hid = cfg.dim, cfg.dim * cfg.ffn_ratio

        def normal(shape, std):
            return Tensor(rng.normal(0.0, std, size=shape).astype(dtype), requires_grad=True)

        return cls(
            w_q=normal((d, d), 0.4 / np.sqrt(d)),
            w_k=normal((d, d), 0.4 / np.sqrt(d)),
            w_v=normal((d, d), 1.0 / np.sqrt(d)),
            bias_table=normal((cfg.heads, (2 * cfg.window - 1) ** 2), 0.02),
            w_fx=normal((d, hid), 1.0 / np.sqrt(d)),
            w_fh=normal((d, hid), 1.0 / np.sqrt(d)),
            w_g=normal((hid, d), 0.5 / np.sqrt(hid)),
            ln1_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            ln1_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            ln2_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
            ln2_b=Tensor(np.zeros(d, dtype=dtype), requires_grad=True),
            lnh_g=Tensor(np.ones(d, dtype=dtype), requires_grad=True),
        )

    @classmethod
    def zeros(cls, cfg: RitbConfig, dtype=np.float32) -> "RitbWeights":
        d, hid = cfg.dim, cfg.dim * cfg.ffn_ratio
        shapes = {
            "w_q": (d, d), "w_k": (d, d), "w_v": (d, d),
            "bias_table": (cfg.heads, (2 * cfg.window - 1) ** 2),
            "w_fx": (d, hid), "w_fh": (d, hid), "w_g": (hid, d),
            "ln1_g": (d,), "ln1_b": (d,), "ln2_g": (d,), "ln2_b": (d,), "lnh_g": (d,),
        }  # fmt: skip
        return cls(**{k: Tensor(np.zeros(v, dtype=dtype), requires_grad=True) for k, v in shapes.items()})

    def named(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ---------------------------------------------------------------- windows


def padded_extent(n: int, window: int) -> int:
    return -(-n // window) * window


def window_partition(x: Tensor, window: int) -> Tensor:
    """``C x H x W`` -> ``nWindows x window^2 x C``, reflect-padding ragged edges."""
    c, h, w = x.shape
    x = ad.pad_reflect(x, padded_extent(h, window) - h, padded_extent(w, window) - w)
    hp, wp = x.shape[1:]
    t = x.reshape(c, hp // window, window, wp // window, window)
    t = t.transpose(1, 3, 2, 4, 0)
    return t.reshape((hp // window) * (wp // window), window * window, c)


def window_merge(tokens: Tensor, window: int, h: int, w: int) -> Tensor:
    """Inverse of :func:`window_partition`, cropping any padding."""
    c = tokens.shape[-1]
    hp, wp = padded_extent(h, window), padded_extent(w, window)
    t = tokens.reshape(hp // window, wp // window, window, window, c)
    t = t.transpose(4, 0, 2, 1, 3).reshape(c, hp, wp)
    if hp != h or wp != w:
        t = t[:, :h, :w]
    return t


_REL_INDEX: dict[int, np.ndarray] = {}


def relative_position_index(window: int) -> np.ndarray:
    """``window^2 x 3*window^2`` index into the bias table.

    The three key groups (two hidden states, current frame) share the query's
    spatial grid, so the within-window offset table is tiled three times.
    """
    if window not in _REL_INDEX:
        ys, xs = np.meshgrid(np.arange(window), np.arange(window), indexing="ij")
        coords = np.stack([ys.ravel(), xs.ravel()])
        rel = coords[:, :, None] - coords[:, None, :] + (window - 1)
        idx = rel[0] * (2 * window - 1) + rel[1]
        _REL_INDEX[window] = np.tile(idx, (1, 3))
    return _REL_INDEX[window]


# ---------------------------------------------------------------- attention


def make_qkv(x_tokens: Tensor, h1_tokens: Tensor, h2_tokens: Tensor, w: RitbWeights):
    """Queries from the current tokens; keys/values from ``[h1; h2; x]``."""
    if not (x_tokens.shape == h1_tokens.shape == h2_tokens.shape):
        raise AlignmentError(
            f"hidden states {h1_tokens.shape}/{h2_tokens.shape} do not match current tokens {x_tokens.shape}"
        )
    source = ad.concat([h1_tokens, h2_tokens, x_tokens], axis=1)
    return x_tokens @ w.w_q, source @ w.w_k, source @ w.w_v


def _split_heads(t: Tensor, heads: int) -> Tensor:
    nw, n, c = t.shape
    return t.reshape(nw, n, heads, c // heads).transpose(0, 2, 1, 3)


def attention_scores(q: Tensor, k: Tensor, bias_table: Tensor, heads: int, window: int) -> Tensor:
    """Pre-activation scores ``Q K^T / sqrt(d_head) + B``, ``nW x heads x n x 3n``."""
    qh = _split_heads(q, heads)
    kh = _split_heads(k, heads).transpose(0, 1, 3, 2)
    scale = 1.0 / np.sqrt(q.shape[-1] // heads)
    bias = ad.take(bias_table, relative_position_index(window), axis=1)
    return ad.matmul(qh, kh) * scale + bias


def activate(scores: Tensor, activation: str) -> Tensor:
    if activation == "refocus":
        return ad.relu2(scores)
    return ad.softmax(scores, axis=-1)


def refocused_attention(q, k, v, bias_table, heads, activation="refocus", window=None, stats=None):
    """Windowed multi-head attention with ReLU^2 (or softmax) scores.

    If ``stats`` is a list, the pre-activation score array is appended to it.
    """
    window = window or int(round(np.sqrt(q.shape[1])))
    scores = attention_scores(q, k, bias_table, heads, window)
    if stats is not None:
        stats.append(scores.data.copy())
    attn = activate(scores, activation)
    out = ad.matmul(attn, _split_heads(v, heads))
    nw, _, n, _ = out.shape
    return out.transpose(0, 2, 1, 3).reshape(nw, n, q.shape[-1])


def rgu_ffn(x_attn: Tensor, h_prev1: Tensor, w: RitbWeights) -> Tensor:
    """Gate a projection of the previous hidden state by ``relu2`` of the current one."""
    if x_attn.shape != h_prev1.shape:
        raise ad.DimensionError(f"rgu_ffn shape mismatch: {x_attn.shape} vs {h_prev1.shape}")
    gate = ad.relu2(x_attn @ w.w_fx)
    return (gate * (h_prev1 @ w.w_fh)) @ w.w_g


def normalize_hidden(h: Tensor, gain: Tensor) -> Tensor:
    """Layer-normalise hidden-state tokens without a shift."""
    return ad.layer_norm(h, gain, Tensor(np.zeros(h.shape[-1], dtype=h.dtype)))


def ritb_tokens(x: Tensor, h1: Tensor, h2: Tensor, w: RitbWeights, cfg: RitbConfig, stats=None) -> Tensor:
    """One block on window tokens; pre-norm with two residual branches."""
    xn = ad.layer_norm(x, w.ln1_g, w.ln1_b)
    h1, h2 = normalize_hidden(h1, w.lnh_g), normalize_hidden(h2, w.lnh_g)
    q, k, v = make_qkv(xn, h1, h2, w)
    y = x + refocused_attention(q, k, v, w.bias_table, cfg.heads, cfg.activation, cfg.window, stats)
    yn = ad.layer_norm(y, w.ln2_g, w.ln2_b)
    return y + rgu_ffn(yn, h1, w)


def ritb_forward(x: Tensor, pair: HiddenStatePair, w: RitbWeights, cfg: RitbConfig, stats=None) -> Tensor:
    """Shape-preserving block on a ``C x H x W`` feature map."""
    h1, h2 = pair
    if h1.shape != x.shape or h2.shape != x.shape:
        raise AlignmentError(f"hidden states {h1.shape}/{h2.shape} not aligned with features {x.shape}")
    _, h, wd = x.shape
    part = [window_partition(t, cfg.window) for t in (x, h1, h2)]
    out = ritb_tokens(*part, w, cfg, stats)
    return window_merge(out, cfg.window, h, wd)


# ---------------------------------------------------------------- statistics


def zero_fraction(activated: np.ndarray) -> float:
    return float(np.mean(activated == 0))


def top_mass(activated: np.ndarray, k: int = 50) -> float:
    """Mean over (window, head) maps of the share held by the ``k`` largest entries."""
    maps = activated.reshape(-1, activated.shape[-2] * activated.shape[-1])
    k = min(k, maps.shape[1])
    top = np.partition(maps, maps.shape[1] - k, axis=1)[:, -k:].sum(axis=1)
    total = maps.sum(axis=1)
    keep = total > 0
    if not keep.any():
        return 0.0
    return float(np.mean(top[keep] / total[keep]))


def activate_array(scores: np.ndarray, activation: str) -> np.ndarray:
    with ad.no_grad():
        return activate(Tensor(scores), activation).data
