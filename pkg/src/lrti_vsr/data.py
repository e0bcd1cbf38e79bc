"""Synthetic videos with known motion, bicubic degradation and frame I/O."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import DimensionError

logger = logging.getLogger(__name__)

BICUBIC_A = -0.5


class FormatError(ValueError):
    """Raised on malformed frame or flow files."""


# ---------------------------------------------------------------- bicubic


def cubic_kernel(x: np.ndarray, a: float = BICUBIC_A) -> np.ndarray:
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def _reflect_index(idx: np.ndarray, n: int) -> np.ndarray:
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    idx = np.mod(idx, period)
    return np.where(idx >= n, period - idx, idx)


def resample_matrix(n_in: int, n_out: int, scale: float, antialias: bool) -> np.ndarray:
    """Dense ``n_out x n_in`` bicubic resampling operator with reflect edges.

    ``scale`` is ``n_out / n_in``. When ``antialias`` is set and the operator
    shrinks, the kernel support is widened by ``1/scale``. Rows sum to one.
    """
    stretch = 1.0 / scale if (antialias and scale < 1) else 1.0
    support = 2.0 * stretch
    centers = (np.arange(n_out) + 0.5) / scale - 0.5
    first = np.floor(centers - support).astype(int) + 1
    taps = int(np.ceil(2 * support)) + 1
    idx = first[:, None] + np.arange(taps)[None, :]
    weights = cubic_kernel((idx - centers[:, None]) / stretch)
    weights /= weights.sum(axis=1, keepdims=True)
    mat = np.zeros((n_out, n_in))
    rows = np.repeat(np.arange(n_out), taps)
    np.add.at(mat, (rows, _reflect_index(idx, n_in).ravel()), weights.ravel())
    return mat


def _apply_separable(img: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    # img: H x W x C
    out = np.einsum("ih,hwc->iwc", mh, img, optimize=True)
    return np.einsum("jw,iwc->ijc", mw, out, optimize=True)


def bicubic_downsample(img: np.ndarray, s: int) -> np.ndarray:
    """Anti-aliased bicubic downscale of an ``H x W x C`` (or ``H x W``) image by ``s``."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    if h % s or w % s:
        raise DimensionError(f"image extents {h}x{w} not divisible by scale {s}")
    if s == 1:
        out = img.astype(np.float64, copy=True)
    else:
        mh = resample_matrix(h, h // s, 1.0 / s, antialias=True)
        mw = resample_matrix(w, w // s, 1.0 / s, antialias=True)
        out = _apply_separable(img.astype(np.float64), mh, mw)
    return out[..., 0] if squeeze else out


def bicubic_upsample(img: np.ndarray, s: int) -> np.ndarray:
    """Bicubic upscale of an ``H x W x C`` (or ``H x W``) image by integer ``s``."""
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    h, w = img.shape[:2]
    if s == 1:
        out = img.astype(np.float64, copy=True)
    else:
        out = _apply_separable(img.astype(np.float64), upsample_matrix(h, s), upsample_matrix(w, s))
    return out[..., 0] if squeeze else out


_UP_CACHE: dict[tuple[int, int], np.ndarray] = {}


def upsample_matrix(n: int, s: int) -> np.ndarray:
    key = (n, s)
    if key not in _UP_CACHE:
        _UP_CACHE[key] = resample_matrix(n, n * s, float(s), antialias=False)
    return _UP_CACHE[key]


# ---------------------------------------------------------------- generator


@dataclass
class SyntheticSpec:
    frames: int = 16
    height: int = 64
    width: int = 64
    sprites: int = 3
    max_speed: int = 3
    sprite_size: tuple[int, int] = (12, 24)
    velocities: list[tuple[int, int]] | None = None
    background: str = "smooth"
    scale: int = 4
    seed: int = 0

    def validate(self, window: int = 8) -> None:
        if self.frames < 1:
            raise ValueError("frames must be >= 1")
        block = self.scale * window
        if self.height % block or self.width % block:
            raise ValueError(f"HR extents must be divisible by {block}")
        if self.sprites < 0:
            raise ValueError("sprites must be >= 0")
        if self.background not in ("smooth", "flat"):
            raise ValueError(f"unknown background kind {self.background!r}")
        if self.velocities is not None and len(self.velocities) != self.sprites:
            raise ValueError("need one velocity per sprite")
        speed = max(self.height, self.width) // 2
        for vx, vy in self.velocities or []:
            if abs(vx) > speed or abs(vy) > speed:
                raise ValueError("sprite velocity too large to stay renderable")


@dataclass
class VideoSequence:
    """HR/LR frames (``T x H x W x 3`` in [0, 1]) plus LR-resolution motion.

    ``flow_fwd[t]`` displaces frame ``t`` content into frame ``t+1``;
    ``flow_bwd[t]`` displaces frame ``t`` content into frame ``t-1``. Both are
    ``2 x h x w`` with x (column) first and are zero where undefined.
    """

    hr: np.ndarray
    lr: np.ndarray
    flow_fwd: np.ndarray
    flow_bwd: np.ndarray
    scale: int = 4
    name: str = "seq"

    @property
    def frames(self) -> int:
        return self.lr.shape[0]

    def flow(self, src: int, dst: int) -> np.ndarray:
        """Displacement carrying frame ``src`` content to frame ``dst`` (0-based)."""
        step = 1 if dst > src else -1
        total = np.zeros_like(self.flow_fwd[0])
        for t in range(src, dst, step):
            total += self.flow_fwd[t] if step > 0 else self.flow_bwd[t]
        return total


def _smooth_background(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    coarse = rng.uniform(0.15, 0.85, size=(h // 16, w // 16, 3))
    return np.clip(bicubic_upsample(coarse, 16), 0.0, 1.0)


def _sprite_texture(rng: np.random.Generator, sh: int, sw: int) -> np.ndarray:
    # one dark and one bright colour: high-contrast edges
    colors = np.stack([rng.uniform(0.1, 0.3, size=3), rng.uniform(0.7, 0.9, size=3)])
    period = int(rng.integers(8, 17))
    yy, xx = np.mgrid[0:sh, 0:sw]
    kind = int(rng.integers(0, 3))
    if kind == 0:
        pattern = ((xx // period) + (yy // period)) % 2
    elif kind == 1:
        pattern = (xx // period) % 2
    else:
        pattern = ((xx + yy) // period) % 2
    return colors[pattern]


def generate(spec: SyntheticSpec) -> VideoSequence:
    """Render textured sprites moving at constant integer HR velocity."""
    spec.validate(window=1)
    rng = np.random.Generator(np.random.Philox(spec.seed))
    T, H, W, s = spec.frames, spec.height, spec.width, spec.scale
    if spec.background == "smooth":
        bg = _smooth_background(rng, H, W)
    else:
        bg = np.full((H, W, 3), 0.5)

    sprites = []
    for k in range(spec.sprites):
        sh, sw = (int(v) for v in rng.integers(spec.sprite_size[0], spec.sprite_size[1] + 1, size=2))
        if spec.velocities is not None:
            vel = tuple(int(v) for v in spec.velocities[k])
        else:
            vel = tuple(int(v) for v in rng.integers(-spec.max_speed, spec.max_speed + 1, size=2))
        # anchor the sprite inside the frame at mid-sequence
        mid = (T - 1) // 2
        y0 = int(rng.integers(0, max(H - sh, 1))) - vel[1] * mid
        x0 = int(rng.integers(0, max(W - sw, 1))) - vel[0] * mid
        sprites.append((y0, x0, sh, sw, vel, _sprite_texture(rng, sh, sw)))

    hr = np.empty((T, H, W, 3))
    for t in range(T):
        frame = bg.copy()
        for y0, x0, sh, sw, (vx, vy), tex in sprites:
            y, x = y0 + vy * t, x0 + vx * t
            ya, yb, xa, xb = max(y, 0), min(y + sh, H), max(x, 0), min(x + sw, W)
            if ya < yb and xa < xb:
                frame[ya:yb, xa:xb] = tex[ya - y : yb - y, xa - x : xb - x]
        hr[t] = frame

    lr = np.stack([bicubic_downsample(f, s) for f in hr])
    fwd = np.stack([_velocity_field(sprites, t, H, W, s) for t in range(T)])
    bwd = -fwd
    fwd[T - 1] = 0.0
    bwd[0] = 0.0
    return VideoSequence(hr=hr, lr=lr, flow_fwd=fwd, flow_bwd=bwd, scale=s)


def _velocity_field(sprites, t: int, H: int, W: int, s: int) -> np.ndarray:
    """LR-pixel velocity of whatever sprite is on top, block-averaged from HR."""
    field_hr = np.zeros((2, H, W))
    for y0, x0, sh, sw, (vx, vy), _ in sprites:
        y, x = y0 + vy * t, x0 + vx * t
        ya, yb, xa, xb = max(y, 0), min(y + sh, H), max(x, 0), min(x + sw, W)
        if ya < yb and xa < xb:
            field_hr[0, ya:yb, xa:xb] = vx
            field_hr[1, ya:yb, xa:xb] = vy
    return field_hr.reshape(2, H // s, s, W // s, s).mean(axis=(2, 4)) / s


# ---------------------------------------------------------------- I/O


def write_ppm(path: Path, img: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_ppm(path: Path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"missing frame file: {path}")
    raw = path.read_bytes()
    pos = 0
    tokens: list[int] = []
    if raw[:2] != b"P6":
        raise FormatError(f"{path}: bad magic at byte offset 0")
    pos = 2
    while len(tokens) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and raw[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError(f"{path}: malformed header at byte offset {start}")
        tokens.append(int(raw[start:pos]))
    if pos >= len(raw) or not raw[pos : pos + 1].isspace():
        raise FormatError(f"{path}: malformed header at byte offset {pos}")
    pos += 1
    w, h, maxval = tokens
    if maxval != 255:
        raise FormatError(f"{path}: unsupported maxval {maxval} at byte offset {pos - 1}")
    body = raw[pos:]
    if len(body) != w * h * 3:
        raise FormatError(f"{path}: expected {w * h * 3} pixel bytes at byte offset {pos}, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).astype(np.float64) / 255.0


def save_frames(seq: VideoSequence, directory: Path) -> None:
    """Write ``hr/``, ``lr/`` PPM frames and ``flow/`` float planes.

    Each ``flow/%06d.f32`` holds four little-endian float32 planes at LR size:
    forward x, forward y, backward x, backward y.
    """
    directory = Path(directory)
    for sub in ("hr", "lr", "flow"):
        (directory / sub).mkdir(parents=True, exist_ok=True)
    for t in range(seq.frames):
        write_ppm(directory / "hr" / f"{t:06d}.ppm", seq.hr[t])
        write_ppm(directory / "lr" / f"{t:06d}.ppm", seq.lr[t])
        planes = np.concatenate([seq.flow_fwd[t], seq.flow_bwd[t]]).astype("<f4")
        (directory / "flow" / f"{t:06d}.f32").write_bytes(planes.tobytes())
    (directory / "meta.txt").write_text(f"frames = {seq.frames}\nscale = {seq.scale}\n")


def load_frames(directory: Path) -> VideoSequence:
    directory = Path(directory)
    meta = directory / "meta.txt"
    if not meta.exists():
        raise FileNotFoundError(f"missing sequence metadata: {meta}")
    info = dict(
        (k.strip(), v.strip()) for k, v in (line.split("=", 1) for line in meta.read_text().splitlines() if "=" in line)
    )
    T, s = int(info["frames"]), int(info["scale"])
    hr = np.stack([read_ppm(directory / "hr" / f"{t:06d}.ppm") for t in range(T)])
    lr = np.stack([read_ppm(directory / "lr" / f"{t:06d}.ppm") for t in range(T)])
    h, w = lr.shape[1:3]
    fwd = np.zeros((T, 2, h, w))
    bwd = np.zeros((T, 2, h, w))
    for t in range(T):
        path = directory / "flow" / f"{t:06d}.f32"
        if not path.exists():
            raise FileNotFoundError(f"missing flow file: {path}")
        raw = path.read_bytes()
        if len(raw) != 4 * 4 * h * w:
            raise FormatError(f"{path}: expected {16 * h * w} bytes, found {len(raw)} at byte offset 0")
        planes = np.frombuffer(raw, dtype="<f4").reshape(4, h, w).astype(np.float64)
        fwd[t], bwd[t] = planes[:2], planes[2:]
    return VideoSequence(hr=hr, lr=lr, flow_fwd=fwd, flow_bwd=bwd, scale=s, name=directory.name)


def write_manifest(path: Path, dirs: list[Path]) -> None:
    path = Path(path)
    lines = [os.path.relpath(d, path.parent) for d in dirs]
    path.write_text("".join(f"{line}\n" for line in lines))


def read_manifest(path: Path) -> list[Path]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"manifest not found: {path}")
    out = []
    for line in path.read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            p = Path(line)
            out.append(p if p.is_absolute() else path.parent / p)
    return out


def load_dataset(manifest: Path) -> list[VideoSequence]:
    return [load_frames(d) for d in read_manifest(manifest)]
