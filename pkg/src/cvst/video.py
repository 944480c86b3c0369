"""Synthetic clips, PSNR and the raw planar clip format."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .errors import InvalidInput, ShapeMismatch
from .numerics import SeededRng

RAW_MAGIC = 0x54535643  # b"CVST" little-endian
PSNR_CAP_DB = 99.0


@dataclass(frozen=True)
class ClipSpec:
    """A translating scene: smooth coloured blobs over a gradient with fine texture.

    ``speed`` is the per-frame displacement ``(dx, dy)`` in pixels: frame ``t``
    at ``(y, x)`` shows what frame ``t - 1`` had at ``(y + dy, x + dx)``; ``noise`` is i.i.d.
    per-frame sensor noise added on top.
    """

    height: int = 32
    width: int = 32
    frames: int = 12
    speed: tuple = (4, 0)
    blobs: int = 6
    texture: float = 0.04
    noise: float = 0.01
    pattern_seed: int = 0

    def __post_init__(self):
        if self.height < 1 or self.width < 1 or self.frames < 1:
            raise InvalidInput("clip dimensions must be positive")


def _canvas(spec: ClipSpec, rng: SeededRng, ch, cw):
    yy, xx = np.mgrid[0:ch, 0:cw].astype(np.float64)
    base = np.stack([0.15 + 0.6 * yy / ch, 0.2 + 0.5 * xx / cw, 0.5 + 0.3 * np.sin(xx / 9.0 + yy / 13.0)])
    img = base.copy()
    scale = min(spec.height, spec.width)
    for _ in range(spec.blobs):
        cy, cx = rng.uniform(0, ch), rng.uniform(0, cw)
        r = rng.uniform(0.12, 0.3) * scale
        color = rng.uniform(0.0, 1.0, 3)
        w = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * r * r))
        img = img * (1 - w) + color[:, None, None] * w
    if spec.texture > 0:
        tex = rng.normal(0.0, 1.0, (ch, cw))
        tex = (tex + np.roll(tex, 1, 0) + np.roll(tex, 1, 1) + np.roll(tex, (1, 1), (0, 1))) / 2.0
        img = img + spec.texture * tex
    return np.clip(img, 0.0, 1.0)


def synth_video(spec: ClipSpec, rng: SeededRng | None = None) -> np.ndarray:
    """Render ``(T, 3, H, W)`` frames in [0, 1]; deterministic in ``spec.pattern_seed`` and ``rng``."""
    rng = rng or SeededRng(spec.pattern_seed)
    pat = rng.spawn("pattern", spec.pattern_seed)
    dx, dy = (int(v) for v in spec.speed)
    T = spec.frames
    pad_y, pad_x = abs(dy) * (T - 1), abs(dx) * (T - 1)
    ch, cw = spec.height + pad_y, spec.width + pad_x
    canvas = _canvas(spec, pat, ch, cw)
    oy0 = pad_y if dy < 0 else 0
    ox0 = pad_x if dx < 0 else 0
    out = np.empty((T, 3, spec.height, spec.width))
    for t in range(T):
        oy, ox = oy0 + t * dy, ox0 + t * dx
        out[t] = canvas[:, oy:oy + spec.height, ox:ox + spec.width]
    if spec.noise > 0:
        out = out + rng.spawn("noise", spec.pattern_seed).normal(0.0, spec.noise, out.shape)
    return np.clip(out, 0.0, 1.0)


def psnr(x, x_hat) -> float:
    """``10 log10(1 / MSE)`` for signals in [0, 1], capped at 99 dB."""
    x = np.asarray(x, dtype=np.float64)
    x_hat = np.asarray(x_hat, dtype=np.float64)
    if x.shape != x_hat.shape:
        raise ShapeMismatch(f"{x.shape} vs {x_hat.shape}")
    mse = float(np.mean((x - x_hat) ** 2))
    if mse < 1e-10:
        return PSNR_CAP_DB
    return min(10.0 * np.log10(1.0 / mse), PSNR_CAP_DB)


def write_raw_clip(path, frames):
    """Planar 8-bit RGB frames after a 16-byte header ``(magic, H, W, T)`` (u32 LE)."""
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 4 or frames.shape[1] != 3:
        raise ShapeMismatch(f"expected (T, 3, H, W), got {frames.shape}")
    T, _, H, W = frames.shape
    data = np.clip(np.floor(frames * 255.0 + 0.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(struct.pack("<4I", RAW_MAGIC, H, W, T))
        fh.write(data.tobytes())


def read_raw_clip(path) -> np.ndarray:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise InvalidInput("truncated clip header")
    magic, H, W, T = struct.unpack_from("<4I", blob)
    if magic != RAW_MAGIC:
        raise InvalidInput(f"bad clip magic {magic:#x}")
    body = np.frombuffer(blob, dtype=np.uint8, offset=16)
    if body.size != T * 3 * H * W:
        raise InvalidInput(f"clip body holds {body.size} bytes, header implies {T * 3 * H * W}")
    return body.reshape(T, 3, H, W).astype(np.float64) / 255.0
