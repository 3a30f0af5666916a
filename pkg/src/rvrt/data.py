"""Synthetic videos, degradation operators and frame I/O."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

BD_SIGMA = 1.6
BD_KERNEL = 13


@dataclass
class SyntheticVideo:
    hq: np.ndarray            # [T, H, W, 3] in [0, 1]
    motion: np.ndarray        # [T-1, 2] content translation per step, pixels
    seed: int

    @property
    def num_frames(self) -> int:
        return self.hq.shape[0]


def _texture(rng: np.random.Generator, h: int, w: int, band: float) -> np.ndarray:
    """White noise low-passed to radial frequencies <= ``band`` cycles/pixel, scaled to [0, 1]."""
    spec = np.fft.fft2(rng.normal(size=(h, w, 3)), axes=(0, 1))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    spec *= (np.hypot(fy, fx) <= band)[..., None]
    tex = np.fft.ifft2(spec, axes=(0, 1)).real
    lo = tex.min(axis=(0, 1), keepdims=True)
    hi = tex.max(axis=(0, 1), keepdims=True)
    return (tex - lo) / np.maximum(hi - lo, 1e-12)


def _sample(canvas: np.ndarray, ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    ay = (ys - y0)[:, None, None]
    ax = (xs - x0)[None, :, None]
    y1 = np.minimum(y0 + 1, canvas.shape[0] - 1)
    x1 = np.minimum(x0 + 1, canvas.shape[1] - 1)
    c00 = canvas[np.ix_(y0, x0)]
    c01 = canvas[np.ix_(y0, x1)]
    c10 = canvas[np.ix_(y1, x0)]
    c11 = canvas[np.ix_(y1, x1)]
    return (1 - ay) * ((1 - ax) * c00 + ax * c01) + ay * ((1 - ax) * c10 + ax * c11)


def gen_synthetic_video(seed: int, t: int, h: int, w: int, motion=None, band: float = 0.1) -> SyntheticVideo:
    """Band-limited random texture translated frame by frame.

    ``band`` is the radial frequency cutoff in cycles per pixel; 0.1 keeps all
    content below the Nyquist limit of a x4 downsampled copy (0.125).

    ``motion`` is a [T-1, 2] array; step k moves the content of frame k by
    (dy, dx) to give frame k+1, i.e. frame_{k+1}(p) = frame_k(p - d_k).
    Frames are bilinear reads of one large canvas, so integer motions give
    frames that are exact shifted copies of each other.
    """
    if min(t, h, w) < 1:
        raise ValueError("video extents must be positive")
    motion = np.zeros((t - 1, 2)) if motion is None else np.asarray(motion, dtype=np.float64)
    if motion.shape != (t - 1, 2):
        raise ValueError(f"motion must have shape {(t - 1, 2)}, got {motion.shape}")
    shifts = np.vstack([np.zeros((1, 2)), np.cumsum(motion, axis=0)])
    margin = int(math.ceil(np.abs(shifts).max())) + 2
    rng = np.random.default_rng(seed)
    canvas = _texture(rng, h + 2 * margin, w + 2 * margin, band)
    frames = []
    for sy, sx in shifts:
        ys = np.arange(h) + margin - sy
        xs = np.arange(w) + margin - sx
        frames.append(_sample(canvas, ys, xs))
    hq = np.clip(np.stack(frames), 0.0, 1.0)
    return SyntheticVideo(hq=hq, motion=motion, seed=seed)


# ---------------------------------------------------------------- resizing

def _cubic(x: np.ndarray) -> np.ndarray:
    ax = np.abs(x)
    ax2, ax3 = ax * ax, ax * ax * ax
    return ((1.5 * ax3 - 2.5 * ax2 + 1) * (ax <= 1)
            + (-0.5 * ax3 + 2.5 * ax2 - 4 * ax + 2) * ((ax > 1) & (ax <= 2)))


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """[n_out, n_in] bicubic resampling matrix (antialiased when shrinking, symmetric borders)."""
    scale = n_out / n_in
    width = 4.0 / scale if scale < 1 else 4.0
    out = np.arange(1, n_out + 1, dtype=np.float64)
    u = out / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    dist = u[:, None] - idx
    wts = scale * _cubic(scale * dist) if scale < 1 else _cubic(dist)
    wts = wts / wts.sum(axis=1, keepdims=True)
    mirror = np.concatenate([np.arange(n_in), np.arange(n_in)[::-1]])
    cols = mirror[np.mod(idx.astype(int) - 1, 2 * n_in)]
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), cols.ravel()), wts.ravel())
    return mat


def bicubic_resize(frames: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize [..., H, W, C] frames with separable bicubic weights."""
    mh = resize_matrix(frames.shape[-3], out_h)
    mw = resize_matrix(frames.shape[-2], out_w)
    out = np.moveaxis(np.tensordot(mh, frames, axes=([1], [-3])), 0, -3)
    return np.moveaxis(np.tensordot(mw, out, axes=([1], [-2])), 0, -2)


def gaussian_kernel1d(sigma: float, size: int) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    k = np.exp(-(r * r) / (2 * sigma * sigma))
    return k / k.sum()


def degrade(hq: np.ndarray, mode: str, sigma: float = 0.0, scale: int = 4,
            rng: np.random.Generator | None = None) -> np.ndarray:
    """Low-quality counterpart of a [T, H, W, 3] video.

    ``BI``: bicubic downscale by ``scale``. ``BD``: 13x13 Gaussian blur
    (sigma 1.6) then keep every ``scale``-th pixel. ``noise``: add i.i.d.
    N(0, (sigma/255)^2), unclipped; ``sigma`` is on the 8-bit scale.
    """
    hq = np.asarray(hq, dtype=np.float64)
    if mode in ("BI", "BD"):
        h, w = hq.shape[-3], hq.shape[-2]
        if h % scale or w % scale:
            raise ValueError(f"extents {h}x{w} not divisible by {scale}")
        if mode == "BI":
            return bicubic_resize(hq, h // scale, w // scale)
        k = gaussian_kernel1d(BD_SIGMA, BD_KERNEL)
        blurred = correlate1d(correlate1d(hq, k, axis=-3, mode="reflect"), k, axis=-2, mode="reflect")
        return blurred[..., ::scale, ::scale, :]
    if mode == "noise":
        if sigma == 0:
            return hq.copy()
        rng = rng or np.random.default_rng(0)
        return hq + rng.normal(0.0, sigma / 255.0, size=hq.shape)
    raise ValueError(f"unknown degradation mode {mode!r}")


# ---------------------------------------------------------------- frame files

def write_ppm(path: str | os.PathLike, frame: np.ndarray) -> None:
    img = np.clip(np.round(np.asarray(frame) * 255.0), 0, 255).astype(np.uint8)
    h, w, c = img.shape
    if c != 3:
        raise ValueError("PPM frames need 3 channels")
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out, pos = [], 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"truncated PPM header at byte {pos}")
        out.append(buf[start:pos])
    return out, pos + 1


def read_ppm(path: str | os.PathLike) -> np.ndarray:
    with open(path, "rb") as fh:
        buf = fh.read()
    (magic, w, h, maxval), pos = _tokens(buf, 4)
    if magic != b"P6":
        raise ValueError(f"{path}: bad magic {magic!r}")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PPM supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=pos)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_video(directory: str | os.PathLike, frames: np.ndarray) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []
    for i, frame in enumerate(frames):
        p = os.path.join(directory, f"{i:05d}.ppm")
        write_ppm(p, frame)
        paths.append(p)
    return paths


def read_video(directory: str | os.PathLike) -> np.ndarray:
    names = sorted(n for n in os.listdir(directory) if n.lower().endswith(".ppm"))
    if not names:
        raise FileNotFoundError(f"no .ppm frames in {directory}")
    return np.stack([read_ppm(os.path.join(directory, n)) for n in names])
