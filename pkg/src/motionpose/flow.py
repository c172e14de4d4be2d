"""Dense two-frame optical flow (coarse-to-fine Horn-Schunck) and flow utilities.

Flow fields follow the image convention: ``u`` is the horizontal (column)
displacement and ``v`` the vertical (row) displacement, in pixels per frame,
such that ``frame_b[y + v, x + u] ~= frame_a[y, x]``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from . import kernels

LUMA = (0.299, 0.587, 0.114)
FLO_MAGIC = b"FLO1"


class FlowFormatError(ValueError):
    pass


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        self.u = np.ascontiguousarray(self.u, dtype=np.float32)
        self.v = np.ascontiguousarray(self.v, dtype=np.float32)
        if self.u.shape != self.v.shape or self.u.ndim != 2:
            raise ValueError(f"u {self.u.shape} and v {self.v.shape} must be equal 2-D shapes")

    @property
    def height(self):
        return self.u.shape[0]

    @property
    def width(self):
        return self.u.shape[1]

    def magnitude(self):
        return np.hypot(self.u, self.v)

    def crop(self, x, y, size):
        return FlowField(self.u[y:y + size, x:x + size], self.v[y:y + size, x:x + size])


@dataclass
class FlowBlock:
    """``delta`` consecutive fields; ``origin`` is the (x, y) crop corner if cropped."""

    fields: list
    origin: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def delta(self):
        return len(self.fields)

    def to_channels(self):
        """Stack as ``(2*delta, H, W)`` in interleaved u1, v1, u2, v2, ... order."""
        out = np.empty((2 * self.delta,) + self.fields[0].u.shape, dtype=np.float32)
        for i, f in enumerate(self.fields):
            out[2 * i] = f.u
            out[2 * i + 1] = f.v
        return out

    @classmethod
    def from_channels(cls, arr, origin=None):
        arr = np.asarray(arr, dtype=np.float32)
        if arr.shape[0] % 2:
            raise ValueError("flow block needs an even channel count")
        return cls([FlowField(arr[2 * i], arr[2 * i + 1]) for i in range(arr.shape[0] // 2)], origin)


def to_gray(image):
    """Luma conversion for (H, W, 3) images; 2-D images pass through."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        return image
    return image[..., 0] * LUMA[0] + image[..., 1] * LUMA[1] + image[..., 2] * LUMA[2]


def _resample(img, shape):
    """Centre-aligned bilinear resampling (flip symmetric)."""
    h, w = img.shape
    nh, nw = shape
    ys = (np.arange(nh) + 0.5) * (h / nh) - 0.5
    xs = (np.arange(nw) + 0.5) * (w / nw) - 0.5
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return ndimage.map_coordinates(img, [yy, xx], order=1, mode="nearest")


def _pyramid(img, levels):
    pyr = [img]
    for _ in range(levels - 1):
        h, w = pyr[-1].shape
        if min(h, w) < 8:
            break
        smooth = ndimage.gaussian_filter(pyr[-1], 1.0, mode="nearest")
        pyr.append(_resample(smooth, ((h + 1) // 2, (w + 1) // 2)))
    return pyr


def _derivatives(a, bw):
    iy_a, ix_a = np.gradient(a)
    iy_b, ix_b = np.gradient(bw)
    return 0.5 * (ix_a + ix_b), 0.5 * (iy_a + iy_b), bw - a


def estimate_flow(frame_a, frame_b, alpha=15.0, iterations=100, pyramid_levels=3, warps=2, presmooth=1.0):
    """Coarse-to-fine Horn-Schunck flow from ``frame_a`` to ``frame_b``.

    Frames are grayscale (or RGB, converted with luma weights) in [0, 1].
    ``alpha`` is the smoothness weight in 8-bit intensity units: frames are
    rescaled to [0, 255] internally.  ``warps`` re-linearisations are done per
    pyramid level.
    """
    a, b = to_gray(frame_a), to_gray(frame_b)
    if a.shape != b.shape:
        raise ValueError(f"frame sizes differ: {a.shape} vs {b.shape}")
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    if pyramid_levels < 1 or warps < 1:
        raise ValueError("pyramid_levels and warps must be >= 1")
    a = a * 255.0
    b = b * 255.0
    if presmooth > 0:
        a = ndimage.gaussian_filter(a, presmooth, mode="nearest")
        b = ndimage.gaussian_filter(b, presmooth, mode="nearest")
    pa, pb = _pyramid(a, pyramid_levels), _pyramid(b, pyramid_levels)
    alpha2 = float(alpha) ** 2
    u = np.zeros(pa[-1].shape)
    v = np.zeros(pa[-1].shape)
    for lvl in range(len(pa) - 1, -1, -1):
        la, lb = pa[lvl], pb[lvl]
        if u.shape != la.shape:
            sy, sx = la.shape[0] / u.shape[0], la.shape[1] / u.shape[1]
            u = _resample(u, la.shape) * sx
            v = _resample(v, la.shape) * sy
        for _ in range(warps):
            bw = kernels.warp_bilinear(lb, u, v)
            ix, iy, it = _derivatives(la, bw)
            u, v = kernels.hs_jacobi(ix, iy, it, u, v, alpha2, iterations)
    return FlowField(u, v)


def hflip_flow(f):
    """Flow of the horizontally mirrored frame pair."""
    return FlowField(-f.u[:, ::-1], f.v[:, ::-1])


def reverse_flow_block(block):
    """Flow block for the time-reversed frame sequence: order reversed, values negated."""
    return FlowBlock([FlowField(-f.u, -f.v) for f in reversed(block.fields)], block.origin, dict(block.meta))


def flow_to_color(f, max_magnitude):
    """RGB uint8 image: hue = direction, saturation = magnitude / max_magnitude, value = 1."""
    from matplotlib.colors import hsv_to_rgb

    if max_magnitude <= 0:
        raise ValueError("max_magnitude must be positive")
    ang = np.arctan2(f.v.astype(np.float64), f.u.astype(np.float64))
    hue = np.mod(ang / (2 * np.pi), 1.0)
    sat = np.minimum(f.magnitude() / max_magnitude, 1.0)
    hsv = np.stack([hue, sat, np.ones_like(hue)], axis=-1)
    return np.round(hsv_to_rgb(hsv) * 255).astype(np.uint8)


def flow_hue(rgb):
    """Hue in [0, 1) of an RGB uint8 image (inverse helper for flow_to_color)."""
    from matplotlib.colors import rgb_to_hsv

    return rgb_to_hsv(rgb.astype(np.float64) / 255.0)[..., 0]


# ---------------------------------------------------------------- FLO1 files


def write_flo1(path, f):
    path = Path(path)
    buf = np.empty((f.height, f.width, 2), dtype="<f4")
    buf[..., 0] = f.u
    buf[..., 1] = f.v
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(FLO_MAGIC + struct.pack("<II", f.width, f.height))
        fh.write(buf.tobytes())
    tmp.replace(path)


def read_flo1(path):
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != FLO_MAGIC:
        raise FlowFormatError(f"{path}: bad magic")
    w, h = struct.unpack("<II", raw[4:12])
    if len(raw) != 12 + 8 * w * h:
        raise FlowFormatError(f"{path}: expected {12 + 8 * w * h} bytes, found {len(raw)}")
    arr = np.frombuffer(raw, dtype="<f4", offset=12).reshape(h, w, 2)
    if not np.all(np.isfinite(arr)):
        raise FlowFormatError(f"{path}: non-finite flow values")
    return FlowField(arr[..., 0], arr[..., 1])
