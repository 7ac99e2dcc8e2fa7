"""In-plane image rotation and circular corner masking.

Images are (H, W, C) float arrays. Rotation samples the source bilinearly
on an inverse-mapped grid about the symmetric center ((W-1)/2, (H-1)/2),
which makes rotations by multiples of 90 degrees exact pixel permutations.
Pixels outside the inscribed centered disk are considered uninformative and
are overwritten with a fill value so that rotations are reversible and carry
no corner cues.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "ImagePlane",
    "rotate_array",
    "rotate_batch",
    "rotate_image",
    "circular_mask",
    "apply_circular_mask",
    "mask_array",
    "mask_batch",
    "make_rotated_example",
    "resize_bilinear",
]


@dataclass
class ImagePlane:
    """A single H x W x C image in normalized space plus its fill value."""

    data: np.ndarray
    fill_value: float = 0.0

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.ndim == 2:
            self.data = self.data[:, :, None]
        if self.data.ndim != 3:
            raise ValueError(f"image must be HxWxC, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError(f"degenerate image shape {self.data.shape}")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]


class _SampleGrid:
    """Precomputed bilinear taps for one (H, W, angle) rotation.

    Four flattened tap index arrays plus their weights; taps that fall
    outside the source contribute their weight to `fill_w` instead.
    """

    __slots__ = ("idx", "wgt", "fill_w")

    def __init__(self, h: int, w: int, cos_t: float, sin_t: float):
        cy = (h - 1) / 2.0
        cx = (w - 1) / 2.0
        ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
        dx = xs - cx
        dy = ys - cy
        # Visually counter-clockwise rotation in y-down pixel coordinates:
        # destination (x, y) samples the source at the forward-rotated offset.
        sx = cos_t * dx - sin_t * dy + cx
        sy = sin_t * dx + cos_t * dy + cy

        x0 = np.floor(sx).astype(np.int64)
        y0 = np.floor(sy).astype(np.int64)
        fx = (sx - x0).astype(np.float32)
        fy = (sy - y0).astype(np.float32)

        taps = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
        wgts = [(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy]

        self.idx = []
        self.wgt = []
        fill_w = np.zeros_like(wgts[0])
        for (ty, tx), wg in zip(taps, wgts):
            valid = (ty >= 0) & (ty < h) & (tx >= 0) & (tx < w)
            fill_w += np.where(valid, np.float32(0.0), wg)
            wg = np.where(valid, wg, np.float32(0.0))
            flat = np.clip(ty, 0, h - 1) * w + np.clip(tx, 0, w - 1)
            self.idx.append(flat.ravel())
            self.wgt.append(wg.ravel()[:, None])
        self.fill_w = fill_w.ravel()[:, None]


# 90-degree multiples use exact integer trig so taps land on integers.
_EXACT_TRIG = {0: (1.0, 0.0), 90: (0.0, 1.0), 180: (-1.0, 0.0), 270: (0.0, -1.0)}

_grid_cache: dict[tuple[int, int, int], _SampleGrid] = {}
_mask_cache: dict[tuple[int, int], np.ndarray] = {}


def _get_grid(h: int, w: int, angle_deg: float) -> _SampleGrid:
    key = None
    if float(angle_deg).is_integer():
        key = (h, w, int(angle_deg) % 360)
        cached = _grid_cache.get(key)
        if cached is not None:
            return cached
    deg = angle_deg % 360
    if deg in _EXACT_TRIG:
        cos_t, sin_t = _EXACT_TRIG[deg]
    else:
        rad = math.radians(angle_deg)
        cos_t, sin_t = math.cos(rad), math.sin(rad)
    grid = _SampleGrid(h, w, cos_t, sin_t)
    if key is not None:
        _grid_cache[key] = grid
    return grid


def _check_angle(angle_deg: float) -> float:
    angle_deg = float(angle_deg)
    if not math.isfinite(angle_deg):
        raise ValueError(f"rotation angle must be finite, got {angle_deg!r}")
    return angle_deg


def rotate_array(img: np.ndarray, angle_deg: float, fill_value: float = 0.0) -> np.ndarray:
    """Rotate an (H, W, C) array counter-clockwise by `angle_deg` degrees.

    Bilinear sampling; source taps outside the image contribute
    `fill_value`. Output has the input's shape and dtype.
    """
    angle_deg = _check_angle(angle_deg)
    img = np.asarray(img)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[:, :, None]
    h, w, c = img.shape
    if angle_deg % 360 == 0:
        out = img.copy()
        return out[:, :, 0] if squeeze else out

    g = _get_grid(h, w, angle_deg)
    flat = img.reshape(h * w, c)
    out = g.fill_w * np.asarray(fill_value, dtype=np.float32)
    for tap_idx, tap_w in zip(g.idx, g.wgt):
        out = out + tap_w * flat[tap_idx]
    out = out.astype(img.dtype, copy=False).reshape(h, w, c)
    return out[:, :, 0] if squeeze else out


def rotate_batch(imgs: np.ndarray, angle_deg: float, fill_value: float = 0.0) -> np.ndarray:
    """Rotate a stack (N, H, W, C) by one shared angle."""
    angle_deg = _check_angle(angle_deg)
    n, h, w, c = imgs.shape
    if angle_deg % 360 == 0:
        return imgs.copy()
    g = _get_grid(h, w, angle_deg)
    flat = imgs.reshape(n, h * w, c)
    out = g.fill_w * np.asarray(fill_value, dtype=np.float32)
    for tap_idx, tap_w in zip(g.idx, g.wgt):
        out = out + tap_w * flat[:, tap_idx]
    return out.astype(imgs.dtype, copy=False).reshape(n, h, w, c)


def rotate_image(img: ImagePlane, angle_deg: float) -> ImagePlane:
    return ImagePlane(rotate_array(img.data, angle_deg, img.fill_value), img.fill_value)


def circular_mask(h: int, w: int) -> np.ndarray:
    """Boolean (H, W) mask, True inside the inscribed centered disk."""
    key = (h, w)
    m = _mask_cache.get(key)
    if m is None:
        cy = (h - 1) / 2.0
        cx = (w - 1) / 2.0
        r = min(h, w) / 2.0
        ys, xs = np.ogrid[0:h, 0:w]
        m = (xs - cx) ** 2 + (ys - cy) ** 2 <= r * r
        m.setflags(write=False)
        _mask_cache[key] = m
    return m


def mask_array(img: np.ndarray, fill_value: float = 0.0) -> np.ndarray:
    """Set pixels outside the inscribed disk to `fill_value` (all channels)."""
    img = np.asarray(img)
    out = img.copy()
    keep = circular_mask(img.shape[0], img.shape[1])
    out[~keep] = np.asarray(fill_value, dtype=img.dtype)
    return out


def mask_batch(imgs: np.ndarray, fill_value: float = 0.0) -> np.ndarray:
    out = imgs.copy()
    keep = circular_mask(imgs.shape[1], imgs.shape[2])
    out[:, ~keep] = np.asarray(fill_value, dtype=imgs.dtype)
    return out


def apply_circular_mask(img: ImagePlane) -> ImagePlane:
    return ImagePlane(mask_array(img.data, img.fill_value), img.fill_value)


def make_rotated_example(img: ImagePlane, rng: np.random.Generator) -> tuple[ImagePlane, int]:
    """Rotate by a uniform random integer degree, then mask.

    Masking after rotation guarantees a bit-exact fill region. Returns the
    transformed image and the sampled angle label in {0, ..., 359}.
    """
    theta = int(rng.integers(0, 360))
    rotated = rotate_array(img.data, theta, img.fill_value)
    return ImagePlane(mask_array(rotated, img.fill_value), img.fill_value), theta


def resize_bilinear(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinear resize of an (H, W, C) array with corner-aligned sampling."""
    h, w = img.shape[:2]
    if (h, w) == (out_h, out_w):
        return img.copy()
    ys = np.linspace(0, h - 1, out_h)
    xs = np.linspace(0, w - 1, out_w)
    y0 = np.floor(ys).astype(np.int64)
    x0 = np.floor(xs).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0).astype(np.float32)[:, None, None]
    fx = (xs - x0).astype(np.float32)[None, :, None]
    a = img[np.ix_(y0, x0)]
    b = img[np.ix_(y0, x1)]
    c = img[np.ix_(y1, x0)]
    d = img[np.ix_(y1, x1)]
    out = (a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx
           + c * fy * (1 - fx) + d * fy * fx)
    return out.astype(img.dtype, copy=False)
