"""Image container, full-reference quality metrics and PPM I/O."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

PROVENANCES = ("real", "nerf", "transformed", "mutated")


class ImageError(ValueError):
    pass


class DimensionMismatch(ImageError):
    pass


class TooSmall(ImageError):
    pass


class ImageBuffer:
    """H x W RGB image with float channels in [0, 1] and a provenance tag."""

    __slots__ = ("pixels", "provenance")

    def __init__(self, pixels, provenance="real"):
        px = np.asarray(pixels, dtype=np.float64)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ImageError(f"expected an (H, W, 3) array, got {px.shape}")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ImageError("channel values must lie in [0, 1]")
        if provenance not in PROVENANCES:
            raise ImageError(f"unknown provenance {provenance!r}")
        self.pixels = px
        self.provenance = provenance

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]

    @property
    def shape(self):
        return self.pixels.shape

    def luma(self):
        return self.pixels.mean(axis=2)

    def with_provenance(self, provenance):
        return ImageBuffer(self.pixels, provenance)

    def to_rgb8(self):
        return np.round(255.0 * np.clip(self.pixels, 0.0, 1.0)).astype(np.uint8)

    @classmethod
    def from_rgb8(cls, arr, provenance="real"):
        return cls(np.asarray(arr, dtype=np.float64) / 255.0, provenance)

    def __eq__(self, other):
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.provenance == other.provenance and np.array_equal(self.pixels, other.pixels)

    def __repr__(self):
        return f"ImageBuffer({self.width}x{self.height}, {self.provenance})"


def _check_pair(a, b):
    if a.shape != b.shape:
        raise DimensionMismatch(f"{a.shape} vs {b.shape}")


def mse(a, b):
    _check_pair(a, b)
    return float(np.mean((a.pixels - b.pixels) ** 2))


def psnr(a, b):
    """PSNR in dB with peak 1.0; identical images give ``math.inf``."""
    m = mse(a, b)
    if m == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / m)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_map(x, y, size=11, sigma=1.5, c1=0.01 ** 2, c2=0.03 ** 2):
    """Per-window SSIM over 'valid' window positions of two 2-D arrays."""
    g = gaussian_window(size, sigma)
    h = size // 2

    def filt(z):
        z = correlate1d(z, g, axis=0, mode="constant")
        z = correlate1d(z, g, axis=1, mode="constant")
        return z[h:z.shape[0] - h, h:z.shape[1] - h]

    mu_x, mu_y = filt(x), filt(y)
    sxx = filt(x * x) - mu_x ** 2
    syy = filt(y * y) - mu_y ** 2
    sxy = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (sxx + syy + c2)
    return num / den


def ssim(a, b):
    """Single-scale SSIM on luma (r + g + b) / 3 with an 11x11, sigma 1.5 Gaussian."""
    _check_pair(a, b)
    if min(a.width, a.height) < 11:
        raise TooSmall("SSIM needs images of at least 11x11 pixels")
    return float(np.mean(ssim_map(a.luma(), b.luma())))


def lpips(a, b):
    """Placeholder slot: perceptual metrics need pretrained weights and are not bundled."""
    return None


# --------------------------------------------------------------------------
# PPM (P6, maxval 255)

def write_ppm(path, image):
    rgb = image.to_rgb8()
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.width} {image.height}\n255\n".encode("ascii"))
        fh.write(rgb.tobytes())


def _tokens(data):
    pos = 0
    out = []
    while len(out) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while data[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        out.append(data[start:pos])
    return out, pos + 1


def read_ppm(path, provenance="real"):
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data)
    if magic != b"P6" or int(maxval) != 255:
        raise ImageError(f"{path}: only binary P6 with maxval 255 is supported")
    w, h = int(w), int(h)
    arr = np.frombuffer(data, np.uint8, w * h * 3, pos).reshape(h, w, 3)
    return ImageBuffer.from_rgb8(arr, provenance)
