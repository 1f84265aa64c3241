"""Baseline pixel-space mutations: brightness gain, one noise patch, black patches."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .imqual import ImageBuffer

KINDS = ("m1_brightness", "m2_noise_patch", "m3_black_patches")
MAX_REJECTIONS = 10000


class PatchTooLarge(ValueError):
    pass


@dataclass(frozen=True)
class MutationSpec:
    kind: str
    gain: float = 1.0
    patch_frac: float = 0.25
    n_patches: int = 6
    patch_px: int = 0          # 0: 5% of the image width
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown mutation {self.kind!r}")
        if not self.gain > 0:
            raise ValueError("gain must be positive")
        if not 0 < self.patch_frac <= 1:
            raise ValueError("patch_frac must lie in (0, 1]")
        if self.n_patches < 1:
            raise ValueError("n_patches must be >= 1")
        if not self.name:
            tag = {"m1_brightness": f"m1_gain{self.gain:g}", "m2_noise_patch": "m2", "m3_black_patches": "m3"}
            object.__setattr__(self, "name", tag[self.kind])

    def to_dict(self):
        return asdict(self)


def default_mutations(seed=0):
    return [MutationSpec("m1_brightness", gain=0.6, seed=seed),
            MutationSpec("m1_brightness", gain=1.4, seed=seed),
            MutationSpec("m2_noise_patch", patch_frac=0.25, seed=seed),
            MutationSpec("m3_black_patches", n_patches=6, seed=seed)]


def _patch_side(spec, width):
    return spec.patch_px if spec.patch_px > 0 else max(1, int(round(0.05 * width)))


def mutate(image, spec):
    px = image.pixels.copy()
    h, w, _ = px.shape
    rng = np.random.default_rng(spec.seed)
    if spec.kind == "m1_brightness":
        px = np.clip(px * spec.gain, 0.0, 1.0)
    elif spec.kind == "m2_noise_patch":
        pw, ph = int(round(spec.patch_frac * w)), int(round(spec.patch_frac * h))
        if pw < 1 or ph < 1 or pw > w or ph > h:
            raise PatchTooLarge(f"noise patch {pw}x{ph} does not fit a {w}x{h} image")
        x0 = int(rng.integers(0, w - pw + 1))
        y0 = int(rng.integers(0, h - ph + 1))
        px[y0:y0 + ph, x0:x0 + pw] = rng.uniform(0.0, 1.0, (ph, pw, 3))
    else:
        s = _patch_side(spec, w)
        if s > w or s > h or spec.n_patches * s * s > w * h:
            raise PatchTooLarge(f"{spec.n_patches} patches of {s}px do not fit a {w}x{h} image")
        placed = []
        tries = 0
        while len(placed) < spec.n_patches:
            tries += 1
            if tries > MAX_REJECTIONS:
                raise PatchTooLarge("could not place non-overlapping patches")
            x0 = int(rng.integers(0, w - s + 1))
            y0 = int(rng.integers(0, h - s + 1))
            if any(abs(x0 - x) < s and abs(y0 - y) < s for x, y in placed):
                continue
            placed.append((x0, y0))
        for x0, y0 in placed:
            px[y0:y0 + s, x0:x0 + s] = 0.0
    return ImageBuffer(px, "mutated")
