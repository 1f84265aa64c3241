"""Output-side consistency metrics and their normalization to deviations.

Every metric maps a pair of SUT outputs to a raw value and a deviation in
[0, 1], where 0 means the two outputs agree perfectly:

==================  =====================  ==============
metric              raw                    deviation
==================  =====================  ==============
cosine              cos angle              1 - raw
l2                  Euclidean distance     raw / sqrt(2)
class_invariance    1 if argmax equal      1 - raw
repeatability       matched ratio          1 - raw
ip_spread           coverage IoU           1 - raw
==================  =====================  ==============
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import apply_homography

CLASSIFY_METRICS = ("cosine", "l2", "class_invariance")
DETECT_METRICS = ("repeatability", "ip_spread")
MATCH_RADIUS = 2.0
COVERAGE_RADIUS = 10.0


class MetricError(ValueError):
    pass


class ZeroVector(MetricError):
    pass


class LengthMismatch(MetricError):
    pass


class SingularHomography(MetricError):
    pass


@dataclass(frozen=True)
class MetricValue:
    metric: str
    raw: float
    deviation: float

    def __post_init__(self):
        if not 0.0 <= self.deviation <= 1.0:
            raise MetricError(f"deviation {self.deviation} outside [0, 1]")


def _pair(p, q):
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise LengthMismatch(f"{p.size} vs {q.size}")
    return p, q


def _clamp01(v):
    return min(1.0, max(0.0, v))


def cosine_similarity(p, q):
    p, q = _pair(p, q)
    npn, nqn = np.linalg.norm(p), np.linalg.norm(q)
    if npn == 0 or nqn == 0:
        raise ZeroVector("cosine similarity of a zero vector")
    v = float(p @ q / (npn * nqn))
    return MetricValue("cosine", v, _clamp01(1.0 - v))


def l2_distance(p, q):
    p, q = _pair(p, q)
    v = float(np.linalg.norm(p - q))
    return MetricValue("l2", v, _clamp01(v / math.sqrt(2.0)))


def class_invariance(p, q):
    p, q = _pair(p, q)
    # np.argmax returns the first (lowest) index among ties
    v = 1.0 if int(np.argmax(p)) == int(np.argmax(q)) else 0.0
    return MetricValue("class_invariance", v, 1.0 - v)


def repeatability(pts_a, pts_b, h, size_b, radius=MATCH_RADIUS):
    """Share of A's points re-found in B after mapping through ``h`` (A -> B).

    Only projections landing inside image B (``size_b`` = (width, height))
    count. Projected points are processed in A's confidence order and each
    claims its nearest unclaimed B point within ``radius`` pixels. The score
    is matches / max(1, min(|visible A|, |B|)).
    """
    h = np.asarray(h, dtype=np.float64)
    if abs(np.linalg.det(h)) < 1e-12:
        raise SingularHomography("homography is singular")
    a = np.asarray(pts_a, dtype=np.float64).reshape(-1, 3)
    b = np.asarray(pts_b, dtype=np.float64).reshape(-1, 3)
    a = a[np.lexsort((a[:, 0], a[:, 1], -a[:, 2]))]
    w, hgt = size_b
    proj = apply_homography(h, a[:, :2]) if len(a) else np.zeros((0, 2))
    vis = np.isfinite(proj).all(axis=1) & (proj[:, 0] >= 0) & (proj[:, 0] <= w - 1) \
        & (proj[:, 1] >= 0) & (proj[:, 1] <= hgt - 1)
    proj = proj[vis]
    if len(proj) == 0:
        return MetricValue("repeatability", 0.0, 1.0)
    free = np.ones(len(b), dtype=bool)
    matches = 0
    for p in proj:
        if not free.any():
            break
        d = np.hypot(b[:, 0] - p[0], b[:, 1] - p[1])
        d[~free] = np.inf
        j = int(np.argmin(d))
        if d[j] <= radius:
            free[j] = False
            matches += 1
    v = matches / max(1, min(len(proj), len(b)))
    return MetricValue("repeatability", v, _clamp01(1.0 - v))


def coverage_mask(pts, size, radius=COVERAGE_RADIUS):
    """Union of radius disks around points, rasterized at pixel centers."""
    w, h = size
    mask = np.zeros((h, w), dtype=bool)
    r = int(math.ceil(radius))
    for x, y in np.asarray(pts, dtype=np.float64).reshape(-1, 3)[:, :2]:
        x0, x1 = max(int(math.floor(x)) - r, 0), min(int(math.ceil(x)) + r, w - 1)
        y0, y1 = max(int(math.floor(y)) - r, 0), min(int(math.ceil(y)) + r, h - 1)
        if x0 > x1 or y0 > y1:
            continue
        yy, xx = np.mgrid[y0:y1 + 1, x0:x1 + 1]
        mask[y0:y1 + 1, x0:x1 + 1] |= (xx - x) ** 2 + (yy - y) ** 2 <= radius * radius
    return mask


def ip_spread(pts_a, pts_b, size, radius=COVERAGE_RADIUS):
    ma = coverage_mask(pts_a, size, radius)
    mb = coverage_mask(pts_b, size, radius)
    union = np.count_nonzero(ma | mb)
    v = 1.0 if union == 0 else np.count_nonzero(ma & mb) / union
    return MetricValue("ip_spread", float(v), _clamp01(1.0 - v))


def classify_metrics(p, q):
    return [cosine_similarity(p, q), l2_distance(p, q), class_invariance(p, q)]
