"""Systems under test: output types, two classical reference SUTs and a
line-delimited JSON protocol for external processes.

External protocol, one request per line on the child's stdin::

    {"id": n, "task": "classify"|"detect", "width": w, "height": h,
     "pixels_b64": "<base64 of row-major RGB8 bytes>"}

and one reply line on its stdout::

    {"id": n, "probs": [...]}          # classify
    {"id": n, "points": [[x, y, conf], ...]}   # detect
"""

from __future__ import annotations

import base64
import json
import logging
import selectors
import shlex
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

logger = logging.getLogger(__name__)

HARRIS_K = 0.04
HARRIS_SIGMA = 1.5
HARRIS_BORDER = 3
DEFAULT_TEMPERATURE = 0.05
HIST_BINS = 8


class SutError(RuntimeError):
    pass


class SutCrashed(SutError):
    pass


class SutTimeout(SutError):
    pass


class TooSmall(ValueError):
    pass


class EmptyModel(ValueError):
    pass


class EmptyClass(ValueError):
    pass


@dataclass(frozen=True)
class Classification:
    probs: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64).ravel()
        if p.size == 0 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-6:
            raise SutCrashed("class probabilities must be non-negative and sum to 1")
        object.__setattr__(self, "probs", p)

    kind = "classify"

    def to_json(self):
        return {"probs": [float(v) for v in self.probs]}

    def __eq__(self, other):
        return isinstance(other, Classification) and np.array_equal(self.probs, other.probs)


@dataclass(frozen=True)
class InterestPoints:
    """(N, 3) array of x, y, confidence sorted by confidence descending."""
    points: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        object.__setattr__(self, "points", p)

    kind = "detect"

    @property
    def xy(self):
        return self.points[:, :2]

    def __len__(self):
        return len(self.points)

    def to_json(self):
        return {"points": [[float(a), float(b), float(c)] for a, b, c in self.points]}

    def __eq__(self, other):
        return isinstance(other, InterestPoints) and np.array_equal(self.points, other.points)


@dataclass(frozen=True)
class SutDescriptor:
    name: str
    task: str
    max_points: int = 100

    def __post_init__(self):
        if self.task not in ("classify", "detect"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.max_points < 1:
            raise ValueError("max_points must be >= 1")


# --------------------------------------------------------------------------
# reference detector

def sort_points(pts):
    """Confidence descending; ties go to the lower (y, x)."""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    order = np.lexsort((pts[:, 0], pts[:, 1], -pts[:, 2]))
    return pts[order]


def harris_response(luma, sigma=HARRIS_SIGMA, k=HARRIS_K):
    ix = ndimage.sobel(luma, axis=1, mode="nearest")
    iy = ndimage.sobel(luma, axis=0, mode="nearest")
    sxx = ndimage.gaussian_filter(ix * ix, sigma, mode="nearest")
    syy = ndimage.gaussian_filter(iy * iy, sigma, mode="nearest")
    sxy = ndimage.gaussian_filter(ix * iy, sigma, mode="nearest")
    return sxx * syy - sxy * sxy - k * (sxx + syy) ** 2


def _nms_points(resp, max_points, border):
    h, w = resp.shape
    peak = resp == ndimage.maximum_filter(resp, size=3, mode="nearest")
    # relative floor keeps round-off in flat regions from producing points
    floor = 1e-6 * max(float(resp.max()), 0.0)
    cand = peak & (resp > floor)
    if border:
        cand[:border] = cand[-border:] = False
        cand[:, :border] = cand[:, -border:] = False
    ys, xs = np.nonzero(cand)
    if len(ys) == 0:
        return np.zeros((0, 3))
    pts = sort_points(np.column_stack([xs, ys, resp[ys, xs]]))
    # plateaus: keep the first of any candidates that touch (3x3)
    taken = np.zeros((h, w), dtype=bool)
    keep = []
    for x, y, c in pts:
        xi, yi = int(x), int(y)
        if taken[max(yi - 1, 0):yi + 2, max(xi - 1, 0):xi + 2].any():
            continue
        taken[yi, xi] = True
        keep.append((x, y, c))
        if len(keep) == max_points:
            break
    return np.array(keep, dtype=np.float64).reshape(-1, 3)


def harris_detect(image, max_points=100):
    """Harris corners: Sobel gradients, Gaussian structure tensor (sigma 1.5),
    response det - 0.04 trace^2, 3x3 non-maximum suppression, top ``max_points``."""
    if image.width < 7 or image.height < 7:
        raise TooSmall("Harris detection needs at least 7x7 pixels")
    resp = harris_response(image.luma())
    return InterestPoints(_nms_points(resp, max_points, HARRIS_BORDER))


# --------------------------------------------------------------------------
# reference classifier

def hist_feature(image, bins=HIST_BINS):
    """Concatenated per-channel histograms over [0, 1], each normalized to sum 1."""
    px = image.pixels.reshape(-1, 3)
    idx = np.minimum((px * bins).astype(np.int64), bins - 1)
    feats = [np.bincount(idx[:, c], minlength=bins) / len(px) for c in range(3)]
    return np.concatenate(feats)


@dataclass
class HistModel:
    labels: list
    prototypes: np.ndarray
    temperature: float = DEFAULT_TEMPERATURE

    def to_dict(self):
        return {"labels": list(self.labels), "prototypes": self.prototypes.tolist(),
                "temperature": self.temperature}

    @classmethod
    def from_dict(cls, d):
        return cls(list(d["labels"]), np.asarray(d["prototypes"], dtype=np.float64),
                   float(d.get("temperature", DEFAULT_TEMPERATURE)))


def train_hist_classifier(datasets, temperature=DEFAULT_TEMPERATURE):
    """``datasets`` maps label -> iterable of images; classes are sorted by label."""
    labels = sorted(datasets)
    if not labels:
        raise EmptyModel("no classes")
    protos = []
    for lab in labels:
        feats = [hist_feature(im) for im in datasets[lab]]
        if not feats:
            raise EmptyClass(f"class {lab!r} has no images")
        protos.append(np.mean(feats, axis=0))
    return HistModel(labels, np.array(protos), temperature)


def softmax(z):
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def hist_classify(image, model):
    if model is None or len(model.labels) == 0:
        raise EmptyModel("classifier has no prototypes")
    d = np.linalg.norm(model.prototypes - hist_feature(image), axis=1)
    return Classification(softmax(-d / model.temperature))


# --------------------------------------------------------------------------
# SUT wrappers

class Sut:
    """Base class: ``descriptor`` plus ``process(image) -> SutOutput``."""

    descriptor: SutDescriptor

    def process(self, image):
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class HarrisSut(Sut):
    def __init__(self, name="harris", max_points=100):
        self.descriptor = SutDescriptor(name, "detect", max_points)

    def process(self, image):
        return harris_detect(image, self.descriptor.max_points)


class HistSut(Sut):
    def __init__(self, model, name="histclass"):
        self.descriptor = SutDescriptor(name, "classify")
        self.model = model

    def process(self, image):
        return hist_classify(image, self.model)


class ConstantSut(Sut):
    """Always returns the same output; handy as a metamorphic no-op control."""

    def __init__(self, output, name="constant"):
        task = "classify" if isinstance(output, Classification) else "detect"
        self.descriptor = SutDescriptor(name, task)
        self.output = output

    def process(self, image):
        return self.output


class ExternalSut(Sut):
    """Child process speaking the JSON-lines protocol; restarted after a crash."""

    def __init__(self, name, command, task, max_points=100, timeout=30.0):
        self.descriptor = SutDescriptor(name, task, max_points)
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.timeout = float(timeout)
        self._proc = None
        self._next_id = 0
        self._buf = b""

    def _start(self):
        self._proc = subprocess.Popen(self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE,
                                      stderr=subprocess.DEVNULL)
        self._buf = b""

    def _kill(self):
        if self._proc is not None:
            try:
                self._proc.kill()
                self._proc.wait(timeout=5)
            except (OSError, subprocess.TimeoutExpired):
                pass
            for s in (self._proc.stdin, self._proc.stdout):
                try:
                    s.close()
                except OSError:
                    pass
        self._proc = None

    def close(self):
        if self._proc is not None and self._proc.poll() is None:
            try:
                self._proc.stdin.close()
                self._proc.wait(timeout=2)
            except (OSError, subprocess.TimeoutExpired):
                pass
        self._kill()

    def _readline(self):
        deadline = time.monotonic() + self.timeout
        out = self._proc.stdout
        with selectors.DefaultSelector() as sel:
            sel.register(out, selectors.EVENT_READ)
            while b"\n" not in self._buf:
                remaining = deadline - time.monotonic()
                if remaining <= 0 or not sel.select(remaining):
                    raise SutTimeout(f"{self.descriptor.name}: no reply within {self.timeout:g}s")
                chunk = out.read1(65536)
                if not chunk:
                    raise SutCrashed(f"{self.descriptor.name}: process exited")
                self._buf += chunk
        line, self._buf = self._buf.split(b"\n", 1)
        return line

    def process(self, image):
        if self._proc is None or self._proc.poll() is not None:
            self._start()
        rid = self._next_id
        self._next_id += 1
        req = {"id": rid, "task": self.descriptor.task, "width": image.width, "height": image.height,
               "pixels_b64": base64.b64encode(image.to_rgb8().tobytes()).decode("ascii")}
        try:
            self._proc.stdin.write((json.dumps(req) + "\n").encode("utf-8"))
            self._proc.stdin.flush()
            line = self._readline()
            return self._parse(line, rid, image)
        except SutError:
            self._kill()
            raise
        except (OSError, ValueError) as e:
            self._kill()
            raise SutCrashed(f"{self.descriptor.name}: {e}") from e

    def _parse(self, line, rid, image):
        try:
            msg = json.loads(line)
        except ValueError as e:
            raise SutCrashed(f"{self.descriptor.name}: malformed reply") from e
        if not isinstance(msg, dict) or msg.get("id") != rid:
            raise SutCrashed(f"{self.descriptor.name}: reply id mismatch")
        try:
            if self.descriptor.task == "classify":
                return Classification(np.asarray(msg["probs"], dtype=np.float64))
            pts = np.asarray(msg["points"], dtype=np.float64).reshape(-1, 3)
        except (KeyError, TypeError, ValueError) as e:
            raise SutCrashed(f"{self.descriptor.name}: malformed reply") from e
        inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= image.width - 1)
                  & (pts[:, 1] >= 0) & (pts[:, 1] <= image.height - 1))
        if not inside.all():
            raise SutCrashed(f"{self.descriptor.name}: interest point outside the image")
        return InterestPoints(pts)


def run_sut(sut, image):
    """Run one SUT and normalize its output (sorted, truncated, validated)."""
    out = sut.process(image)
    d = sut.descriptor
    if d.task == "classify":
        if not isinstance(out, Classification):
            raise SutCrashed(f"{d.name}: expected class probabilities")
        return out
    if not isinstance(out, InterestPoints):
        raise SutCrashed(f"{d.name}: expected interest points")
    return InterestPoints(sort_points(out.points)[:d.max_points])


def echo_stub_command(n_classes=3, bad_id=None):
    """Command line for the bundled stub SUT (see :mod:`viewmt.stubs.echo_sut`)."""
    import sys

    cmd = [sys.executable, "-m", "viewmt.stubs.echo_sut", "--classes", str(n_classes)]
    if bad_id is not None:
        cmd += ["--bad-id", str(bad_id)]
    return cmd
