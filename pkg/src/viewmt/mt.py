"""Metamorphic test campaigns over rendered novel views.

A campaign takes a fitted field, a posed dataset, systems under test, pose
transforms tau0..tau6 and pixel mutations. For each evaluation frame it
compares SUT outputs pairwise and flags an inconsistency whenever the
normalized deviation of an output metric exceeds a threshold epsilon:

* tau0 (domain shift):   f(real image)  vs f(render at the same pose)
* tau1..tau6:            f(render)      vs f(render at the transformed pose)
* mutations m:           f(real image)  vs f(m(real image))
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from scipy import stats

from . import imqual
from .field import RenderConfig, render_image
from .geometry import PlaneBehindCamera, PoseTransform, TauKind, apply_transform, plane_homography
from .mutate import mutate
from .suts import Classification, SutError, run_sut
from .sutmetrics import DETECT_METRICS, CLASSIFY_METRICS, classify_metrics, ip_spread, repeatability
from .synthscene import raytrace

logger = logging.getLogger(__name__)

EPSILONS = (0.1, 0.2, 0.5)
IMAGE_METRICS = ("psnr", "ssim", "lpips")
SIGNIFICANCE = 0.05


class MtError(ValueError):
    pass


class MissingSidecar(MtError):
    pass


class TooFewSamples(MtError):
    pass


class ConstantInput(MtError):
    pass


class InsufficientData(MtError):
    pass


# --------------------------------------------------------------------------
# transform suite

@dataclass(frozen=True)
class TransformSuite:
    """Magnitudes for tau1..tau6. Shifts are fractions of the scene diameter.

    With ``reaim`` the camera is re-pointed at ``lookat`` after translating,
    which realizes the compensating yaw/pitch; without it the explicit
    ``small_angle``/``large_angle`` compensation is applied instead.
    """
    diameter: float
    lookat: tuple
    small_shift: float = 0.05
    large_shift: float = 0.15
    small_angle: float = math.radians(2.0)
    large_angle: float = math.radians(6.0)
    roll_angle: float = math.radians(5.0)
    reaim: bool = True

    def __post_init__(self):
        if not 0 <= self.small_shift < self.large_shift:
            raise MtError("need 0 <= small_shift < large_shift")
        if not 0 < self.small_angle < self.large_angle:
            raise MtError("need 0 < small_angle < large_angle")
        if self.diameter <= 0:
            raise MtError("scene diameter must be positive")


def build_suite(sidecar, overrides=None):
    """Pose transforms tau0..tau6 (in order) for a scene sidecar."""
    if not sidecar or "diameter" not in sidecar or "lookat" not in sidecar:
        raise MissingSidecar("scene sidecar with 'diameter' and 'lookat' is required")
    suite = TransformSuite(float(sidecar["diameter"]), tuple(sidecar["lookat"]), **(overrides or {}))
    return suite_transforms(suite)


def suite_transforms(s):
    d = s.diameter
    small, large = s.small_shift * d, s.large_shift * d
    ya = (0.0, 0.0) if s.reaim else (s.small_angle, s.large_angle)
    return [
        PoseTransform(TauKind.TAU0),
        PoseTransform(TauKind.TAU1, dx=small, dyaw=-ya[0], reaim=s.reaim),
        PoseTransform(TauKind.TAU2, dy=small, dpitch=ya[0], reaim=s.reaim),
        PoseTransform(TauKind.TAU3, dx=large, dyaw=-ya[1], reaim=s.reaim),
        PoseTransform(TauKind.TAU4, dy=large, dpitch=ya[1], reaim=s.reaim),
        PoseTransform(TauKind.TAU5, dx=small, dyaw=-ya[0], droll=s.roll_angle, reaim=s.reaim),
        PoseTransform(TauKind.TAU6, dy=small, dpitch=ya[0], droll=s.roll_angle, reaim=s.reaim),
    ]


# --------------------------------------------------------------------------
# records

def eps_key(eps):
    return f"{eps:g}"


def eps_tag(eps):
    return f"inc_{eps:g}".replace(".", "")


@dataclass
class IncRecord:
    frame: str
    sut: str
    arm: str                  # "transform" | "mutation"
    test: str                 # tau id or mutation name
    metric: str               # metric name, "*" for a failed comparison
    raw: float = None
    deviation: float = None
    inc: dict = field(default_factory=dict)
    failed: bool = False
    error: str = ""

    @classmethod
    def evaluate(cls, frame, sut, arm, test, mv, epsilons):
        return cls(frame, sut, arm, test, mv.metric, float(mv.raw), float(mv.deviation),
                   {eps_key(e): bool(mv.deviation > e) for e in epsilons})

    @classmethod
    def failure(cls, frame, sut, arm, test, error, epsilons):
        return cls(frame, sut, arm, test, "*", inc={eps_key(e): False for e in epsilons},
                   failed=True, error=str(error))

    def to_json(self):
        return asdict(self)


@dataclass
class CampaignConfig:
    render: RenderConfig = field(default_factory=RenderConfig)
    epsilons: tuple = EPSILONS
    resolution: tuple = None     # (width, height); None keeps the dataset resolution
    max_frames: int = None

    def __post_init__(self):
        eps = tuple(float(e) for e in self.epsilons)
        if not eps or any(not 0 < e < 1 for e in eps) or any(b <= a for a, b in zip(eps, eps[1:])):
            raise MtError("epsilons must lie in (0, 1) and be strictly increasing")
        self.epsilons = eps


@dataclass
class CampaignReport:
    records: list
    skipped: list
    image_quality: list
    epsilons: tuple
    counts: dict = None
    correlations: list = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.counts is None:
            self.counts = count_inconsistencies(self.records, self.epsilons)

    @property
    def failed_records(self):
        return [r for r in self.records if r.failed]

    def to_json(self):
        return {
            "meta": self.meta,
            "epsilons": list(self.epsilons),
            "records": [r.to_json() for r in self.records],
            "skipped": self.skipped,
            "counts": self.counts,
            "image_quality": self.image_quality,
            "correlations": self.correlations if self.correlations is not None else [],
        }

    def dumps(self):
        return json.dumps(_jsonable(self.to_json()), sort_keys=True, indent=1, allow_nan=False)

    @classmethod
    def from_json(cls, d):
        recs = [IncRecord(**r) for r in d["records"]]
        return cls(recs, d.get("skipped", []), d.get("image_quality", []), tuple(d["epsilons"]),
                   d.get("counts"), d.get("correlations"), d.get("meta", {}))

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["frame", "sut", "arm", "tau_or_mutation", "metric", "raw", "deviation"]
                   + [eps_tag(e) for e in self.epsilons] + ["failed"])
        for r in self.records:
            w.writerow([r.frame, r.sut, r.arm, r.test, r.metric,
                        "" if r.raw is None else repr(r.raw), "" if r.deviation is None else repr(r.deviation)]
                       + [int(r.inc.get(eps_key(e), False)) for e in self.epsilons] + [int(r.failed)])
        return buf.getvalue()

    def summary_table(self):
        return format_counts(self.counts, self.epsilons)


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else None
    if isinstance(x, np.integer):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    return x


def count_inconsistencies(records, epsilons):
    """counts[sut][test][metric][eps] = number of flagged records."""
    counts = {}
    for r in records:
        if r.failed:
            continue
        slot = counts.setdefault(r.sut, {}).setdefault(r.test, {}).setdefault(
            r.metric, {eps_key(e): 0 for e in epsilons})
        for e in epsilons:
            slot[eps_key(e)] += int(bool(r.inc.get(eps_key(e), False)))
    return counts


def format_counts(counts, epsilons):
    head = ["sut", "test", "metric"] + [f"eps={e:g}" for e in epsilons]
    rows = [head]
    for sut in sorted(counts):
        for test in sorted(counts[sut]):
            for metric in sorted(counts[sut][test]):
                c = counts[sut][test][metric]
                rows.append([sut, test, metric] + [str(c[eps_key(e)]) for e in epsilons])
    widths = [max(len(r[i]) for r in rows) for i in range(len(head))]
    lines = []
    for k, r in enumerate(rows):
        lines.append("  ".join(v.ljust(widths[i]) if i < 3 else v.rjust(widths[i]) for i, v in enumerate(r)))
        if k == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


# --------------------------------------------------------------------------
# campaign

def _quality_row(frame, arm, test, reference, a, b):
    p = imqual.psnr(a, b)
    return {"frame": frame, "arm": arm, "test": test, "reference": reference,
            "psnr": p if math.isfinite(p) else None, "psnr_infinite": not math.isfinite(p),
            "ssim": imqual.ssim(a, b) if min(a.width, a.height) >= 11 else None,
            "lpips": imqual.lpips(a, b), "lpips_available": False}


def _compare(frame, sut, arm, test, out_a, out_b, h, size, epsilons, records, skipped):
    if isinstance(out_a, Classification):
        for mv in classify_metrics(out_a.probs, out_b.probs):
            records.append(IncRecord.evaluate(frame, sut, arm, test, mv, epsilons))
        return
    if h is None:
        skipped.append({"frame": frame, "sut": sut, "test": test, "metric": "repeatability",
                        "reason": "no planar model"})
    else:
        mv = repeatability(out_a.points, out_b.points, h, size)
        records.append(IncRecord.evaluate(frame, sut, arm, test, mv, epsilons))
    records.append(IncRecord.evaluate(frame, sut, arm, test, ip_spread(out_a.points, out_b.points, size),
                                      epsilons))


def run_campaign(field, dataset, suts, transforms, mutations=(), cfg=None):
    """Evaluate every (eval frame, SUT, transform/mutation) combination.

    SUT failures are recorded per comparison and never abort the campaign.
    """
    cfg = cfg or CampaignConfig()
    eps = cfg.epsilons
    intr = dataset.intrinsics
    if cfg.resolution is not None and tuple(cfg.resolution) != (intr.width, intr.height):
        intr = intr.scaled(*cfg.resolution)
    native = (intr.width, intr.height) == (dataset.intrinsics.width, dataset.intrinsics.height)
    scene = dataset.scene
    if not native and scene is None:
        raise MtError("test resolution differs from the dataset and no scene is available to re-capture")
    plane = dataset.plane
    lookat = dataset.lookat
    size = (intr.width, intr.height)
    frames = dataset.eval_indices
    if cfg.max_frames is not None:
        frames = frames[:cfg.max_frames]

    records, skipped, quality = [], [], []
    for k in frames:
        fid = dataset.frames[k].id
        pose = dataset.frames[k].pose
        real = dataset.image(k) if native else raytrace(scene, intr, pose)
        nerf = render_image(field, intr, pose, cfg.render)
        quality.append(_quality_row(fid, "transform", "tau0", "real", real, nerf))

        views = {}
        for tau in transforms:
            if tau.kind is TauKind.TAU0:
                continue
            tpose = apply_transform(pose, tau, lookat)
            img = render_image(field, intr, tpose, cfg.render).with_provenance("transformed")
            try:
                h = plane_homography(intr, pose, tpose, plane) if plane is not None else None
            except PlaneBehindCamera:
                h = None
            views[tau.kind.value] = (img, h)
            if scene is not None:
                quality.append(_quality_row(fid, "transform", tau.kind.value, "raytrace",
                                            raytrace(scene, intr, tpose), img))
        mutated = {}
        for m in mutations:
            mutated[m.name] = mutate(real, m)
            quality.append(_quality_row(fid, "mutation", m.name, "real", real, mutated[m.name]))

        for sut in suts:
            name = sut.descriptor.name

            def out(img):
                try:
                    return run_sut(sut, img), None
                except SutError as e:
                    logger.warning("%s failed on frame %s: %s", name, fid, e)
                    return None, e

            def pair(arm, test, a, b, h):
                if a[0] is None or b[0] is None:
                    records.append(IncRecord.failure(fid, name, arm, test, a[1] or b[1], eps))
                else:
                    _compare(fid, name, arm, test, a[0], b[0], h, size, eps, records, skipped)

            o_real, o_nerf = out(real), out(nerf)
            if any(t.kind is TauKind.TAU0 for t in transforms):
                pair("transform", "tau0", o_real, o_nerf, np.eye(3))
            for test, (img, h) in views.items():
                pair("transform", test, o_nerf, out(img), h)
            for test, img in mutated.items():
                pair("mutation", test, o_real, out(img), np.eye(3))

    meta = {"frames": [dataset.frames[k].id for k in frames], "resolution": list(size),
            "suts": [s.descriptor.name for s in suts],
            "transforms": [asdict(t) | {"kind": t.kind.value} for t in transforms],
            "mutations": [m.to_dict() for m in mutations],
            "render": asdict(cfg.render)}
    report = CampaignReport(records, skipped, quality, eps, meta=meta)
    try:
        report.correlations = correlation_table(report)
    except InsufficientData:
        report.correlations = []
    return report


# --------------------------------------------------------------------------
# statistics

def average_ranks(x):
    """1-based ranks with ties sharing their mean rank."""
    x = np.asarray(x, dtype=np.float64)
    order = np.argsort(x, kind="mergesort")
    xs = x[order]
    ranks = np.empty(len(x))
    i = 0
    while i < len(x):
        j = i
        while j + 1 < len(x) and xs[j + 1] == xs[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman(x, y):
    """Tie-corrected Spearman rho with a two-sided t-approximation p-value."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise MtError("spearman needs equal-length inputs")
    n = len(x)
    if n < 4:
        raise TooFewSamples(f"need at least 4 pairs, got {n}")
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if den == 0.0:
        raise ConstantInput("rank correlation undefined for constant input")
    rho = float(np.clip(dx @ dy / den, -1.0, 1.0))
    if abs(rho) >= 1.0 - 1e-15:
        return float(np.sign(rho)), 0.0
    t = rho * math.sqrt((n - 2) / (1.0 - rho * rho))
    p = float(2.0 * stats.t.sf(abs(t), n - 2))
    return rho, min(1.0, max(0.0, p))


def correlation_table(report, alpha=SIGNIFICANCE):
    """Spearman of each tau0 SUT metric against each image metric over frames."""
    iq = {r["frame"]: r for r in report.image_quality if r["arm"] == "transform" and r["test"] == "tau0"}
    sut_cols = {}
    for r in report.records:
        if r.arm == "transform" and r.test == "tau0" and not r.failed and r.frame in iq:
            sut_cols.setdefault((r.sut, r.metric), {})[r.frame] = r.raw
    if not iq or not sut_cols:
        raise InsufficientData("report has no tau0 rows with both metric families")
    table = []
    for (sut, metric), col in sorted(sut_cols.items()):
        for im in IMAGE_METRICS:
            entry = {"sut": sut, "sut_metric": metric, "image_metric": im,
                     "rho": None, "p": None, "significant": False, "n": 0, "status": "ok"}
            pairs = [(col[f], iq[f][im]) for f in sorted(col) if iq[f].get(im) is not None]
            entry["n"] = len(pairs)
            if im == "lpips" and not pairs:
                entry["status"] = "unavailable"
            else:
                try:
                    xs, ys = zip(*pairs) if pairs else ((), ())
                    rho, p = spearman(xs, ys)
                    entry.update(rho=rho, p=p, significant=bool(p <= alpha))
                except ConstantInput:
                    entry["status"] = "constant_input"
                except TooFewSamples:
                    entry["status"] = "insufficient_data"
            table.append(entry)
    return table


def mean_deviation(report, sut, test, metrics=None):
    vals = [r.deviation for r in report.records
            if r.sut == sut and r.test == test and not r.failed and (metrics is None or r.metric in metrics)]
    return float(np.mean(vals)) if vals else float("nan")
