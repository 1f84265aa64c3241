"""Ground-truth raytracer standing in for real camera captures.

Two procedural scenes, both measured in centimeters:

* ``wall``: a textured vertical rectangle in the plane y = 0 facing -y,
  scanned by a camera that sweeps a Lissajous path in front of it.
* ``object``: a sphere and a box standing on a square ground patch, orbited
  by the camera.

Albedo comes from bilinear (smoothstep) value noise over a hashed lattice,
combined with a checkerboard (lattice cells XOR-ed), and blended between the
two colors of a palette. Lattice values are
``to_unit(hash_words(seed, ix, iy, surface_id))`` from :mod:`viewmt._hash`.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from ._hash import hash_words, to_unit
from .geometry import (Box, CameraIntrinsics, PlaneModel, PoseFile, PoseFrame, look_at,
                       pixel_directions)
from .imqual import ImageBuffer, read_ppm, write_ppm

logger = logging.getLogger(__name__)

EVAL_EVERY = 10
EVAL_OFFSET = 1


class IoFailure(OSError):
    pass


@dataclass(frozen=True)
class SceneSpec:
    kind: str = "wall"
    seed: int = 0
    texture_scale: float = 4.0
    light_dir: tuple = (-0.3, -0.8, 0.52)
    ambient: float = 0.35
    background: tuple = (0.08, 0.2, 0.3)
    palette: tuple = ((0.25, 0.45, 0.3), (0.85, 0.75, 0.5))
    checker_weight: float = 0.3
    # wall
    wall_plane: PlaneModel = PlaneModel((0.0, -1.0, 0.0), 0.0)
    wall_half_extent: tuple = (40.0, 25.0)
    wall_depth: float = 1.5        # scene-box half depth; a tight box keeps the fitted wall from smearing in depth
    # object
    sphere_center: tuple = (-7.0, -2.0, 8.0)
    sphere_radius: float = 8.0
    box_center: tuple = (9.0, 4.0, 6.0)
    box_half: tuple = (6.0, 6.0, 6.0)
    ground_half: float = 30.0
    ground_palette: tuple = ((0.35, 0.33, 0.3), (0.55, 0.52, 0.48))

    def __post_init__(self):
        if self.kind not in ("wall", "object"):
            raise ValueError(f"unknown scene kind {self.kind!r}")
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError("ambient must lie in [0, 1]")
        if self.texture_scale <= 0 or self.sphere_radius <= 0 or self.ground_half <= 0 or self.wall_depth <= 0:
            raise ValueError("degenerate scene geometry")
        l = np.asarray(self.light_dir, dtype=np.float64)
        norm = np.linalg.norm(l)
        if abs(norm - 1.0) > 1e-12:
            # normalizing is not idempotent in floating point; leave unit vectors alone
            l = l / norm
        object.__setattr__(self, "light_dir", tuple(float(v) for v in l))
        if isinstance(self.wall_plane, dict):
            object.__setattr__(self, "wall_plane", PlaneModel.from_dict(self.wall_plane))

    @property
    def plane(self):
        """Planar model usable for homographies; None for the object scene."""
        return self.wall_plane if self.kind == "wall" else None

    def scene_box(self):
        if self.kind == "wall":
            n = np.asarray(self.wall_plane.normal)
            c = n * self.wall_plane.distance
            hx, hz = self.wall_half_extent
            depth = self.wall_depth
            u, v = _wall_axes(self.wall_plane)
            corners = [c + a * hx * u + b * hz * v + d * depth * n
                       for a in (-1, 1) for b in (-1, 1) for d in (-1, 1)]
            corners = np.array(corners)
            return Box(tuple(corners.min(0)), tuple(corners.max(0)))
        g = self.ground_half
        top = max(self.sphere_center[2] + self.sphere_radius, self.box_center[2] + self.box_half[2])
        return Box((-g, -g, -2.0), (g, g, top + 2.0))

    def to_dict(self):
        d = asdict(self)
        d["wall_plane"] = self.wall_plane.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        for k in ("light_dir", "background", "wall_half_extent", "sphere_center", "box_center", "box_half"):
            if k in d:
                d[k] = tuple(d[k])
        for k in ("palette", "ground_palette"):
            if k in d:
                d[k] = tuple(tuple(c) for c in d[k])
        if "wall_plane" in d:
            d["wall_plane"] = PlaneModel.from_dict(d["wall_plane"])
        return cls(**d)


@dataclass(frozen=True)
class TrajectorySpec:
    kind: str = "wall_scan"
    n_frames: int = 300
    amplitude: float = 12.0
    height: float = 0.0
    lookat: tuple = (0.0, 0.0, 0.0)
    standoff: float = 40.0

    def __post_init__(self):
        if self.kind not in ("wall_scan", "orbit"):
            raise ValueError(f"unknown trajectory kind {self.kind!r}")
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "lookat" in d:
            d["lookat"] = tuple(d["lookat"])
        return cls(**d)


def default_wall_scene(seed=0):
    return SceneSpec(kind="wall", seed=seed)


def default_object_scene(seed=0, palette=((0.75, 0.15, 0.1), (0.95, 0.55, 0.2))):
    return SceneSpec(kind="object", seed=seed, texture_scale=3.0, light_dir=(0.4, -0.5, 0.77),
                     ambient=0.4, background=(0.6, 0.72, 0.85), palette=palette)


def default_wall_trajectory(n_frames=300):
    return TrajectorySpec("wall_scan", n_frames, amplitude=12.0, height=0.0, lookat=(0.0, 0.0, 0.0),
                          standoff=40.0)


def default_orbit(n_frames=60):
    return TrajectorySpec("orbit", n_frames, amplitude=60.0, height=35.0, lookat=(0.0, 0.0, 6.0))


# --------------------------------------------------------------------------
# trajectories

def trajectory_poses(traj):
    """Camera poses along a trajectory, all aimed at ``traj.lookat``."""
    target = np.asarray(traj.lookat, dtype=np.float64)
    poses = []
    for k in range(traj.n_frames):
        if traj.kind == "orbit":
            a = 2.0 * math.pi * k / traj.n_frames
            pos = target + np.array([traj.amplitude * math.cos(a), traj.amplitude * math.sin(a), 0.0])
            pos[2] = traj.height
        else:
            s = k / (traj.n_frames - 1)
            pos = target + np.array([traj.amplitude * math.sin(2.0 * math.pi * s),
                                     -traj.standoff,
                                     traj.height + 0.5 * traj.amplitude * math.sin(6.0 * math.pi * s)])
        poses.append(look_at(pos, target))
    return poses


def is_eval_frame(k, every=EVAL_EVERY, offset=EVAL_OFFSET):
    return k % every == offset % every


# --------------------------------------------------------------------------
# texture

def _smooth(t):
    return t * t * (3.0 - 2.0 * t)


def value_noise(seed, u, v, surface=0):
    iu, iv = np.floor(u), np.floor(v)
    fu, fv = _smooth(u - iu), _smooth(v - iv)
    iu, iv = iu.astype(np.int64), iv.astype(np.int64)

    def lat(a, b):
        return to_unit(hash_words(seed, a, b, surface))

    n0 = lat(iu, iv) * (1 - fu) + lat(iu + 1, iv) * fu
    n1 = lat(iu, iv + 1) * (1 - fu) + lat(iu + 1, iv + 1) * fu
    return n0 * (1 - fv) + n1 * fv


def albedo(spec, u, v, palette, surface=0):
    """Palette blend driven by value noise and an XOR checkerboard at ``texture_scale``."""
    s = spec.texture_scale
    n = 0.65 * value_noise(spec.seed, u / s, v / s, surface) + 0.35 * value_noise(
        spec.seed + 1, 2.0 * u / s, 2.0 * v / s, surface)
    cu = np.floor(u / (2.0 * s)).astype(np.int64)
    cv = np.floor(v / (2.0 * s)).astype(np.int64)
    checker = ((cu ^ cv) & 1).astype(np.float64)
    t = np.clip((1.0 - spec.checker_weight) * n + spec.checker_weight * checker, 0.0, 1.0)
    a, b = np.asarray(palette[0]), np.asarray(palette[1])
    return a + t[:, None] * (b - a)


def _wall_axes(plane):
    n = np.asarray(plane.normal)
    up = np.array([0.0, 0.0, 1.0])
    u = np.cross(up, n)
    if np.linalg.norm(u) < 1e-9:
        u = np.array([1.0, 0.0, 0.0])
    u /= np.linalg.norm(u)
    v = np.cross(n, u)
    return u, v


# --------------------------------------------------------------------------
# intersection

def _hit_rect(o, d, center, n, u, v, hu, hv):
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = ((center - o) @ n) / denom
    p = o + t[:, None] * d
    rel = p - center
    a, b = rel @ u, rel @ v
    ok = (np.abs(denom) > 1e-12) & (t > 1e-6) & (np.abs(a) <= hu) & (np.abs(b) <= hv)
    return np.where(ok, t, np.inf), a, b


def _hit_sphere(o, d, c, r):
    oc = o - c
    b = d @ oc
    disc = b * b - (oc @ oc - r * r)
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0, t1 = -b - sq, -b + sq
    t = np.where(t0 > 1e-6, t0, t1)
    return np.where((disc >= 0) & (t > 1e-6), t, np.inf)


def _hit_box(o, d, c, h):
    lo, hi = np.asarray(c) - h, np.asarray(c) + h
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (lo - o) * inv
        t1 = (hi - o) * inv
    tmin = np.nan_to_num(np.minimum(t0, t1), nan=-np.inf).max(axis=1)
    tmax = np.nan_to_num(np.maximum(t0, t1), nan=np.inf).min(axis=1)
    return np.where((tmax >= tmin) & (tmin > 1e-6), tmin, np.inf)


def _shade(spec, alb, normals, dirs):
    # normals face the viewer
    flip = np.sum(normals * dirs, axis=1) > 0
    normals = np.where(flip[:, None], -normals, normals)
    lam = np.maximum(0.0, normals @ np.asarray(spec.light_dir))
    return alb * (spec.ambient + (1.0 - spec.ambient) * lam)[:, None]


def trace_rays(spec, origin, dirs):
    """Shade rays sharing one origin; returns (N, 3) colors in [0, 1]."""
    o = np.asarray(origin, dtype=np.float64)
    n_rays = len(dirs)
    out = np.tile(np.asarray(spec.background, dtype=np.float64), (n_rays, 1))
    if spec.kind == "wall":
        pl = spec.wall_plane
        n = np.asarray(pl.normal)
        u, v = _wall_axes(pl)
        t, a, b = _hit_rect(o, dirs, n * pl.distance, n, u, v, *spec.wall_half_extent)
        hit = np.isfinite(t)
        if hit.any():
            alb = albedo(spec, a[hit], b[hit], spec.palette, 0)
            out[hit] = _shade(spec, alb, np.tile(n, (hit.sum(), 1)), dirs[hit])
        return np.clip(out, 0.0, 1.0)

    g = spec.ground_half
    zu = np.array([0.0, 0.0, 1.0])
    t_ground, _, _ = _hit_rect(o, dirs, np.zeros(3), zu, np.array([1.0, 0, 0]), np.array([0, 1.0, 0]), g, g)
    t_sph = _hit_sphere(o, dirs, np.asarray(spec.sphere_center), spec.sphere_radius)
    t_box = _hit_box(o, dirs, spec.box_center, np.asarray(spec.box_half))
    ts = np.stack([t_ground, t_sph, t_box], axis=1)
    which = np.argmin(ts, axis=1)
    t = ts[np.arange(n_rays), which]
    hit = np.isfinite(t)
    p = o + np.where(hit, t, 0.0)[:, None] * dirs

    m = hit & (which == 0)
    if m.any():
        alb = albedo(spec, p[m, 0], p[m, 1], spec.ground_palette, 1)
        out[m] = _shade(spec, alb, np.tile(zu, (m.sum(), 1)), dirs[m])
    m = hit & (which == 1)
    if m.any():
        nrm = (p[m] - spec.sphere_center) / spec.sphere_radius
        # texture coords: arc length along longitude and latitude
        lon = np.arctan2(nrm[:, 1], nrm[:, 0]) * spec.sphere_radius
        lat = np.arcsin(np.clip(nrm[:, 2], -1, 1)) * spec.sphere_radius
        alb = albedo(spec, lon, lat, spec.palette, 2)
        out[m] = _shade(spec, alb, nrm, dirs[m])
    m = hit & (which == 2)
    if m.any():
        rel = (p[m] - spec.box_center) / np.asarray(spec.box_half)
        axis = np.argmax(np.abs(rel), axis=1)
        nrm = np.zeros_like(rel)
        nrm[np.arange(len(rel)), axis] = np.sign(rel[np.arange(len(rel)), axis])
        q = p[m] - spec.box_center
        # in-face coordinates: the two axes other than the face normal
        ua = np.where(axis == 0, q[:, 1], q[:, 0])
        va = np.where(axis == 2, q[:, 1], q[:, 2])
        alb = albedo(spec, ua, va, spec.palette, 3)
        out[m] = _shade(spec, alb, nrm, dirs[m])
    return np.clip(out, 0.0, 1.0)


def raytrace(spec, intr, pose):
    dirs = pixel_directions(intr, pose)
    rgb = trace_rays(spec, pose.position, dirs)
    return ImageBuffer(rgb.reshape(intr.height, intr.width, 3), "real")


# --------------------------------------------------------------------------
# datasets on disk

@dataclass
class Dataset:
    root: Path
    intrinsics: CameraIntrinsics
    frames: list                  # PoseFrame
    sidecar: dict
    images: list = field(default_factory=list)

    @property
    def eval_every(self):
        return int(self.sidecar.get("split", {}).get("eval_every", EVAL_EVERY))

    @property
    def eval_offset(self):
        return int(self.sidecar.get("split", {}).get("eval_offset", EVAL_OFFSET))

    def is_eval(self, k):
        return is_eval_frame(k, self.eval_every, self.eval_offset)

    @property
    def train_indices(self):
        return [k for k in range(len(self.frames)) if not self.is_eval(k)]

    @property
    def eval_indices(self):
        return [k for k in range(len(self.frames)) if self.is_eval(k)]

    @property
    def scene(self):
        s = self.sidecar.get("scene")
        return SceneSpec.from_dict(s) if s else None

    @property
    def plane(self):
        p = self.sidecar.get("plane")
        return PlaneModel.from_dict(p) if p else None

    @property
    def lookat(self):
        return np.asarray(self.sidecar["lookat"], dtype=np.float64)

    @property
    def diameter(self):
        return float(self.sidecar["diameter"])

    def image(self, k):
        if self.images:
            return self.images[k]
        return read_ppm(self.root / self.frames[k].image)

    def posed(self, indices):
        from .field import PosedImages

        return PosedImages(self.intrinsics, [self.frames[k].pose for k in indices],
                           np.stack([self.image(k).pixels for k in indices]),
                           [self.frames[k].id for k in indices])

    def summary(self):
        return {"total": len(self.frames), "train": len(self.train_indices), "eval": len(self.eval_indices)}


def make_sidecar(spec, traj):
    return {
        "plane": spec.plane.to_dict() if spec.plane is not None else None,
        "lookat": [float(v) for v in traj.lookat],
        "diameter": spec.scene_box().diameter,
        "split": {"eval_every": EVAL_EVERY, "eval_offset": EVAL_OFFSET},
        "scene": spec.to_dict(),
        "box": {"lo": list(spec.scene_box().lo), "hi": list(spec.scene_box().hi)},
    }


def generate_dataset(spec, traj, intr, out_dir=None):
    """Raytrace every trajectory frame; with ``out_dir`` also write PPMs, poses.json and scene.json."""
    poses = trajectory_poses(traj)
    frames, images = [], []
    for k, pose in enumerate(poses):
        frames.append(PoseFrame(f"{k:05d}", pose, f"images/{k:05d}.ppm"))
        images.append(raytrace(spec, intr, pose))
    sidecar = make_sidecar(spec, traj)
    root = Path(out_dir) if out_dir is not None else None
    if root is not None:
        try:
            (root / "images").mkdir(parents=True, exist_ok=True)
            for f, img in zip(frames, images):
                write_ppm(root / f.image, img)
            PoseFile(intr, frames).save(root / "poses.json")
            (root / "scene.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True))
        except OSError as e:
            raise IoFailure(f"cannot write dataset to {root}: {e}") from e
        # round-trip through 8-bit so in-memory images equal what readers see
        images = [ImageBuffer.from_rgb8(img.to_rgb8()) for img in images]
    return Dataset(root, intr, frames, sidecar, images)


def load_dataset(root):
    root = Path(root)
    try:
        pf = PoseFile.load(root / "poses.json")
        sidecar = json.loads((root / "scene.json").read_text())
    except (OSError, ValueError) as e:
        raise IoFailure(f"cannot read dataset at {root}: {e}") from e
    return Dataset(root, pf.intrinsics, pf.frames, sidecar)
