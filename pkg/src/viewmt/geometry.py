"""Pinhole cameras, rigid poses, rays, pose transforms and plane homographies.

Camera convention (used everywhere in the package): camera-space +z is the
viewing direction, +x points right and +y points down in the image.
Pixel coordinates follow the OpenCV convention: the center of pixel
(column x, row y) is the continuous point (x, y).
Rotations are world-from-camera, so the columns of ``rotation`` are the camera
axes expressed in world coordinates. The world up vector is +z.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

WORLD_UP = np.array([0.0, 0.0, 1.0])
T_NEAR_FLOOR = 1e-4


class GeometryError(ValueError):
    pass


class NoIntersection(GeometryError):
    pass


class DegenerateAim(GeometryError):
    pass


class PlaneBehindCamera(GeometryError):
    pass


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside the image")

    @classmethod
    def from_fov(cls, width, height, hfov_deg):
        fx = 0.5 * width / math.tan(math.radians(hfov_deg) / 2)
        return cls(fx, fx, (width - 1) / 2.0, (height - 1) / 2.0, int(width), int(height))

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, width, height):
        """Same field of view at another resolution."""
        sx, sy = width / self.width, height / self.height
        cx = (self.cx + 0.5) * sx - 0.5
        cy = (self.cy + 0.5) * sy - 0.5
        return CameraIntrinsics(self.fx * sx, self.fy * sy, cx, cy, int(width), int(height))

    def to_dict(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
                   int(d["width"]), int(d["height"]))


@dataclass(frozen=True, eq=False)
class CameraPose:
    position: np.ndarray
    rotation: np.ndarray

    def __post_init__(self):
        p = np.array(self.position, dtype=np.float64).reshape(3)
        r = np.array(self.rotation, dtype=np.float64).reshape(3, 3)
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise GeometryError("rotation is not proper (det != +1)")
        p.flags.writeable = False
        r.flags.writeable = False
        object.__setattr__(self, "position", p)
        object.__setattr__(self, "rotation", r)

    @property
    def forward(self):
        return self.rotation[:, 2]

    def matrix(self):
        """4x4 world-from-camera matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.position
        return m

    @classmethod
    def from_matrix(cls, m):
        m = np.asarray(m, dtype=np.float64).reshape(4, 4)
        return cls(m[:3, 3], m[:3, :3])

    def world_to_camera(self, pts):
        return (np.asarray(pts, dtype=np.float64) - self.position) @ self.rotation

    def __eq__(self, other):
        if not isinstance(other, CameraPose):
            return NotImplemented
        return np.array_equal(self.position, other.position) and np.array_equal(self.rotation, other.rotation)

    def __hash__(self):
        return hash((self.position.tobytes(), self.rotation.tobytes()))


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise GeometryError("ray direction must be unit length")
        if not (0 <= self.t_near < self.t_far):
            raise GeometryError("need 0 <= t_near < t_far")

    def at(self, t):
        return np.asarray(self.origin) + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple

    def __post_init__(self):
        lo, hi = np.asarray(self.lo, float), np.asarray(self.hi, float)
        if lo.shape != (3,) or hi.shape != (3,) or np.any(hi <= lo):
            raise GeometryError("degenerate bounding box")
        object.__setattr__(self, "lo", tuple(float(v) for v in lo))
        object.__setattr__(self, "hi", tuple(float(v) for v in hi))

    @property
    def size(self):
        return np.subtract(self.hi, self.lo)

    @property
    def center(self):
        return 0.5 * np.add(self.hi, self.lo)

    @property
    def diameter(self):
        return float(np.linalg.norm(self.size))

    def inflated(self, frac):
        pad = 0.5 * frac * self.size
        return Box(tuple(np.subtract(self.lo, pad)), tuple(np.add(self.hi, pad)))


class TauKind(str, enum.Enum):
    TAU0 = "tau0"
    TAU1 = "tau1"
    TAU2 = "tau2"
    TAU3 = "tau3"
    TAU4 = "tau4"
    TAU5 = "tau5"
    TAU6 = "tau6"


@dataclass(frozen=True)
class PoseTransform:
    kind: TauKind
    dx: float = 0.0
    dy: float = 0.0
    dz: float = 0.0
    droll: float = 0.0
    dpitch: float = 0.0
    dyaw: float = 0.0
    reaim: bool = False

    def __post_init__(self):
        object.__setattr__(self, "kind", TauKind(self.kind))
        if self.kind is TauKind.TAU0 and (self.reaim or any(
                (self.dx, self.dy, self.dz, self.droll, self.dpitch, self.dyaw))):
            raise GeometryError("tau0 must be the identity transform")

    @property
    def translation(self):
        return np.array([self.dx, self.dy, self.dz])


@dataclass(frozen=True)
class PlaneModel:
    normal: tuple
    distance: float

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be unit length")
        object.__setattr__(self, "normal", tuple(float(v) for v in n))
        object.__setattr__(self, "distance", float(self.distance))

    def to_dict(self):
        return {"normal": list(self.normal), "distance": self.distance}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["normal"]), d["distance"])


# --------------------------------------------------------------------------
# rotations

def rot_x(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def ypr_matrix(yaw, pitch, roll):
    """Intrinsic yaw -> pitch -> roll in camera axes.

    Yaw turns about the camera y axis (image vertical), pitch about camera x,
    roll about the optical axis z.
    """
    return rot_y(yaw) @ rot_x(pitch) @ rot_z(roll)


def _orthonormalize(r):
    u, _, vt = np.linalg.svd(r)
    out = u @ vt
    if np.linalg.det(out) < 0:
        u[:, -1] *= -1
        out = u @ vt
    return out


def look_at(position, target, up=WORLD_UP):
    """Pose at ``position`` with its optical axis through ``target``.

    Image "up" (camera -y) follows the world up vector projected onto the
    image plane. Falls back to world +y when looking straight up or down.
    """
    position = np.asarray(position, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-9:
        raise DegenerateAim("camera position coincides with the look-at target")
    fwd = fwd / n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, up)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(fwd, np.array([0.0, 1.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    return CameraPose(position, np.column_stack([right, down, fwd]))


# --------------------------------------------------------------------------
# rays

def ray_box(origins, dirs, box):
    """Slab test. Returns (t_near, t_far, hit) arrays; t_near floored at 1e-4."""
    origins = np.atleast_2d(origins)
    dirs = np.atleast_2d(dirs)
    lo, hi = np.asarray(box.lo), np.asarray(box.hi)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t0 = (lo - origins) * inv
        t1 = (hi - origins) * inv
    tmin = np.minimum(t0, t1)
    tmax = np.maximum(t0, t1)
    # axis-parallel rays: inside slab -> unbounded, outside -> miss
    par = dirs == 0
    inside = (origins >= lo) & (origins <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
    tn = np.maximum(tmin.max(axis=1), T_NEAR_FLOOR)
    tf = tmax.min(axis=1)
    return tn, tf, tf > tn


def pixel_directions(intr, pose, px=None):
    """World-space unit directions through pixel coordinates.

    ``px`` is an (N, 2) array of (x, y) coordinates; default is every pixel
    center in row-major order.
    """
    if px is None:
        ys, xs = np.mgrid[0:intr.height, 0:intr.width]
        px = np.column_stack([xs.ravel(), ys.ravel()])
    px = np.asarray(px, dtype=np.float64).reshape(-1, 2)
    d_cam = np.column_stack([
        (px[:, 0] - intr.cx) / intr.fx,
        (px[:, 1] - intr.cy) / intr.fy,
        np.ones(len(px)),
    ])
    d = d_cam @ pose.rotation.T
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def pixel_ray(intr, pose, px, bounds):
    x, y = px
    if not (-0.5 <= x < intr.width - 0.5 and -0.5 <= y < intr.height - 0.5):
        raise GeometryError(f"pixel {px} outside the image")
    d = pixel_directions(intr, pose, [[x, y]])[0]
    return ray_from(pose.position, d, bounds)


def ray_from(origin, direction, bounds):
    direction = np.asarray(direction, dtype=np.float64)
    direction = direction / np.linalg.norm(direction)
    tn, tf, hit = ray_box(origin, direction, bounds)
    if not hit[0]:
        raise NoIntersection("ray misses the bounding box")
    return Ray(np.asarray(origin, dtype=np.float64), direction, float(tn[0]), float(tf[0]))


def project(intr, pose, pts):
    """World points -> continuous pixel coordinates (N, 2) and depths (N,)."""
    pc = pose.world_to_camera(np.atleast_2d(pts))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * pc[:, 0] / z + intr.cx
        v = intr.fy * pc[:, 1] / z + intr.cy
    return np.column_stack([u, v]), z


# --------------------------------------------------------------------------
# transforms

def apply_transform(pose, tau, lookat=None):
    """Apply a pose transform: local translation, optional re-aim, then yaw/pitch/roll."""
    if tau.kind is TauKind.TAU0:
        return pose
    position = pose.position + pose.rotation @ tau.translation
    rotation = pose.rotation
    if tau.reaim:
        if lookat is None:
            raise DegenerateAim("re-aim requested without a look-at target")
        rotation = look_at(position, lookat).rotation
    if tau.dyaw or tau.dpitch or tau.droll:
        rotation = _orthonormalize(rotation @ ypr_matrix(tau.dyaw, tau.dpitch, tau.droll))
    return CameraPose(position, rotation)


# --------------------------------------------------------------------------
# homography

def _plane_in_camera(pose, plane):
    n = np.asarray(plane.normal)
    n_c = pose.rotation.T @ n
    d_c = plane.distance - n @ pose.position
    if abs(d_c) < 1e-12:
        raise PlaneBehindCamera("camera center lies on the plane")
    if d_c < 0:
        n_c, d_c = -n_c, -d_c
    # principal ray must reach the plane at positive depth
    if n_c[2] <= 0:
        raise PlaneBehindCamera("plane is not in front of the camera")
    return n_c, d_c


def plane_homography(intr, pose_a, pose_b, plane, intr_b=None):
    """3x3 H with x_b ~ H x_a for pixels of points on ``plane``.

    H[2, 2] is normalized to 1.
    """
    intr_b = intr if intr_b is None else intr_b
    n_a, d_a = _plane_in_camera(pose_a, plane)
    _plane_in_camera(pose_b, plane)
    r_ba = pose_b.rotation.T @ pose_a.rotation
    t_ba = pose_b.rotation.T @ (pose_a.position - pose_b.position)
    h = intr_b.K @ (r_ba + np.outer(t_ba, n_a) / d_a) @ np.linalg.inv(intr.K)
    return h / h[2, 2]


def apply_homography(h, pts):
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    hp = np.column_stack([pts, np.ones(len(pts))]) @ np.asarray(h).T
    with np.errstate(divide="ignore", invalid="ignore"):
        return hp[:, :2] / hp[:, 2:3]


def raycast_plane(intr, pose, px, plane):
    """Intersect pixel rays with a plane. Returns world points and ray parameters."""
    d = pixel_directions(intr, pose, px)
    n = np.asarray(plane.normal)
    denom = d @ n
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (plane.distance - n @ pose.position) / denom
    return pose.position + t[:, None] * d, t


# --------------------------------------------------------------------------
# pose files

@dataclass
class PoseFrame:
    id: str
    pose: CameraPose
    image: str = ""


@dataclass
class PoseFile:
    intrinsics: CameraIntrinsics
    frames: list = field(default_factory=list)

    def to_dict(self):
        return {
            "intrinsics": self.intrinsics.to_dict(),
            "frames": [{"id": f.id, "world_from_camera": [float(v) for v in f.pose.matrix().ravel()],
                        "image": f.image} for f in self.frames],
        }

    @classmethod
    def from_dict(cls, d):
        frames = [PoseFrame(str(f["id"]), CameraPose.from_matrix(f["world_from_camera"]), f.get("image", ""))
                  for f in d["frames"]]
        return cls(CameraIntrinsics.from_dict(d["intrinsics"]), frames)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path):
        return cls.from_dict(json.loads(Path(path).read_text()))
