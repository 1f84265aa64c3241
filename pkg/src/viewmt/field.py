"""Voxel-grid radiance field: trilinear lookup, quadrature volume rendering,
analytic gradients and an adaptive-step fitting loop.

Grid nodes sit on the bounding box: node ``i`` along an axis is at
``lo + i * (hi - lo) / (N - 1)``. Arrays are stored with shape ``(Nz, Ny, Nx)``
(color ``(Nz, Ny, Nx, 3)``) so the flat index is ``x + Nx * (y + Ny * z)``,
i.e. x varies fastest, matching the checkpoint layout.

Compositing for samples ``i = 0..S-1`` along a ray::

    alpha_i = 1 - exp(-sigma_i * delta_i)
    T_i     = prod_{j<i} (1 - alpha_j)
    w_i     = T_i * alpha_i
    C       = sum_i w_i c_i + T_S * background
"""

from __future__ import annotations

import logging
import struct
import time
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from numba import njit

from ._hash import hash_words, to_unit
from .geometry import Box, Ray, pixel_directions, ray_box

logger = logging.getLogger(__name__)

MAGIC = b"N2RF"
VERSION = 1
CHUNK_RAYS = 8192


class FieldError(ValueError):
    pass


class EmptyDataset(FieldError):
    pass


@dataclass
class RadianceField:
    resolution: tuple
    bounds: Box
    sigma: np.ndarray
    color: np.ndarray
    background: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        nx, ny, nz = (int(v) for v in self.resolution)
        if min(nx, ny, nz) < 2:
            raise FieldError("resolution must be >= 2 on every axis")
        self.resolution = (nx, ny, nz)
        self.sigma = np.asarray(self.sigma, dtype=np.float64).reshape(nz, ny, nx)
        self.color = np.asarray(self.color, dtype=np.float64).reshape(nz, ny, nx, 3)
        self.background = np.asarray(self.background, dtype=np.float64).reshape(3)
        if np.any(self.sigma < 0):
            raise FieldError("densities must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1) or np.any(self.background < 0) or np.any(self.background > 1):
            raise FieldError("colors must lie in [0, 1]")

    @classmethod
    def constant(cls, resolution, bounds, sigma=0.0, color=0.5, background=(0.0, 0.0, 0.0)):
        nx, ny, nz = resolution
        return cls(resolution, bounds, np.full((nz, ny, nx), float(sigma)),
                   np.full((nz, ny, nx, 3), color, dtype=np.float64), np.asarray(background, float))

    @property
    def n_voxels(self):
        nx, ny, nz = self.resolution
        return nx * ny * nz

    @property
    def spacing(self):
        return self.bounds.size / (np.asarray(self.resolution) - 1)

    def node_position(self, ix, iy, iz):
        return np.asarray(self.bounds.lo) + np.array([ix, iy, iz]) * self.spacing

    def copy(self):
        return RadianceField(self.resolution, self.bounds, self.sigma.copy(), self.color.copy(),
                             self.background.copy())

    def params(self):
        """Flat parameter vector: sigma, color (interleaved), background."""
        return np.concatenate([self.sigma.ravel(), self.color.ravel(), self.background])

    def set_params(self, p):
        n = self.n_voxels
        self.sigma = p[:n].reshape(self.sigma.shape).copy()
        self.color = p[n:4 * n].reshape(self.color.shape).copy()
        self.background = p[4 * n:4 * n + 3].copy()

    def project(self):
        """Clamp parameters back into the valid set."""
        np.maximum(self.sigma, 0.0, out=self.sigma)
        np.clip(self.color, 0.0, 1.0, out=self.color)
        np.clip(self.background, 0.0, 1.0, out=self.background)


@dataclass(frozen=True)
class RenderConfig:
    samples_per_ray: int = 64
    jitter: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.samples_per_ray < 2:
            raise FieldError("samples_per_ray must be >= 2")


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 3000
    rays_per_step: int = 4096
    learning_rate: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise FieldError("steps must be >= 0")
        if self.rays_per_step < 1:
            raise FieldError("rays_per_step must be >= 1")
        if not self.learning_rate > 0:
            raise FieldError("learning_rate must be positive")


# --------------------------------------------------------------------------
# interpolation

def _trilinear(field, pts):
    """Corner flat indices (M, 8), weights (M, 8) and an inside mask (M,)."""
    res = np.asarray(field.resolution)
    lo = np.asarray(field.bounds.lo)
    g = (pts - lo) / field.spacing
    tol = 1e-9
    inside = np.all((g >= -tol) & (g <= res - 1 + tol), axis=-1)
    g = np.clip(g, 0.0, res - 1)
    i0 = np.minimum(np.floor(g).astype(np.int64), res - 2)
    f = g - i0
    nx, ny = res[0], res[1]
    base = i0[:, 0] + nx * (i0[:, 1] + ny * i0[:, 2])
    fx, fy, fz = f[:, 0], f[:, 1], f[:, 2]
    gx, gy, gz = 1 - fx, 1 - fy, 1 - fz
    sx, sy, sz = 1, nx, nx * ny
    idx = np.stack([base, base + sx, base + sy, base + sx + sy,
                    base + sz, base + sx + sz, base + sy + sz, base + sx + sy + sz], axis=1)
    w = np.stack([gx * gy * gz, fx * gy * gz, gx * fy * gz, fx * fy * gz,
                  gx * gy * fz, fx * gy * fz, gx * fy * fz, fx * fy * fz], axis=1)
    w *= inside[:, None]
    return idx, w, inside


def sample_field(field, point):
    """Trilinear (sigma, rgb) at one world point; outside the bounds -> (0, background)."""
    pts = np.asarray(point, dtype=np.float64).reshape(1, 3)
    idx, w, inside = _trilinear(field, pts)
    if not inside[0]:
        return 0.0, field.background.copy()
    sig = float(field.sigma.ravel()[idx[0]] @ w[0])
    rgb = w[0] @ field.color.reshape(-1, 3)[idx[0]]
    return sig, rgb


# --------------------------------------------------------------------------
# rendering core: one compiled pass per ray, sequential in ray order so the
# gradient reduction is deterministic


@njit(cache=True, fastmath=False)
def _lookup(lo, inv_sp, res, p, idx, wts):
    """Trilinear corner indices/weights at p; returns False outside the grid."""
    nx, ny, nz = res[0], res[1], res[2]
    gx = (p[0] - lo[0]) * inv_sp[0]
    gy = (p[1] - lo[1]) * inv_sp[1]
    gz = (p[2] - lo[2]) * inv_sp[2]
    tol = 1e-9
    if gx < -tol or gy < -tol or gz < -tol or gx > nx - 1 + tol or gy > ny - 1 + tol or gz > nz - 1 + tol:
        return False
    gx = min(max(gx, 0.0), nx - 1.0)
    gy = min(max(gy, 0.0), ny - 1.0)
    gz = min(max(gz, 0.0), nz - 1.0)
    ix = min(int(gx), nx - 2)
    iy = min(int(gy), ny - 2)
    iz = min(int(gz), nz - 2)
    fx, fy, fz = gx - ix, gy - iy, gz - iz
    base = ix + nx * (iy + ny * iz)
    sy, sz = nx, nx * ny
    for k in range(8):
        dx, dy, dz = k & 1, (k >> 1) & 1, (k >> 2) & 1
        idx[k] = base + dx + dy * sy + dz * sz
        wts[k] = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * (fz if dz else 1.0 - fz)
    return True


@njit(cache=True, fastmath=False)
def _composite(packed, bg, lo, inv_sp, res, origins, dirs, tn, tf, u, hit,
               targets, gscale, out_color, out_resid, out_weights, grad, g_bg, want_weights, want_grad):
    """Render rays; with ``want_grad`` also backpropagate dL/dC = gscale * (C - target).

    ``packed`` holds (sigma, r, g, b) per voxel; ``grad`` has the same layout.
    """
    r, s = u.shape
    idx = np.empty((s, 8), np.int64)
    wts = np.empty((s, 8))
    sig = np.empty(s)
    rgb = np.empty((s, 3))
    delta = np.empty(s)
    trans = np.empty(s + 1)
    w = np.empty(s)
    p = np.empty(3)
    for ray in range(r):
        if not hit[ray]:
            for c in range(3):
                out_color[ray, c] = bg[c]
            out_resid[ray] = 1.0
            if want_weights:
                for i in range(s):
                    out_weights[ray, i] = 0.0
            if want_grad:
                for c in range(3):
                    g_bg[c] += gscale * (bg[c] - targets[ray, c])
            continue
        width = (tf[ray] - tn[ray]) / s
        tprev = 0.0
        for i in range(s):
            t = tn[ray] + (i + u[ray, i]) * width
            if i > 0:
                delta[i - 1] = t - tprev
            tprev = t
            for c in range(3):
                p[c] = origins[ray, c] + t * dirs[ray, c]
            sig[i] = 0.0
            rgb[i, 0] = 0.0
            rgb[i, 1] = 0.0
            rgb[i, 2] = 0.0
            if _lookup(lo, inv_sp, res, p, idx[i], wts[i]):
                for k in range(8):
                    j = idx[i, k]
                    wk = wts[i, k]
                    sig[i] += wk * packed[j, 0]
                    rgb[i, 0] += wk * packed[j, 1]
                    rgb[i, 1] += wk * packed[j, 2]
                    rgb[i, 2] += wk * packed[j, 3]
            else:
                for k in range(8):
                    idx[i, k] = 0
                    wts[i, k] = 0.0
        delta[s - 1] = width
        trans[0] = 1.0
        acc = 0.0
        c0 = 0.0
        c1 = 0.0
        c2 = 0.0
        for i in range(s):
            od = sig[i] * delta[i]
            acc += od
            trans[i + 1] = np.exp(-acc)
            w[i] = trans[i] * (1.0 - np.exp(-od))
            c0 += w[i] * rgb[i, 0]
            c1 += w[i] * rgb[i, 1]
            c2 += w[i] * rgb[i, 2]
        tl = trans[s]
        out_color[ray, 0] = c0 + tl * bg[0]
        out_color[ray, 1] = c1 + tl * bg[1]
        out_color[ray, 2] = c2 + tl * bg[2]
        out_resid[ray] = tl
        if want_weights:
            for i in range(s):
                out_weights[ray, i] = w[i]
        if want_grad:
            d0 = gscale * (out_color[ray, 0] - targets[ray, 0])
            d1 = gscale * (out_color[ray, 1] - targets[ray, 1])
            d2 = gscale * (out_color[ray, 2] - targets[ray, 2])
            bgdot = tl * (bg[0] * d0 + bg[1] * d1 + bg[2] * d2)
            g_bg[0] += tl * d0
            g_bg[1] += tl * d1
            g_bg[2] += tl * d2
            # dC/dsigma_k = delta_k (T_{k+1} c_k - sum_{i>k} w_i c_i - T_S bg)
            after = 0.0
            for i in range(s - 1, -1, -1):
                cdot = rgb[i, 0] * d0 + rgb[i, 1] * d1 + rgb[i, 2] * d2
                gs = delta[i] * (trans[i + 1] * cdot - after - bgdot)
                after += w[i] * cdot
                for k in range(8):
                    wk = wts[i, k]
                    if wk != 0.0:
                        j = idx[i, k]
                        ww = wk * w[i]
                        grad[j, 0] += wk * gs
                        grad[j, 1] += ww * d0
                        grad[j, 2] += ww * d1
                        grad[j, 3] += ww * d2


def _offsets(n_rays, cfg, ray_ids):
    """Per-sample positions inside their bins: 0.5, or hashed uniforms keyed by (seed, ray id, sample)."""
    s = cfg.samples_per_ray
    if not cfg.jitter:
        return np.full((n_rays, s), 0.5)
    j = np.arange(s, dtype=np.int64)
    return to_unit(hash_words(cfg.seed, np.asarray(ray_ids, dtype=np.int64)[:, None], j[None, :]))


def _pack(field):
    packed = np.empty((field.n_voxels, 4))
    packed[:, 0] = field.sigma.reshape(-1)
    packed[:, 1:] = field.color.reshape(-1, 3)
    return packed


def _run(field, origins, dirs, t_near, t_far, cfg, ray_ids, want_weights=False, targets=None, gscale=0.0,
         packed=None, background=None):
    r = len(dirs)
    origins = np.ascontiguousarray(np.broadcast_to(origins, (r, 3)), dtype=np.float64)
    dirs = np.ascontiguousarray(dirs, dtype=np.float64)
    if t_near is None:
        t_near, t_far, hit = ray_box(origins, dirs, field.bounds)
    else:
        t_near = np.asarray(t_near, dtype=np.float64)
        t_far = np.asarray(t_far, dtype=np.float64)
        hit = t_far > t_near
    if ray_ids is None:
        ray_ids = np.arange(r, dtype=np.int64)
    u = _offsets(r, cfg, ray_ids)
    want_grad = targets is not None
    if packed is None:
        packed = _pack(field)
        background = field.background
    out_color = np.empty((r, 3))
    out_resid = np.empty(r)
    out_w = np.empty((r, cfg.samples_per_ray) if want_weights else (0, 0))
    grad = np.zeros((len(packed) if want_grad else 0, 4))
    g_bg = np.zeros(3)
    _composite(packed, background, np.asarray(field.bounds.lo), 1.0 / field.spacing,
               np.asarray(field.resolution, dtype=np.int64), origins, dirs, t_near, t_far, u, hit,
               np.ascontiguousarray(targets, dtype=np.float64) if want_grad else np.zeros((0, 3)), float(gscale),
               out_color, out_resid, out_w, grad, g_bg, want_weights, want_grad)
    return out_color, out_resid, out_w, (grad, g_bg)


def render_rays(field, origins, dirs, cfg, ray_ids=None, t_near=None, t_far=None):
    """Render a batch of rays. Returns (colors (R, 3), residual transmittance (R,), weights (R, S))."""
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    color, resid, w, _ = _run(field, np.atleast_2d(origins), dirs, t_near, t_far, cfg, ray_ids, want_weights=True)
    return color, resid, w


def render_ray(field, ray: Ray, cfg: RenderConfig, ray_id=0):
    color, resid, w = render_rays(field, ray.origin[None], ray.direction[None], cfg,
                                  np.array([ray_id], dtype=np.int64),
                                  np.array([ray.t_near]), np.array([ray.t_far]))
    return color[0], float(resid[0]), w[0]


def render_image(field, intr, pose, cfg, chunk=CHUNK_RAYS):
    """Render every pixel; the jitter stream of pixel p is keyed by (seed, p)."""
    from .imqual import ImageBuffer

    dirs = pixel_directions(intr, pose)
    out = np.empty((len(dirs), 3))
    origin = pose.position[None, :]
    for start in range(0, len(dirs), chunk):
        sl = slice(start, start + chunk)
        d = dirs[sl]
        ids = np.arange(start, start + len(d), dtype=np.int64)
        out[sl], _, _, _ = _run(field, origin, d, None, None, cfg, ids)
    img = np.clip(out, 0.0, 1.0).reshape(intr.height, intr.width, 3)
    return ImageBuffer(img, "nerf")


# --------------------------------------------------------------------------
# loss and gradients

@dataclass
class RayBatch:
    origins: np.ndarray
    dirs: np.ndarray
    targets: np.ndarray
    ray_ids: np.ndarray = None
    t_near: np.ndarray = None
    t_far: np.ndarray = None

    def __post_init__(self):
        self.origins = np.atleast_2d(np.asarray(self.origins, dtype=np.float64))
        self.dirs = np.atleast_2d(np.asarray(self.dirs, dtype=np.float64))
        self.targets = np.atleast_2d(np.asarray(self.targets, dtype=np.float64))
        if len(self.origins) == 1 and len(self.dirs) > 1:
            self.origins = np.broadcast_to(self.origins, self.dirs.shape)
        if self.ray_ids is None:
            self.ray_ids = np.arange(len(self.dirs), dtype=np.int64)

    def __len__(self):
        return len(self.dirs)

    @classmethod
    def from_rays(cls, rays, targets):
        return cls(np.array([r.origin for r in rays]), np.array([r.direction for r in rays]),
                   targets, t_near=np.array([r.t_near for r in rays]),
                   t_far=np.array([r.t_far for r in rays]))


def loss_and_gradients(field, batch, cfg):
    """Mean squared RGB error over rays and channels plus analytic gradients.

    Gradients are returned in the layout of :meth:`RadianceField.params`.
    """
    if len(batch) == 0:
        raise FieldError("empty batch")
    scale = 2.0 / (3 * len(batch))
    color, _, _, (grad, g_bg) = _run(field, batch.origins, batch.dirs, batch.t_near, batch.t_far, cfg,
                                     batch.ray_ids, targets=batch.targets, gscale=scale)
    loss = float(np.mean((color - batch.targets) ** 2))
    return loss, np.concatenate([grad[:, 0], grad[:, 1:].ravel(), g_bg])


# --------------------------------------------------------------------------
# fitting

@dataclass
class PosedImages:
    """Posed training views: images (V, H, W, 3) in [0, 1] sharing one intrinsics."""
    intrinsics: object
    poses: list
    images: np.ndarray
    ids: list = None

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.ids is None:
            self.ids = [str(i) for i in range(len(self.poses))]

    def __len__(self):
        return len(self.poses)


class _RayTable:
    """All pixel rays of a dataset, clipped to the field bounds once."""

    def __init__(self, dataset, bounds):
        intr = dataset.intrinsics
        per = intr.width * intr.height
        n = per * len(dataset)
        self.origins = np.empty((n, 3))
        self.dirs = np.empty((n, 3))
        for v, pose in enumerate(dataset.poses):
            sl = slice(v * per, (v + 1) * per)
            self.dirs[sl] = pixel_directions(intr, pose)
            self.origins[sl] = pose.position
        self.targets = dataset.images.reshape(-1, 3)
        self.t_near, self.t_far, _ = ray_box(self.origins, self.dirs, bounds)

    def __len__(self):
        return len(self.dirs)

    def batch(self, sel, step):
        return RayBatch(self.origins[sel], self.dirs[sel], self.targets[sel],
                        ray_ids=sel.astype(np.int64) + np.int64(step) * np.int64(len(self)),
                        t_near=self.t_near[sel], t_far=self.t_far[sel])


@dataclass
class FitResult:
    field: RadianceField
    loss_history: list
    wall_time: float


def fit(field, dataset, tcfg, rcfg, callback=None):
    """Fit ``field`` (a copy is returned) to posed images with projected Adagrad.

    Each step draws ``rays_per_step`` pixel rays uniformly over all images,
    accumulates ``s += g**2`` and applies ``p -= lr * g / sqrt(s + 1e-8)``,
    then projects densities to >= 0 and colors to [0, 1]. Parameters with a
    zero gradient are left untouched, which is what the dense update would do.
    """
    if dataset is None or len(dataset) == 0:
        raise EmptyDataset("no training views")
    if len(dataset) < 2:
        raise EmptyDataset("need at least two training views")
    table = _RayTable(dataset, field.bounds)
    rng = np.random.default_rng(tcfg.seed)
    packed = _pack(field)
    bg = field.background.copy()
    acc = np.zeros_like(packed)
    acc_bg = np.zeros(3)
    lr = tcfg.learning_rate
    flat, flat_acc = packed.reshape(-1), acc.reshape(-1)
    history = []
    t0 = time.perf_counter()
    for step in range(tcfg.steps):
        sel = rng.integers(0, len(table), size=tcfg.rays_per_step)
        b = table.batch(sel, step)
        step_cfg = RenderConfig(rcfg.samples_per_ray, rcfg.jitter, int(hash_words(rcfg.seed, step)))
        color, _, _, (grad, g_bg) = _run(field, b.origins, b.dirs, b.t_near, b.t_far, step_cfg, b.ray_ids,
                                         targets=b.targets, gscale=2.0 / (3 * len(b)),
                                         packed=packed, background=bg)
        loss = float(np.mean((color - b.targets) ** 2))
        g = grad.reshape(-1)
        nz = np.flatnonzero(g)
        gn = g[nz]
        flat_acc[nz] += gn * gn
        vals = flat[nz] - lr * gn / np.sqrt(flat_acc[nz] + 1e-8)
        # column 0 is density, columns 1..3 are color
        is_sigma = nz % 4 == 0
        flat[nz] = np.where(is_sigma, np.maximum(vals, 0.0), np.clip(vals, 0.0, 1.0))
        acc_bg += g_bg * g_bg
        bg = np.clip(bg - lr * g_bg / np.sqrt(acc_bg + 1e-8), 0.0, 1.0)
        history.append(loss)
        if callback is not None:
            callback(step, loss)
        if step % 100 == 0:
            logger.debug("step %d loss %.6f", step, loss)
    nx, ny, nz_ = field.resolution
    out = RadianceField(field.resolution, field.bounds, packed[:, 0].reshape(nz_, ny, nx).copy(),
                        packed[:, 1:].reshape(nz_, ny, nx, 3).copy(), bg)
    return FitResult(out, history, time.perf_counter() - t0)


def smoothed(history, window=100):
    """Means over consecutive non-overlapping windows."""
    h = np.asarray(history, dtype=np.float64)
    n = len(h) // window
    return h[:n * window].reshape(n, window).mean(axis=1)


def default_field(bounds, resolution=(64, 64, 64), sigma=0.1, color=0.5, background=(0.0, 0.0, 0.0),
                  inflate=0.05):
    """Initial field over the scene box inflated by ``inflate``."""
    return RadianceField.constant(resolution, bounds.inflated(inflate), sigma, color, background)


# --------------------------------------------------------------------------
# checkpoint I/O

def save_checkpoint(field, path):
    """Little-endian: magic, u32 version, 3*u32 resolution, 6*f64 bounds,
    3*f64 background, f32 sigma (x fastest), f32 RGB interleaved (x fastest)."""
    nx, ny, nz = field.resolution
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I3I", VERSION, nx, ny, nz))
        fh.write(struct.pack("<6d", *field.bounds.lo, *field.bounds.hi))
        fh.write(struct.pack("<3d", *field.background))
        fh.write(field.sigma.astype("<f4").tobytes(order="C"))
        fh.write(field.color.astype("<f4").tobytes(order="C"))


def load_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise FieldError(f"{path}: not a field checkpoint")
    version, nx, ny, nz = struct.unpack_from("<I3I", data, 4)
    if version != VERSION:
        raise FieldError(f"{path}: unsupported checkpoint version {version}")
    off = 20
    b = struct.unpack_from("<6d", data, off)
    off += 48
    bg = struct.unpack_from("<3d", data, off)
    off += 24
    n = nx * ny * nz
    sigma = np.frombuffer(data, "<f4", n, off).astype(np.float64)
    off += 4 * n
    color = np.frombuffer(data, "<f4", 3 * n, off).astype(np.float64)
    return RadianceField((nx, ny, nz), Box(b[:3], b[3:]), np.maximum(sigma, 0.0), np.clip(color, 0, 1),
                         np.clip(bg, 0, 1))
