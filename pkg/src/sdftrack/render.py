"""Sphere-traced depth rendering and normalized depth crops.

Rays are marched through the blended SDF in the object-normalized frame, where
the field is 1-Lipschitz, so stepping by the current field value never crosses
the surface. All per-ray arithmetic is elementwise, which makes batched
rendering bit-identical to rendering each view alone.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import BehindCameraError
from .geometry import CameraIntrinsics, Pose, _check_unit, project, quat_to_matrix
from .shape import ShapeBasis, ShapeLatent, sdf_eval

NEAR_PLANE = 0.01

# canonical codebook view: a unit-size object at REFERENCE_DISTANCE fills a
# CROP_WIDTH-pixel crop, which for the 64x64 reference camera is the whole
# image, so reference crops resample at exact pixel centers
REFERENCE_INTRINSICS = CameraIntrinsics(
    fx=110.0, fy=110.0, cx=31.5, cy=31.5, width=64, height=64
)
REFERENCE_DISTANCE = 2.5
CROP_WIDTH = 64.0
CROP_RESOLUTION = 64

HIT_TOL = 1e-4
MAX_STEPS = 128


@dataclass(frozen=True)
class DepthImage:
    """Per-pixel depth in meters, row-major; 0 marks invalid pixels."""

    data: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        if d.ndim != 2:
            raise ValueError("depth data must be 2-D")
        if not np.all(np.isfinite(d)) or np.any(d < 0.0):
            raise ValueError("depth values must be finite and non-negative")
        object.__setattr__(self, "data", d)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]


@dataclass(frozen=True)
class RoI:
    """Square region of interest: real-valued pixel center and side length."""

    center: tuple
    side: float

    def __post_init__(self):
        c = (float(self.center[0]), float(self.center[1]))
        if not np.all(np.isfinite(c)):
            raise ValueError("RoI center must be finite")
        if not np.isfinite(self.side) or self.side <= 0.0:
            raise ValueError("RoI side must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "side", float(self.side))


@dataclass(frozen=True)
class NormalizedDepthMap:
    """S x S depth crop remapped to [0, 1]; pixels without valid depth are 0."""

    data: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.data, dtype=float)
        v = np.asarray(self.valid, dtype=bool)
        if d.ndim != 2 or d.shape[0] != d.shape[1] or d.shape != v.shape:
            raise ValueError("normalized map must be square with matching valid mask")
        if np.any(d < 0.0) or np.any(d > 1.0):
            raise ValueError("normalized values must lie in [0, 1]")
        if np.any(d[~v] != 0.0):
            raise ValueError("invalid pixels must be 0")
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "valid", v)

    @property
    def resolution(self) -> int:
        return self.data.shape[0]


def _march(basis, latent, ox, oy, oz, dx, dy, dz, radius, t_min, tol, max_steps):
    # bounding-sphere gate: solve |o + t d|^2 = radius^2 per ray
    a = dx * dx + dy * dy + dz * dz
    b = 2.0 * (ox * dx + oy * dy + oz * dz)
    c = ox * ox + oy * oy + oz * oz - radius * radius
    disc = b * b - 4.0 * a * c
    depth = np.zeros(dx.shape[0])
    idx = np.flatnonzero(disc > 0.0)
    if idx.size == 0:
        return depth
    sq = np.sqrt(disc[idx])
    inv_2a = 0.5 / a[idx]
    t = (-b[idx] - sq) * inv_2a
    t_exit = (-b[idx] + sq) * inv_2a
    np.maximum(t, t_min, out=t)
    keep = t <= t_exit
    idx, t, t_exit = idx[keep], t[keep], t_exit[keep]
    if idx.size == 0:
        return depth
    gdx, gdy, gdz = dx[idx], dy[idx], dz[idx]
    gox, goy, goz = ox[idx], oy[idx], oz[idx]
    # field values are normalized-frame distances; t advances in camera depth
    inv_norm = 1.0 / np.sqrt(gdx * gdx + gdy * gdy + gdz * gdz)
    for _ in range(max_steps):
        pts = np.stack((gox + t * gdx, goy + t * gdy, goz + t * gdz), axis=1)
        phi = sdf_eval(basis, latent, pts)
        hit = phi < tol
        if hit.any():
            depth[idx[hit]] = t[hit]
        t = t + phi * inv_norm
        live = ~hit & (t <= t_exit)
        if not live.all():
            idx, t, t_exit, inv_norm = idx[live], t[live], t_exit[live], inv_norm[live]
            gdx, gdy, gdz = gdx[live], gdy[live], gdz[live]
            gox, goy, goz = gox[live], goy[live], goz[live]
            if idx.size == 0:
                break
    return depth


def _pixel_dirs(intr: CameraIntrinsics):
    dx = (np.arange(intr.width, dtype=float) - intr.cx) / intr.fx
    dy = (np.arange(intr.height, dtype=float) - intr.cy) / intr.fy
    flat_x = np.broadcast_to(dx, (intr.height, intr.width)).ravel()
    flat_y = np.repeat(dy, intr.width)
    return flat_x, flat_y


def render_depth(
    basis: ShapeBasis,
    latent: ShapeLatent,
    pose: Pose,
    size: float,
    intr: CameraIntrinsics,
    *,
    tol: float = HIT_TOL,
    max_steps: int = MAX_STEPS,
) -> DepthImage:
    """Render the posed, scaled shape to a depth image by sphere tracing."""
    if size <= 0.0:
        raise ValueError("size must be positive")
    tx, ty, tz = (float(v) for v in pose.t)
    if tz - 0.5 * size <= NEAR_PLANE:
        raise BehindCameraError("object must sit in front of the near plane")
    R = quat_to_matrix(pose.quat)
    px, py = _pixel_dirs(intr)
    inv_s = 1.0 / size
    # ray direction and origin mapped into the normalized object frame
    ddx = (R[0, 0] * px + R[1, 0] * py + R[2, 0]) * inv_s
    ddy = (R[0, 1] * px + R[1, 1] * py + R[2, 1]) * inv_s
    ddz = (R[0, 2] * px + R[1, 2] * py + R[2, 2]) * inv_s
    n = px.shape[0]
    ox = np.full(n, -(R[0, 0] * tx + R[1, 0] * ty + R[2, 0] * tz) * inv_s)
    oy = np.full(n, -(R[0, 1] * tx + R[1, 1] * ty + R[2, 1] * tz) * inv_s)
    oz = np.full(n, -(R[0, 2] * tx + R[1, 2] * ty + R[2, 2] * tz) * inv_s)
    depth = _march(
        basis, latent, ox, oy, oz, ddx, ddy, ddz,
        basis.bounding_radius, NEAR_PLANE, tol, max_steps,
    )
    return DepthImage(depth.reshape(intr.height, intr.width))


def roi_from_state(
    t: np.ndarray, s: float, intr: CameraIntrinsics, z0: float, w0: float
) -> RoI:
    """Square crop window around the projected center, perspective-scaled."""
    if s <= 0.0 or z0 <= 0.0 or w0 <= 0.0:
        raise ValueError("s, z0 and w0 must be positive")
    t = np.asarray(t, dtype=float).reshape(3)
    center = project(t[None, :], intr)[0]
    side = w0 * s * z0 / t[2]
    return RoI(center=(center[0], center[1]), side=side)


def normalize_depth_roi(
    depth: DepthImage, roi: RoI, z: float, s: float, resolution: int = CROP_RESOLUTION
) -> NormalizedDepthMap:
    """Bilinearly crop the RoI to S x S and remap depth to [0,1] about z."""
    if s <= 0.0:
        raise ValueError("size must be positive")
    S = int(resolution)
    if S <= 0:
        raise ValueError("resolution must be positive")
    data = depth.data
    h, w = data.shape
    step = roi.side / S
    us = roi.center[0] - 0.5 * roi.side + (np.arange(S) + 0.5) * step
    vs = roi.center[1] - 0.5 * roi.side + (np.arange(S) + 0.5) * step
    u0 = np.floor(us)
    v0 = np.floor(vs)
    fu = us - u0
    fv = vs - v0
    u0 = u0.astype(np.int64)
    v0 = v0.astype(np.int64)
    num = np.zeros((S, S))
    den = np.zeros((S, S))
    for vi, wv in ((v0, 1.0 - fv), (v0 + 1, fv)):
        for ui, wu in ((u0, 1.0 - fu), (u0 + 1, fu)):
            weight = wv[:, None] * wu[None, :]
            inb = ((vi >= 0) & (vi < h))[:, None] & ((ui >= 0) & (ui < w))[None, :]
            val = data[np.clip(vi, 0, h - 1)[:, None], np.clip(ui, 0, w - 1)[None, :]]
            ok = inb & (val > 0.0)
            num += weight * np.where(ok, val, 0.0)
            den += weight * ok
    valid = den > 0.999
    vals = np.zeros((S, S))
    np.divide(num, den, out=vals, where=valid)
    norm = np.where(valid, np.clip((vals - z) / s + 0.5, 0.0, 1.0), 0.0)
    return NormalizedDepthMap(data=norm, valid=valid)


def render_normalized(
    basis: ShapeBasis,
    latent: ShapeLatent,
    rotation: np.ndarray,
    z0: float,
    s: float,
    intr: CameraIntrinsics,
    resolution: int = CROP_RESOLUTION,
    w0: float = CROP_WIDTH,
) -> NormalizedDepthMap:
    """Depth-render at T = (0,0,z0), crop, and normalize in one call."""
    pose = Pose(quat=np.asarray(rotation, dtype=float), t=np.array([0.0, 0.0, z0]))
    img = render_depth(basis, latent, pose, s, intr)
    roi = roi_from_state(pose.t, s, intr, z0, w0)
    return normalize_depth_roi(img, roi, z0, s, resolution=resolution)


def render_normalized_batch(
    basis: ShapeBasis,
    latent: ShapeLatent,
    rotations: np.ndarray,
    z0: float,
    s: float,
    intr: CameraIntrinsics,
    resolution: int = CROP_RESOLUTION,
    w0: float = CROP_WIDTH,
) -> list:
    """Batched render_normalized over many rotations; bit-identical per view.

    Memory scales with len(rotations) * intr pixels; callers chunk as needed.
    """
    rotations = np.asarray(rotations, dtype=float)
    if rotations.ndim != 2 or rotations.shape[1] != 4:
        raise ValueError("rotations must be (n, 4)")
    # same unit clean-up a Pose applies, so batched rows match single renders
    rotations = _check_unit(rotations, "rotations")
    nrot = rotations.shape[0]
    if s <= 0.0:
        raise ValueError("size must be positive")
    if z0 - 0.5 * s <= NEAR_PLANE:
        raise BehindCameraError("object must sit in front of the near plane")
    R = quat_to_matrix(rotations)
    px, py = _pixel_dirs(intr)
    inv_s = 1.0 / s
    r00 = R[:, 0, 0, None]
    r10 = R[:, 1, 0, None]
    r20 = R[:, 2, 0, None]
    r01 = R[:, 0, 1, None]
    r11 = R[:, 1, 1, None]
    r21 = R[:, 2, 1, None]
    r02 = R[:, 0, 2, None]
    r12 = R[:, 1, 2, None]
    r22 = R[:, 2, 2, None]
    pxb = px[None, :]
    pyb = py[None, :]
    ddx = ((r00 * pxb + r10 * pyb + r20) * inv_s).ravel()
    ddy = ((r01 * pxb + r11 * pyb + r21) * inv_s).ravel()
    ddz = ((r02 * pxb + r12 * pyb + r22) * inv_s).ravel()
    npix = px.shape[0]
    # T = (0,0,z0): the zero x/y terms vanish exactly, so only R[2,:] remains
    ox = np.repeat(-(R[:, 2, 0] * z0) * inv_s, npix)
    oy = np.repeat(-(R[:, 2, 1] * z0) * inv_s, npix)
    oz = np.repeat(-(R[:, 2, 2] * z0) * inv_s, npix)
    depth = _march(
        basis, latent, ox, oy, oz, ddx, ddy, ddz,
        basis.bounding_radius, NEAR_PLANE, HIT_TOL, MAX_STEPS,
    ).reshape(nrot, intr.height, intr.width)
    t0 = np.array([0.0, 0.0, z0])
    roi = roi_from_state(t0, s, intr, z0, w0)
    return [
        normalize_depth_roi(DepthImage(depth[j]), roi, z0, s, resolution=resolution)
        for j in range(nrot)
    ]


def save_depth_png(path, depth: DepthImage) -> None:
    """Write depth as 16-bit PNG in millimeters (lossless below 65.536 m)."""
    mm = np.round(depth.data * 1000.0)
    if np.any(mm > 65535.0):
        raise ValueError("depth exceeds the 16-bit millimeter range")
    Image.fromarray(mm.astype(np.uint16)).save(str(path), format="PNG")


def load_depth_png(path) -> DepthImage:
    arr = np.asarray(Image.open(str(path)), dtype=np.float64)
    return DepthImage(arr / 1000.0)


def save_depth_raw(path, depth: DepthImage) -> None:
    """Write raw little-endian float32 depth, row-major, no header."""
    Path(path).write_bytes(np.ascontiguousarray(depth.data, dtype="<f4").tobytes())


def load_depth_raw(path, width: int, height: int) -> DepthImage:
    buf = np.frombuffer(Path(path).read_bytes(), dtype="<f4")
    if buf.size != width * height:
        raise ValueError("raw depth byte count does not match width, height")
    return DepthImage(buf.reshape(height, width).astype(np.float64))
