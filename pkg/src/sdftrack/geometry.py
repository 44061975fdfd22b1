"""Poses, camera models, the discretized rotation grid, and frame changes.

Quaternions are scalar-last [x, y, z, w], unit norm, Hamilton convention:
quat_to_matrix(quat_mul(a, b)) == quat_to_matrix(a) @ quat_to_matrix(b).
Grid rotations compose as R = Rz(in_plane) @ Ry(elevation) @ Rz(azimuth).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BehindCameraError

UNIT_TOL = 1e-6

CAMERA_FRAME = "camera"
OBJECT_FRAME = "object-normalized"


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product of scalar-last quaternions (broadcasts over leading dims)."""
    ax, ay, az, aw = np.moveaxis(np.asarray(a, dtype=float), -1, 0)
    bx, by, bz, bw = np.moveaxis(np.asarray(b, dtype=float), -1, 0)
    return np.stack(
        [
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
            aw * bw - ax * bx - ay * by - az * bz,
        ],
        axis=-1,
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return q * np.array([-1.0, -1.0, -1.0, 1.0])


def quat_from_axis_angle(axis: np.ndarray, angle_rad: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("rotation axis must be nonzero")
    half = 0.5 * float(angle_rad)
    return np.concatenate([np.sin(half) * axis / n, [np.cos(half)]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for one quaternion or a batch (…, 4) -> (…, 3, 3)."""
    q = np.asarray(q, dtype=float)
    x, y, z, w = np.moveaxis(q, -1, 0)
    xx, yy, zz = x * x, y * y, z * z
    xy, xz, yz = x * y, x * z, y * z
    wx, wy, wz = w * x, w * y, w * z
    m = np.empty(q.shape[:-1] + (3, 3))
    m[..., 0, 0] = 1.0 - 2.0 * (yy + zz)
    m[..., 0, 1] = 2.0 * (xy - wz)
    m[..., 0, 2] = 2.0 * (xz + wy)
    m[..., 1, 0] = 2.0 * (xy + wz)
    m[..., 1, 1] = 1.0 - 2.0 * (xx + zz)
    m[..., 1, 2] = 2.0 * (yz - wx)
    m[..., 2, 0] = 2.0 * (xz - wy)
    m[..., 2, 1] = 2.0 * (yz + wx)
    m[..., 2, 2] = 1.0 - 2.0 * (xx + yy)
    return m


def quat_rotate(q: np.ndarray, points: np.ndarray) -> np.ndarray:
    """Rotate points (…, 3) by a single quaternion."""
    q = np.asarray(q, dtype=float)
    v, w = q[:3], q[3]
    p = np.asarray(points, dtype=float)
    c = np.cross(v, p)
    return p + 2.0 * (w * c + np.cross(v, c))


def quat_angle_deg(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Geodesic angle between rotations, in degrees (broadcasts)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = np.clip(np.abs(np.sum(a * b, axis=-1)), 0.0, 1.0)
    return np.degrees(2.0 * np.arccos(dot))


def quat_slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Spherical interpolation along the shorter arc."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    dot = float(np.dot(a, b))
    if dot < 0.0:
        b, dot = -b, -dot
    if dot > 1.0 - 1e-12:
        out = a + t * (b - a)
        return out / np.linalg.norm(out)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    return (np.sin((1.0 - t) * theta) * a + np.sin(t * theta) * b) / np.sin(theta)


def canonical_quat(q: np.ndarray) -> np.ndarray:
    """Fix the double cover: scalar part nonnegative, first nonzero positive at w == 0."""
    q = np.array(q, dtype=float, copy=True)
    flat = q.reshape(-1, 4)
    s = np.sign(flat[:, 3])
    for k in (2, 1, 0):
        s = np.where(s == 0.0, np.sign(flat[:, k]), s)
    s = np.where(s == 0.0, 1.0, s)
    flat *= s[:, None]
    return flat.reshape(q.shape)


def _check_unit(q: np.ndarray, name: str) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q, axis=-1)
    if np.any(np.abs(n - 1.0) > UNIT_TOL):
        raise ValueError(f"{name} is not a unit quaternion (|norm-1| > {UNIT_TOL})")
    return q / n[..., None]


@dataclass(frozen=True)
class Pose:
    """Rigid transform: apply(p) = R(quat) @ p + t."""

    quat: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "quat", _check_unit(self.quat, "quat"))
        t = np.asarray(self.t, dtype=float).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        object.__setattr__(self, "t", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([0.0, 0.0, 0.0, 1.0]), np.zeros(3))

    def compose(self, other: "Pose") -> "Pose":
        return Pose(quat_mul(self.quat, other.quat), quat_rotate(self.quat, other.t) + self.t)

    def inverse(self) -> "Pose":
        qi = quat_conj(self.quat)
        return Pose(qi, -quat_rotate(qi, self.t))

    def apply(self, points: np.ndarray) -> np.ndarray:
        return quat_rotate(self.quat, points) + self.t

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.quat)
        m[:3, 3] = self.t
        return m


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def to_dict(self) -> dict:
        return {
            "fx": self.fx,
            "fy": self.fy,
            "cx": self.cx,
            "cy": self.cy,
            "width": self.width,
            "height": self.height,
        }

    @staticmethod
    def from_dict(d: dict) -> "CameraIntrinsics":
        return CameraIntrinsics(
            float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]),
            int(d["width"]), int(d["height"]),
        )


@dataclass(frozen=True)
class PointCloud:
    """Points (n, 3) tagged with the frame they live in."""

    points: np.ndarray
    frame: str = CAMERA_FRAME

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud must be finite")
        if self.frame not in (CAMERA_FRAME, OBJECT_FRAME):
            raise ValueError(f"unknown frame {self.frame!r}")
        object.__setattr__(self, "points", p)

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass(frozen=True)
class RotationGrid:
    """Euler grid over azimuth x elevation x in-plane, azimuth-major ordering."""

    step_deg: float
    quats: np.ndarray = field(repr=False)
    n_az: int
    n_el: int
    n_ip: int

    def __len__(self) -> int:
        return self.quats.shape[0]

    def index_to_angles(self, index: np.ndarray) -> np.ndarray:
        """Bin index -> (azimuth, elevation, in-plane) in degrees."""
        index = np.asarray(index)
        if np.any((index < 0) | (index >= len(self))):
            raise IndexError("grid index out of range")
        i_az, rem = np.divmod(index, self.n_el * self.n_ip)
        i_el, i_ip = np.divmod(rem, self.n_ip)
        return np.stack(
            [i_az * self.step_deg, -90.0 + i_el * self.step_deg, i_ip * self.step_deg],
            axis=-1,
        )

    def angles_to_index(self, angles_deg: np.ndarray) -> np.ndarray:
        """(azimuth, elevation, in-plane) in degrees -> bin index; angles must sit on the grid."""
        a = np.asarray(angles_deg, dtype=float)
        az = np.mod(a[..., 0], 360.0)
        el = a[..., 1]
        ip = np.mod(a[..., 2], 360.0)
        idx = np.stack([az / self.step_deg, (el + 90.0) / self.step_deg, ip / self.step_deg], axis=-1)
        rounded = np.rint(idx)
        if np.any(np.abs(idx - rounded) > 1e-9) or np.any(el < -90.0) or np.any(el > 90.0):
            raise ValueError("angles do not lie on the rotation grid")
        i_az, i_el, i_ip = np.moveaxis(rounded.astype(np.int64), -1, 0)
        return (i_az * self.n_el + i_el) * self.n_ip + i_ip


def build_rotation_grid(step_deg: float) -> RotationGrid:
    """Enumerate the discretized rotation set at multiples of step_deg."""
    if step_deg <= 0 or abs(360.0 / step_deg - round(360.0 / step_deg)) > 1e-9 \
            or abs(180.0 / step_deg - round(180.0 / step_deg)) > 1e-9:
        raise ValueError("step must divide both 360 and 180 degrees")
    n_az = int(round(360.0 / step_deg))
    n_el = int(round(180.0 / step_deg)) + 1
    n_ip = n_az
    az = np.arange(n_az) * step_deg
    el = -90.0 + np.arange(n_el) * step_deg
    ip = np.arange(n_ip) * step_deg
    # azimuth-major ordering: index = (i_az * n_el + i_el) * n_ip + i_ip
    azg, elg, ipg = np.meshgrid(az, el, ip, indexing="ij")
    half_az = np.radians(azg.ravel()) * 0.5
    half_el = np.radians(elg.ravel()) * 0.5
    half_ip = np.radians(ipg.ravel()) * 0.5
    zeros = np.zeros_like(half_az)
    q_az = np.stack([zeros, zeros, np.sin(half_az), np.cos(half_az)], axis=-1)
    q_el = np.stack([zeros, np.sin(half_el), zeros, np.cos(half_el)], axis=-1)
    q_ip = np.stack([zeros, zeros, np.sin(half_ip), np.cos(half_ip)], axis=-1)
    quats = canonical_quat(quat_mul(q_ip, quat_mul(q_el, q_az)))
    quats.setflags(write=False)
    return RotationGrid(step_deg=float(step_deg), quats=quats, n_az=n_az, n_el=n_el, n_ip=n_ip)


def project(points: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Pinhole projection of camera-frame points (…, 3) to pixel coordinates (…, 2)."""
    p = np.asarray(points, dtype=float)
    z = p[..., 2]
    if np.any(z <= 0.0):
        raise BehindCameraError("cannot project points with z <= 0")
    return np.stack(
        [intr.fx * p[..., 0] / z + intr.cx, intr.fy * p[..., 1] / z + intr.cy],
        axis=-1,
    )


def backproject(depth: np.ndarray, mask: np.ndarray, intr: CameraIntrinsics) -> PointCloud:
    """Lift masked, valid depth pixels into a camera-frame cloud (row-major pixel order)."""
    depth = np.asarray(depth, dtype=float)
    if depth.shape != (intr.height, intr.width):
        raise ValueError("depth shape does not match intrinsics")
    valid = np.asarray(mask, dtype=bool) & (depth > 0.0)
    v, u = np.nonzero(valid)
    z = depth[v, u]
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return PointCloud(np.stack([x, y, z], axis=-1), frame=CAMERA_FRAME)


def normalize_points(cloud: PointCloud, pose: Pose, size: float) -> PointCloud:
    """Camera-frame cloud -> object-normalized frame: R^-1 (p - T) / size."""
    if cloud.frame != CAMERA_FRAME:
        raise ValueError("normalize_points expects a camera-frame cloud")
    if size <= 0.0:
        raise ValueError("size must be positive")
    qi = quat_conj(pose.quat)
    pts = quat_rotate(qi, cloud.points - pose.t) / size
    return PointCloud(pts, frame=OBJECT_FRAME)


def denormalize_points(cloud: PointCloud, pose: Pose, size: float) -> PointCloud:
    """Inverse of normalize_points."""
    if cloud.frame != OBJECT_FRAME:
        raise ValueError("denormalize_points expects an object-normalized cloud")
    if size <= 0.0:
        raise ValueError("size must be positive")
    pts = quat_rotate(pose.quat, cloud.points * size) + pose.t
    return PointCloud(pts, frame=CAMERA_FRAME)


def rotation_error_deg(qa: np.ndarray, qb: np.ndarray, symmetry_axis: np.ndarray | None = None) -> float:
    """Geodesic rotation error in degrees, optionally modulo spins about an object-frame axis."""
    qa = _check_unit(qa, "qa")
    qb = _check_unit(qb, "qb")
    if symmetry_axis is None:
        return float(quat_angle_deg(qa, qb))
    axis = np.asarray(symmetry_axis, dtype=float)
    n = np.linalg.norm(axis)
    if n == 0.0:
        raise ValueError("symmetry axis must be nonzero")
    axis = axis / n
    # min over spin angle of |Ra . Rot(axis, spin) vs Rb| has the closed form below
    rel = quat_mul(quat_conj(qa), qb)
    reach = np.sqrt(rel[3] ** 2 + float(np.dot(axis, rel[:3])) ** 2)
    return float(np.degrees(2.0 * np.arccos(np.clip(reach, 0.0, 1.0))))
