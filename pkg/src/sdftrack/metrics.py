"""Tracking metrics: 5deg5cm, oriented-box IoU, and Chamfer distance."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose, quat_to_matrix, rotation_error_deg

IOU_GRID = 64  # cells per axis when sampling the box overlap


@dataclass(frozen=True)
class OrientedBox:
    """A 3D box: full extents along its own axes, posed in the world."""

    pose: Pose
    extents: np.ndarray

    def __post_init__(self):
        e = np.asarray(self.extents, dtype=float).reshape(3)
        if not np.all(np.isfinite(e)) or np.any(e <= 0.0):
            raise ValueError("box extents must be positive")
        object.__setattr__(self, "extents", e)

    @property
    def volume(self) -> float:
        return float(np.prod(self.extents))

    def corners(self) -> np.ndarray:
        signs = np.array(
            [[i, j, k] for i in (-1, 1) for j in (-1, 1) for k in (-1, 1)], dtype=float
        )
        local = 0.5 * signs * self.extents
        return local @ quat_to_matrix(self.pose.quat).T + self.pose.t

    def contains(self, pts: np.ndarray) -> np.ndarray:
        local = (np.asarray(pts, float) - self.pose.t) @ quat_to_matrix(self.pose.quat)
        return np.all(np.abs(local) <= 0.5 * self.extents + 1e-12, axis=-1)


def metric_5deg5cm(est: Pose, gt: Pose, symmetry_axis=None) -> bool:
    """True iff rotation error < 5 degrees and translation error < 5 cm."""
    rot_ok = rotation_error_deg(est.quat, gt.quat, symmetry_axis) < 5.0
    trans_ok = float(np.linalg.norm(est.t - gt.t)) < 0.05
    return bool(rot_ok and trans_ok)


def iou3d(box_a: OrientedBox, box_b: OrientedBox) -> float:
    """Oriented-box IoU from cell-center sampling of the overlap region.

    The intersection volume is estimated on an IOU_GRID^3 lattice spanning the
    overlap of the two axis-aligned corner hulls; the union uses the boxes'
    analytic volumes, which keeps the absolute error well under 0.01.
    """
    lo = np.maximum(box_a.corners().min(axis=0), box_b.corners().min(axis=0))
    hi = np.minimum(box_a.corners().max(axis=0), box_b.corners().max(axis=0))
    if np.any(hi <= lo):
        return 0.0
    axes = [lo[k] + (hi[k] - lo[k]) * (np.arange(IOU_GRID) + 0.5) / IOU_GRID for k in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
    inside = box_a.contains(pts) & box_b.contains(pts)
    inter = float(np.prod(hi - lo)) * float(np.count_nonzero(inside)) / pts.shape[0]
    union = box_a.volume + box_b.volume - inter
    return float(np.clip(inter / union, 0.0, 1.0))


def _points(cloud) -> np.ndarray:
    pts = np.asarray(getattr(cloud, "points", cloud), dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        raise ValueError("chamfer requires non-empty point clouds")
    return pts


def chamfer(a, b) -> float:
    """Bidirectional mean of squared nearest-neighbor distances."""
    pa, pb = _points(a), _points(b)
    da = cKDTree(pb).query(pa)[0]
    db = cKDTree(pa).query(pb)[0]
    return float(np.mean(da * da) + np.mean(db * db))
