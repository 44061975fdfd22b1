"""Iterative alignment of pose, size, and shape latent to backprojected depth points."""

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import binary_erosion

from .geometry import (
    CAMERA_FRAME,
    OBJECT_FRAME,
    PointCloud,
    Pose,
    quat_from_axis_angle,
    quat_mul,
    quat_to_matrix,
)
from .shape import ShapeBasis, ShapeLatent, primitive_values, sdf_eval, sdf_gradient


@dataclass(frozen=True)
class RefineConfig:
    """Knobs for latent fitting, pose refinement, and their alternation."""

    max_iters: int = 50
    rounds: int = 2
    refine_every: int = 1
    latent_reg: float = 2e-4
    huber_delta: float = 0.02
    use_l1: bool = False
    optimize_size: bool = False
    grad_tol: float = 1e-6
    armijo_c: float = 1e-4
    latent_max_iters: int = 200
    max_points: int = 1024
    min_points: int = 10
    erode_radius: int = 2
    damping: float = 1e-3

    def __post_init__(self):
        if self.max_iters < 1 or self.latent_max_iters < 1:
            raise ValueError("iteration caps must be at least 1")
        if self.rounds < 1:
            raise ValueError("rounds must be at least 1")
        if self.refine_every < 1:
            raise ValueError("refine_every must be at least 1")
        if self.latent_reg < 0.0 or self.huber_delta <= 0.0 or self.damping <= 0.0:
            raise ValueError("latent_reg, huber_delta, damping must be positive")
        if not 0.0 < self.armijo_c < 1.0:
            raise ValueError("armijo_c must lie in (0, 1)")
        if self.grad_tol <= 0.0:
            raise ValueError("grad_tol must be positive")
        if self.min_points < 1 or self.max_points < self.min_points:
            raise ValueError("need max_points >= min_points >= 1")
        if self.erode_radius < 0:
            raise ValueError("erode_radius must be non-negative")


@dataclass(frozen=True)
class RefinePoseResult:
    pose: Pose
    size: float
    objective: float
    iterations: int


@dataclass(frozen=True)
class RefineResult:
    pose: Pose
    size: float
    latent: ShapeLatent
    objective: float
    reverted: bool
    trace: tuple = field(default=())


def huber(r: np.ndarray, delta: float) -> np.ndarray:
    """Quadratic inside |r| <= delta, linear outside."""
    r = np.asarray(r, dtype=float)
    a = np.abs(r)
    return np.where(a <= delta, 0.5 * r * r, delta * (a - 0.5 * delta))


def _loss(r, cfg: RefineConfig):
    if cfg.use_l1:
        return np.abs(r)
    return huber(r, cfg.huber_delta)


def _loss_deriv(r, cfg: RefineConfig):
    if cfg.use_l1:
        return np.sign(r)
    return np.clip(r, -cfg.huber_delta, cfg.huber_delta)


def _irls_weights(r, cfg: RefineConfig):
    # weight w(r) = loss'(r) / r, so J^T W r reproduces the true gradient
    a = np.abs(r)
    if cfg.use_l1:
        return 1.0 / np.maximum(a, 1e-6)
    return np.where(a <= cfg.huber_delta, 1.0, cfg.huber_delta / np.maximum(a, 1e-12))


def _object_points(points) -> np.ndarray:
    if isinstance(points, PointCloud):
        if points.frame != OBJECT_FRAME:
            raise ValueError("latent fitting expects object-normalized points")
        return points.points
    return np.asarray(points, dtype=float).reshape(-1, 3)


def latent_objective(basis: ShapeBasis, latent: ShapeLatent, points, cfg: RefineConfig | None = None) -> float:
    """Robust SDF misfit plus the squared-norm tie-breaker on the raw latent."""
    cfg = cfg or RefineConfig()
    pts = _object_points(points)
    sdf = sdf_eval(basis, latent, pts)
    return float(np.sum(_loss(sdf, cfg)) + cfg.latent_reg * latent.raw @ latent.raw)


def latent_gradient(basis: ShapeBasis, latent: ShapeLatent, points, cfg: RefineConfig | None = None) -> np.ndarray:
    """Gradient of latent_objective in the raw coordinates."""
    cfg = cfg or RefineConfig()
    pts = _object_points(points)
    phi = primitive_values(basis, pts)
    w = latent.weights
    sdf = w @ phi
    d = _loss_deriv(sdf, cfg)
    # d sdf / d raw_k = w_k (phi_k - sdf)
    return w * ((phi - sdf) @ d) + 2.0 * cfg.latent_reg * latent.raw


def fit_latent(basis: ShapeBasis, points, latent0: ShapeLatent | None = None, cfg: RefineConfig | None = None) -> ShapeLatent:
    """Fit blend weights to object-normalized points by descent with backtracking."""
    cfg = cfg or RefineConfig()
    pts = _object_points(points)
    if pts.shape[0] < cfg.min_points:
        raise ValueError(f"need at least {cfg.min_points} points, got {pts.shape[0]}")
    raw = np.zeros(len(basis)) if latent0 is None else latent0.raw.copy()
    if raw.size != len(basis):
        raise ValueError("latent length does not match basis")
    f = latent_objective(basis, ShapeLatent(raw), pts, cfg)
    step = 1.0
    for _ in range(cfg.latent_max_iters):
        g = latent_gradient(basis, ShapeLatent(raw), pts, cfg)
        if np.max(np.abs(g)) <= cfg.grad_tol:
            break
        gg = g @ g
        t = step
        accepted = False
        for _ in range(40):
            cand = raw - t * g
            fc = latent_objective(basis, ShapeLatent(cand), pts, cfg)
            if fc <= f - cfg.armijo_c * t * gg:
                raw, f = cand, fc
                step = 2.0 * t
                accepted = True
                break
            t *= 0.5
        if not accepted:
            break
    return ShapeLatent(raw)


def pose_residuals(basis: ShapeBasis, latent: ShapeLatent, cloud: PointCloud, pose: Pose, size: float):
    """Metric residuals r = size * sdf and their (n, 7) Jacobian.

    Columns: translation xyz, left-multiplied rotation vector xyz, size.
    """
    if cloud.frame != CAMERA_FRAME:
        raise ValueError("pose refinement expects camera-frame points")
    if size <= 0.0:
        raise ValueError("size must be positive")
    pts = cloud.points
    R = quat_to_matrix(pose.quat)
    u = pts - pose.t
    x = (u @ R) / size
    phi = sdf_eval(basis, latent, x)
    grad = sdf_gradient(basis, latent, x)
    r = size * phi
    rot_grad = grad @ R.T
    J = np.empty((pts.shape[0], 7))
    J[:, :3] = -rot_grad
    J[:, 3:6] = np.cross(rot_grad, u)
    J[:, 6] = phi - np.einsum("ij,ij->i", grad, x)
    return r, J


def pose_objective(basis: ShapeBasis, latent: ShapeLatent, cloud: PointCloud, pose: Pose, size: float, cfg: RefineConfig | None = None) -> float:
    """Robust sum of metric SDF residuals at camera-frame points."""
    cfg = cfg or RefineConfig()
    if cloud.frame != CAMERA_FRAME:
        raise ValueError("pose refinement expects camera-frame points")
    if size <= 0.0:
        raise ValueError("size must be positive")
    R = quat_to_matrix(pose.quat)
    x = ((cloud.points - pose.t) @ R) / size
    return float(np.sum(_loss(size * sdf_eval(basis, latent, x), cfg)))


def _apply_step(q, t, s, delta, optimize_size):
    t2 = t + delta[:3]
    w = delta[3:6]
    angle = float(np.linalg.norm(w))
    if angle > 0.0:
        q2 = quat_mul(quat_from_axis_angle(w / angle, angle), q)
    else:
        q2 = q
    s2 = max(s + delta[6], 1e-3) if optimize_size else s
    return q2, t2, s2


def refine_pose(basis: ShapeBasis, latent: ShapeLatent, cloud: PointCloud, pose0: Pose, size0: float, cfg: RefineConfig | None = None) -> RefinePoseResult:
    """Damped Gauss-Newton alignment of pose (and optionally size) to the points."""
    cfg = cfg or RefineConfig()
    if len(cloud) < cfg.min_points:
        raise ValueError(f"need at least {cfg.min_points} points, got {len(cloud)}")
    q = pose0.quat.copy()
    t = pose0.t.copy()
    s = float(size0)
    f = pose_objective(basis, latent, cloud, Pose(q, t), s, cfg)
    lam = cfg.damping
    ncols = 7 if cfg.optimize_size else 6
    iters = 0
    for _ in range(cfg.max_iters):
        iters += 1
        r, J = pose_residuals(basis, latent, cloud, Pose(q, t), s)
        w = _irls_weights(r, cfg)
        Jc = J[:, :ncols]
        A = Jc.T @ (Jc * w[:, None])
        b = Jc.T @ (w * r)
        if np.max(np.abs(b)) <= cfg.grad_tol:
            break
        diag = np.diag(np.maximum(np.diag(A), 1e-12))
        moved = False
        for _ in range(12):
            try:
                step = np.linalg.solve(A + lam * diag, -b)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            delta = np.zeros(7)
            delta[:ncols] = step
            q2, t2, s2 = _apply_step(q, t, s, delta, cfg.optimize_size)
            f2 = pose_objective(basis, latent, cloud, Pose(q2, t2), s2, cfg)
            if f2 < f:
                q, t, s, f = q2, t2, s2, f2
                lam = max(lam / 3.0, 1e-9)
                moved = True
                break
            lam *= 10.0
            if lam > 1e10:
                break
        if not moved:
            break
    return RefinePoseResult(Pose(q, t), s, f, iters)


def alternate(basis: ShapeBasis, latent0: ShapeLatent, cloud: PointCloud, pose0: Pose, size0: float, cfg: RefineConfig | None = None) -> RefineResult:
    """Alternate latent fitting and pose refinement, keeping the best round.

    The input state is the baseline; a round that raises the robust pose
    objective is never returned (the best state wins and `reverted` flags it).
    """
    from .geometry import normalize_points

    cfg = cfg or RefineConfig()
    best_obj = pose_objective(basis, latent0, cloud, pose0, size0, cfg)
    best = (pose0, float(size0), latent0)
    pose, size, latent = pose0, float(size0), latent0
    trace = []
    reverted = False
    for _ in range(cfg.rounds):
        obj_pts = normalize_points(cloud, pose, size)
        latent = fit_latent(basis, obj_pts, latent, cfg)
        res = refine_pose(basis, latent, cloud, pose, size, cfg)
        pose, size = res.pose, res.size
        trace.append(res.objective)
        if res.objective <= best_obj:
            best_obj = res.objective
            best = (pose, size, latent)
        else:
            reverted = True
    pose, size, latent = best
    return RefineResult(pose, size, latent, best_obj, reverted, tuple(trace))


def erode_mask(mask: np.ndarray, radius: int = 2) -> np.ndarray:
    """Shrink a boolean mask by a square structuring element of side 2*radius + 1."""
    mask = np.asarray(mask, dtype=bool)
    if radius < 0:
        raise ValueError("radius must be non-negative")
    if radius == 0:
        return mask.copy()
    fps = np.ones((2 * radius + 1, 2 * radius + 1), dtype=bool)
    return binary_erosion(mask, structure=fps, border_value=0)


def extract_points(depth, mask: np.ndarray, intr, cfg: RefineConfig | None = None, seed=0) -> PointCloud:
    """Eroded-mask backprojection, subsampled to the configured point budget."""
    from .geometry import backproject
    from .render import DepthImage

    cfg = cfg or RefineConfig()
    data = depth.data if isinstance(depth, DepthImage) else np.asarray(depth, dtype=float)
    m = erode_mask(mask, cfg.erode_radius)
    cloud = backproject(data, m, intr)
    if len(cloud) > cfg.max_points:
        rng = np.random.default_rng(seed)
        idx = rng.choice(len(cloud), cfg.max_points, replace=False)
        idx.sort()
        cloud = PointCloud(cloud.points[idx], frame=CAMERA_FRAME)
    return cloud
