"""Blended analytic SDF shape family: primitives, latents, surface extraction.

Every primitive is an exact signed distance field, scale-normalized so its
axis-aligned bounding box has diagonal 1. A shape latent is a raw vector whose
softmax blends the primitive fields; the blend of exact SDFs is 1-Lipschitz,
which keeps sphere tracing safe.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import SurfaceExtractionError
from .geometry import OBJECT_FRAME, PointCloud

SPHERE_RADIUS = 1.0 / (2.0 * np.sqrt(3.0))  # unit-diagonal sphere

_AXIS_PERM = {"x": (1, 0, 2), "y": (0, 1, 2), "z": (0, 2, 1)}

# gradient convention at degenerate loci (sphere center, capsule axis)
_DEGENERATE_GRAD = np.array([0.0, 0.0, 1.0])


def _sign(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0.0, 1.0, -1.0)


@dataclass(frozen=True)
class Primitive:
    """One normalized analytic SDF primitive; params are kind-specific."""

    kind: str
    params: tuple
    offset: np.ndarray
    axis: str = "y"

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float).reshape(3))
        if self.axis not in _AXIS_PERM:
            raise ValueError(f"unknown axis {self.axis!r}")

    def _local(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float) - self.offset
        perm = _AXIS_PERM[self.axis]
        if perm != (0, 1, 2):
            p = p[..., perm]
        return p

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = self._local(points)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        if self.kind == "sphere":
            (r,) = self.params
            return np.sqrt(x * x + y * y + z * z) - r
        if self.kind == "box":
            return _box_sdf(x, y, z, *self.params)
        if self.kind == "rounded_box":
            bx, by, bz, rho = self.params
            return _box_sdf(x, y, z, bx, by, bz) - rho
        if self.kind == "cylinder":
            r, h = self.params
            qr = np.sqrt(x * x + z * z) - r
            qy = np.abs(y) - h
            ar = np.maximum(qr, 0.0)
            ay = np.maximum(qy, 0.0)
            return np.sqrt(ar * ar + ay * ay) + np.minimum(np.maximum(qr, qy), 0.0)
        if self.kind == "capsule":
            r, h = self.params
            dy = y - np.clip(y, -h, h)
            return np.sqrt(x * x + dy * dy + z * z) - r
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def gradient(self, points: np.ndarray) -> np.ndarray:
        p = self._local(points)
        x, y, z = p[..., 0], p[..., 1], p[..., 2]
        if self.kind == "sphere":
            g = _radial_grad(p)
        elif self.kind == "box":
            g = _box_grad(x, y, z, *self.params)
        elif self.kind == "rounded_box":
            bx, by, bz, _rho = self.params
            g = _box_grad(x, y, z, bx, by, bz)
        elif self.kind == "cylinder":
            g = _cylinder_grad(x, y, z, *self.params)
        elif self.kind == "capsule":
            r, h = self.params
            d = np.stack([x, y - np.clip(y, -h, h), z], axis=-1)
            g = _radial_grad(d)
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        perm = _AXIS_PERM[self.axis]
        if perm != (0, 1, 2):
            g = g[..., perm]
        return g

    def half_extents(self) -> np.ndarray:
        """Bounding-box half extents in the primitive's own frame (offset excluded)."""
        if self.kind == "sphere":
            (r,) = self.params
            e = (r, r, r)
        elif self.kind == "box":
            e = self.params
        elif self.kind == "rounded_box":
            bx, by, bz, rho = self.params
            e = (bx + rho, by + rho, bz + rho)
        elif self.kind == "cylinder":
            r, h = self.params
            e = (r, h, r)
        elif self.kind == "capsule":
            r, h = self.params
            e = (r, h + r, r)
        else:
            raise ValueError(f"unknown primitive kind {self.kind!r}")
        perm = _AXIS_PERM[self.axis]
        return np.asarray(e, dtype=float)[list(perm)]

    def bounding_radius(self) -> float:
        """Radius about the origin that contains the offset primitive."""
        return float(np.linalg.norm(np.abs(self.offset) + self.half_extents()))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "params": list(self.params),
            "offset": self.offset.tolist(),
            "axis": self.axis,
        }


def _box_sdf(x, y, z, bx, by, bz):
    qx = np.abs(x) - bx
    qy = np.abs(y) - by
    qz = np.abs(z) - bz
    ax = np.maximum(qx, 0.0)
    ay = np.maximum(qy, 0.0)
    az = np.maximum(qz, 0.0)
    outside = np.sqrt(ax * ax + ay * ay + az * az)
    inside = np.minimum(np.maximum(qx, np.maximum(qy, qz)), 0.0)
    return outside + inside


def _radial_grad(d: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(d, axis=-1, keepdims=True)
    g = np.divide(d, n, out=np.zeros_like(d), where=n > 0.0)
    return np.where(n > 0.0, g, _DEGENERATE_GRAD)


def _box_grad(x, y, z, bx, by, bz):
    q = np.stack([np.abs(x) - bx, np.abs(y) - by, np.abs(z) - bz], axis=-1)
    a = np.maximum(q, 0.0)
    outside = np.linalg.norm(a, axis=-1, keepdims=True)
    signs = np.stack([_sign(x), _sign(y), _sign(z)], axis=-1)
    g_out = np.divide(a, outside, out=np.zeros_like(a), where=outside > 0.0) * signs
    face = np.argmax(q, axis=-1)
    g_in = np.eye(3)[face] * signs
    return np.where(outside > 0.0, g_out, g_in)


def _cylinder_grad(x, y, z, r, h):
    rho = np.sqrt(x * x + z * z)
    qr = rho - r
    qy = np.abs(y) - h
    safe = np.where(rho > 0.0, rho, 1.0)
    rd = np.stack([x / safe, np.zeros_like(y), z / safe], axis=-1)
    rd = np.where(rho[..., None] > 0.0, rd, np.array([1.0, 0.0, 0.0]))
    yd = np.stack([np.zeros_like(y), _sign(y), np.zeros_like(y)], axis=-1)
    ar = np.maximum(qr, 0.0)
    ay = np.maximum(qy, 0.0)
    outside = np.sqrt(ar * ar + ay * ay)
    g_out = (ar[..., None] * rd + ay[..., None] * yd) / np.where(outside > 0.0, outside, 1.0)[..., None]
    g_in = np.where((qr > qy)[..., None], rd, yd)
    return np.where((outside > 0.0)[..., None], g_out, g_in)


def make_primitive(kind: str, *, offset=(0.0, 0.0, 0.0), axis: str = "y", **raw) -> Primitive:
    """Build a primitive from raw aspect parameters, normalized to unit bbox diagonal."""
    if kind == "sphere":
        params = (SPHERE_RADIUS,)
    elif kind == "box":
        b = np.asarray(raw["half_extents"], dtype=float)
        if np.any(b <= 0):
            raise ValueError("box half extents must be positive")
        params = tuple(b / (2.0 * np.linalg.norm(b)))
    elif kind == "rounded_box":
        b = np.asarray(raw["half_extents"], dtype=float)
        rho = float(raw["rounding"])
        if np.any(b <= 0) or rho <= 0:
            raise ValueError("rounded box parameters must be positive")
        scale = 1.0 / (2.0 * np.linalg.norm(b + rho))
        params = tuple(b * scale) + (rho * scale,)
    elif kind == "cylinder":
        r, h = float(raw["radius"]), float(raw["half_height"])
        if r <= 0 or h <= 0:
            raise ValueError("cylinder parameters must be positive")
        scale = 1.0 / (2.0 * np.sqrt(2.0 * r * r + h * h))
        params = (r * scale, h * scale)
    elif kind == "capsule":
        r, h = float(raw["radius"]), float(raw["half_height"])
        if r <= 0 or h <= 0:
            raise ValueError("capsule parameters must be positive")
        scale = 1.0 / (2.0 * np.sqrt(2.0 * r * r + (h + r) ** 2))
        params = (r * scale, h * scale)
    else:
        raise ValueError(f"unknown primitive kind {kind!r}")
    return Primitive(kind=kind, params=params, offset=np.asarray(offset, dtype=float), axis=axis)


@dataclass(frozen=True)
class ShapeBasis:
    """Ordered primitive set for one category."""

    category: str
    primitives: tuple
    symmetry_axis: np.ndarray | None = None

    def __post_init__(self):
        if len(self.primitives) < 2:
            raise ValueError("a basis needs at least two primitives")
        if self.symmetry_axis is not None:
            ax = np.asarray(self.symmetry_axis, dtype=float).reshape(3)
            n = np.linalg.norm(ax)
            if n == 0:
                raise ValueError("symmetry axis must be nonzero")
            object.__setattr__(self, "symmetry_axis", ax / n)
        object.__setattr__(self, "primitives", tuple(self.primitives))

    def __len__(self) -> int:
        return len(self.primitives)

    @property
    def bounding_radius(self) -> float:
        return max(p.bounding_radius() for p in self.primitives)


@dataclass(frozen=True)
class ShapeLatent:
    """Raw latent vector; softmax(raw) are the blend weights."""

    raw: np.ndarray
    weights: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=float).reshape(-1)
        if raw.size < 2 or not np.all(np.isfinite(raw)):
            raise ValueError("latent must be a finite vector with at least two entries")
        object.__setattr__(self, "raw", raw)
        e = np.exp(raw - np.max(raw))
        object.__setattr__(self, "weights", e / np.sum(e))


def canonical_latent(basis: ShapeBasis) -> ShapeLatent:
    """Reference latent: one-hot raw scaled by 10 on primitive 0."""
    raw = np.zeros(len(basis))
    raw[0] = 10.0
    return ShapeLatent(raw)


def primitive_values(basis: ShapeBasis, points: np.ndarray) -> np.ndarray:
    """Per-primitive SDF matrix, shape (B, n)."""
    pts = np.asarray(points, dtype=float)
    return np.stack([p.sdf(pts) for p in basis.primitives], axis=0)


def sdf_eval(basis: ShapeBasis, latent: ShapeLatent, points: np.ndarray) -> np.ndarray:
    """Blended signed distance at object-normalized points (…, 3)."""
    pts = np.asarray(points, dtype=float)
    w = latent.weights
    if w.size != len(basis):
        raise ValueError("latent length does not match basis")
    out = w[0] * basis.primitives[0].sdf(pts)
    for wb, prim in zip(w[1:], basis.primitives[1:]):
        out = out + wb * prim.sdf(pts)
    return out


def sdf_gradient(basis: ShapeBasis, latent: ShapeLatent, points: np.ndarray) -> np.ndarray:
    """Spatial gradient of the blended field at (…, 3) points."""
    pts = np.asarray(points, dtype=float)
    w = latent.weights
    if w.size != len(basis):
        raise ValueError("latent length does not match basis")
    out = w[0] * basis.primitives[0].gradient(pts)
    for wb, prim in zip(w[1:], basis.primitives[1:]):
        out = out + wb * prim.gradient(pts)
    return out


def decode_surface(basis: ShapeBasis, latent: ShapeLatent, n: int, seed: int = 0) -> PointCloud:
    """Sample n points on the blend's zero set by sphere tracing plus Newton projection."""
    if n <= 0:
        raise ValueError("n must be positive")
    rng = np.random.default_rng(seed)
    radius = basis.bounding_radius * 1.05
    collected = []
    total = 0
    for _ in range(60):
        m = max(4 * n, 256)
        u = rng.normal(size=(m, 3))
        u /= np.linalg.norm(u, axis=1, keepdims=True)
        targets = rng.uniform(-1.0, 1.0, size=(m, 3)) * (0.3 * radius)
        origins = radius * u
        dirs = targets - origins
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        hits = _trace_batch(basis, latent, origins, dirs, radius)
        if hits.size:
            hits = _newton_project(basis, latent, hits)
        if hits.size:
            collected.append(hits)
            total += hits.shape[0]
        if total >= n:
            break
    if total < n:
        raise SurfaceExtractionError(f"collected {total}/{n} surface points")
    pts = np.concatenate(collected, axis=0)[:n]
    return PointCloud(pts, frame=OBJECT_FRAME)


def _trace_batch(basis, latent, origins, dirs, radius, tol=1e-5, max_steps=96):
    t = np.zeros(origins.shape[0])
    alive = np.ones(origins.shape[0], dtype=bool)
    hit = np.zeros(origins.shape[0], dtype=bool)
    t_max = 2.2 * radius
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * dirs[idx]
        f = sdf_eval(basis, latent, p)
        now_hit = f < tol
        hit[idx[now_hit]] = True
        alive[idx[now_hit]] = False
        t[idx] += np.maximum(f, 0.0)
        dead = t[idx] > t_max
        alive[idx[dead]] = False
    p_hit = origins[hit] + t[hit, None] * dirs[hit]
    return p_hit


def _newton_project(basis, latent, points, tol=1e-6, iters=8):
    p = np.array(points, copy=True)
    for _ in range(iters):
        f = sdf_eval(basis, latent, p)
        if np.all(np.abs(f) < tol):
            break
        g = sdf_gradient(basis, latent, p)
        denom = np.maximum(np.sum(g * g, axis=-1), 1e-12)
        p -= (f / denom)[:, None] * g
    f = sdf_eval(basis, latent, p)
    return p[np.abs(f) < 1e-5]


def basis_from_config(category: str, cfg: dict) -> ShapeBasis:
    prims = []
    for spec in cfg["primitives"]:
        spec = dict(spec)
        kind = spec.pop("kind")
        offset = spec.pop("offset", (0.0, 0.0, 0.0))
        axis = spec.pop("axis", "y")
        prims.append(make_primitive(kind, offset=offset, axis=axis, **spec))
    sym = cfg.get("symmetry_axis")
    return ShapeBasis(category=category, primitives=tuple(prims),
                      symmetry_axis=None if sym is None else np.asarray(sym, dtype=float))


def load_bases(path: str | Path | None = None) -> dict:
    """Load category -> ShapeBasis from a JSON config (shipped default when path is None)."""
    if path is None:
        text = resources.files("sdftrack").joinpath("data/bases.json").read_text()
    else:
        text = Path(path).read_text()
    cfg = json.loads(text)
    return {cat: basis_from_config(cat, c) for cat, c in cfg.items()}


def get_basis(category: str, path: str | Path | None = None) -> ShapeBasis:
    bases = load_bases(path)
    if category not in bases:
        raise KeyError(f"unknown category {category!r}; have {sorted(bases)}")
    return bases[category]
