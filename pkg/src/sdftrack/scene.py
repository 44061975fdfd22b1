"""Synthetic depth-sequence generator with exact ground truth.

A scene is a single object of known category, latent, and size following a
waypoint trajectory in front of a fixed camera. Each frame carries the
rendered depth, the object mask, a detection, and the ground-truth state, so
tracking output can be scored without any annotation noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import SceneGenerationError
from .geometry import CameraIntrinsics, Pose, project, quat_slerp
from .particle_filter import Detection
from .render import (
    NEAR_PLANE,
    DepthImage,
    load_depth_raw,
    render_depth,
    save_depth_raw,
)
from .shape import ShapeLatent, get_basis

META_NAME = "meta.json"


@dataclass(frozen=True)
class SceneConfig:
    """Everything needed to regenerate a sequence bit-for-bit."""

    category: str
    latent_raw: tuple
    size: float
    frames: int
    intrinsics: CameraIntrinsics
    waypoints: tuple  # ((quat xyzw), (t xyz)) pairs, visited in order
    noise_std: float = 0.0  # per-pixel depth noise, meters
    vel_noise: float = 0.0  # random-walk translation noise per frame, meters
    occluder: tuple | None = None  # (u0, v0, u1, v1) image fractions
    seed: int = 0

    def __post_init__(self):
        if self.frames < 1:
            raise ValueError("frame count must be >= 1")
        if self.size <= 0.0:
            raise ValueError("object size must be positive")
        if self.noise_std < 0.0 or self.vel_noise < 0.0:
            raise ValueError("noise levels must be non-negative")
        if len(self.waypoints) < 1:
            raise ValueError("at least one waypoint is required")
        if self.occluder is not None:
            u0, v0, u1, v1 = self.occluder
            if not (0.0 <= u0 < u1 <= 1.0 and 0.0 <= v0 < v1 <= 1.0):
                raise ValueError("occluder fractions must form a box inside the image")

    @property
    def latent(self) -> ShapeLatent:
        return ShapeLatent(np.asarray(self.latent_raw, dtype=float))

    def to_dict(self) -> dict:
        return {
            "category": self.category,
            "latent_raw": [float(v) for v in self.latent_raw],
            "size": self.size,
            "frames": self.frames,
            "intrinsics": self.intrinsics.to_dict(),
            "waypoints": [
                {"quat": [float(x) for x in q], "t": [float(x) for x in t]}
                for q, t in self.waypoints
            ],
            "noise_std": self.noise_std,
            "vel_noise": self.vel_noise,
            "occluder": list(self.occluder) if self.occluder else None,
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "SceneConfig":
        return SceneConfig(
            category=d["category"],
            latent_raw=tuple(float(v) for v in d["latent_raw"]),
            size=float(d["size"]),
            frames=int(d["frames"]),
            intrinsics=CameraIntrinsics(**d["intrinsics"]),
            waypoints=tuple(
                (tuple(float(x) for x in w["quat"]), tuple(float(x) for x in w["t"]))
                for w in d["waypoints"]
            ),
            noise_std=float(d.get("noise_std", 0.0)),
            vel_noise=float(d.get("vel_noise", 0.0)),
            occluder=tuple(d["occluder"]) if d.get("occluder") else None,
            seed=int(d.get("seed", 0)),
        )


@dataclass
class SceneFrame:
    """One observed frame plus its ground truth."""

    depth: DepthImage
    mask: np.ndarray
    detection: Detection
    pose: Pose
    size: float


@dataclass
class Sequence:
    config: SceneConfig
    frames: list = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def latent(self) -> ShapeLatent:
        return self.config.latent


def _trajectory(cfg: SceneConfig, rng: np.random.Generator):
    """Waypoint slerp/lerp sampled at every frame, plus translation walk noise."""
    ways = cfg.waypoints
    poses = []
    if len(ways) == 1 or cfg.frames == 1:
        for _ in range(cfg.frames):
            poses.append(Pose(np.asarray(ways[0][0], float), np.asarray(ways[0][1], float)))
    else:
        segs = len(ways) - 1
        for k in range(cfg.frames):
            tau = k / (cfg.frames - 1) * segs
            i = min(int(tau), segs - 1)
            f = tau - i
            qa, ta = np.asarray(ways[i][0], float), np.asarray(ways[i][1], float)
            qb, tb = np.asarray(ways[i + 1][0], float), np.asarray(ways[i + 1][1], float)
            poses.append(Pose(quat_slerp(qa, qb, f), (1.0 - f) * ta + f * tb))
    if cfg.vel_noise > 0.0:
        walk = np.cumsum(rng.normal(0.0, cfg.vel_noise, size=(cfg.frames, 3)), axis=0)
        walk[0] = 0.0
        poses = [Pose(p.quat, p.t + w) for p, w in zip(poses, walk)]
    return poses


def _check_in_frustum(pose: Pose, radius: float, intr: CameraIntrinsics, k: int):
    t = pose.t
    if t[2] - radius <= NEAR_PLANE:
        raise SceneGenerationError(f"frame {k}: object crosses the near plane")
    u, v = project(t[None, :], intr)[0]
    ru = intr.fx * radius / t[2]
    rv = intr.fy * radius / t[2]
    if u - ru < 0 or u + ru > intr.width or v - rv < 0 or v + rv > intr.height:
        raise SceneGenerationError(f"frame {k}: object leaves the camera frustum")


def generate_sequence(cfg: SceneConfig) -> Sequence:
    """Render the configured trajectory into observed frames with ground truth."""
    basis = get_basis(cfg.category)
    latent = cfg.latent
    rng = np.random.default_rng(cfg.seed)
    poses = _trajectory(cfg, rng)
    radius = cfg.size * basis.bounding_radius
    seq = Sequence(config=cfg)
    for k, pose in enumerate(poses):
        _check_in_frustum(pose, radius, cfg.intrinsics, k)
        depth = render_depth(basis, latent, pose, cfg.size, cfg.intrinsics)
        data = depth.data.copy()
        mask = data > 0.0
        if cfg.noise_std > 0.0:
            noise = rng.normal(0.0, cfg.noise_std, size=data.shape)
            data[mask] = np.maximum(data[mask] + noise[mask], NEAR_PLANE)
        if cfg.occluder is not None:
            u0, v0, u1, v1 = cfg.occluder
            h, w = cfg.intrinsics.height, cfg.intrinsics.width
            data[int(v0 * h) : int(v1 * h), int(u0 * w) : int(u1 * w)] = 0.0
            mask[int(v0 * h) : int(v1 * h), int(u0 * w) : int(u1 * w)] = False
        if np.count_nonzero(mask) < 10:
            raise SceneGenerationError(f"frame {k}: object is not visible")
        seq.frames.append(
            SceneFrame(
                depth=DepthImage(data),
                mask=mask,
                detection=Detection.from_mask(mask),
                pose=pose,
                size=cfg.size,
            )
        )
    return seq


def save_sequence(seq: Sequence, out_dir) -> None:
    """Write meta.json plus per-frame raw depth and PNG masks."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {
        "config": seq.config.to_dict(),
        "gt": [
            {
                "quat": [float(x) for x in f.pose.quat],
                "t": [float(x) for x in f.pose.t],
                "size": f.size,
            }
            for f in seq.frames
        ],
    }
    (out / META_NAME).write_text(json.dumps(meta, indent=1, sort_keys=True))
    for k, f in enumerate(seq.frames):
        save_depth_raw(out / f"depth_{k:04d}.raw", f.depth)
        Image.fromarray(f.mask.astype(np.uint8) * 255).save(out / f"mask_{k:04d}.png")


def load_sequence(in_dir) -> Sequence:
    """Reload a saved sequence; detections are rebuilt from the stored masks."""
    root = Path(in_dir)
    meta = json.loads((root / META_NAME).read_text())
    cfg = SceneConfig.from_dict(meta["config"])
    seq = Sequence(config=cfg)
    for k, rec in enumerate(meta["gt"]):
        depth = load_depth_raw(
            root / f"depth_{k:04d}.raw", cfg.intrinsics.width, cfg.intrinsics.height
        )
        mask = np.asarray(Image.open(root / f"mask_{k:04d}.png")) > 0
        seq.frames.append(
            SceneFrame(
                depth=depth,
                mask=mask,
                detection=Detection.from_mask(mask),
                pose=Pose(np.asarray(rec["quat"], float), np.asarray(rec["t"], float)),
                size=float(rec["size"]),
            )
        )
    return seq
