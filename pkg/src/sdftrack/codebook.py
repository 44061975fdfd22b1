"""Viewpoint codebook: crop descriptors, cosine queries, rotation likelihoods.

The descriptor is a mean-centered, L2-normalized 16x16 block-mean of the
normalized depth crop. One code is stored per rotation-grid bin; queries score
every bin by cosine similarity and a Gaussian turns scores into likelihoods.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CodebookFormatError
from .geometry import CameraIntrinsics, RotationGrid, build_rotation_grid
from .render import (
    CROP_RESOLUTION,
    CROP_WIDTH,
    REFERENCE_DISTANCE,
    REFERENCE_INTRINSICS,
    NormalizedDepthMap,
    render_normalized_batch,
)
from .shape import ShapeBasis, ShapeLatent

CODE_RESOLUTION = 16
CODE_DIM = CODE_RESOLUTION * CODE_RESOLUTION
SIGMA_PHI = 0.05
LIKELIHOOD_FLOOR = 1e-4

_MAGIC = b"ICBK"
_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def encode(dmap: NormalizedDepthMap) -> np.ndarray:
    """Centered, unit-norm block-mean descriptor; all-zero for constant crops."""
    S = dmap.resolution
    if S < CODE_RESOLUTION or S % CODE_RESOLUTION != 0:
        raise ValueError(f"crop resolution must be a multiple of {CODE_RESOLUTION}")
    b = S // CODE_RESOLUTION
    blocks = dmap.data.reshape(CODE_RESOLUTION, b, CODE_RESOLUTION, b).mean(axis=(1, 3))
    v = blocks.ravel()
    v = v - v.mean()
    n = np.linalg.norm(v)
    if n < 1e-8:
        return np.zeros(CODE_DIM)
    return v / n


@dataclass(frozen=True)
class Codebook:
    """One descriptor per rotation bin, quantized to float32 for persistence."""

    grid: RotationGrid
    codes: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        codes = np.ascontiguousarray(self.codes, dtype=np.float32)
        if codes.ndim != 2:
            raise ValueError("codes must be a 2-D matrix")
        if codes.shape[0] != self.grid.quats.shape[0]:
            raise ValueError("row count must match the rotation grid")
        norms = np.linalg.norm(codes.astype(np.float64), axis=1)
        off = (norms > 1e-8) & (np.abs(norms - 1.0) > 1e-6)
        if np.any(off):
            raise ValueError("every code row must be unit-norm or zero")
        object.__setattr__(self, "codes", codes)

    @property
    def size(self) -> int:
        return self.codes.shape[0]

    @property
    def dim(self) -> int:
        return self.codes.shape[1]

    @property
    def spreads(self) -> np.ndarray | None:
        """Per-bin depth-relief spread of the reference crop, if recorded."""
        spr = self.meta.get("bin_spread") if isinstance(self.meta, dict) else None
        if spr is None:
            return None
        arr = np.asarray(spr, dtype=np.float64)
        if arr.shape != (self.size,) or not np.all(arr > 0.0):
            return None
        return arr


def build_codebook(
    basis: ShapeBasis,
    latent: ShapeLatent,
    grid: RotationGrid,
    *,
    intr: CameraIntrinsics = REFERENCE_INTRINSICS,
    z0: float = REFERENCE_DISTANCE,
    w0: float = CROP_WIDTH,
    resolution: int = CROP_RESOLUTION,
    chunk: int = 64,
) -> Codebook:
    """Encode the canonical object's crop at every grid rotation."""
    quats = grid.quats
    J = quats.shape[0]
    if J == 0:
        raise ValueError("rotation grid is empty")
    codes = np.empty((J, CODE_DIM), dtype=np.float32)
    spreads = np.empty(J, dtype=np.float64)
    for start in range(0, J, chunk):
        stop = min(start + chunk, J)
        try:
            maps = render_normalized_batch(
                basis, latent, quats[start:stop], z0, 1.0, intr,
                resolution=resolution, w0=w0,
            )
        except Exception as exc:
            raise RuntimeError(f"codebook render failed for bins {start}..{stop - 1}") from exc
        for k, dmap in enumerate(maps):
            codes[start + k] = encode(dmap)
            vals = dmap.data[(dmap.data > 0.0) & (dmap.data < 1.0)]
            spreads[start + k] = max(float(np.std(vals)), 1e-6) if vals.size >= 2 else 1e-6
    meta = {
        "category": basis.category,
        "latent_raw": [float(v) for v in latent.raw],
        "grid_step_deg": float(grid.step_deg),
        "render": {
            "fx": intr.fx, "fy": intr.fy, "cx": intr.cx, "cy": intr.cy,
            "width": intr.width, "height": intr.height,
            "z0": float(z0), "w0": float(w0), "resolution": int(resolution),
        },
        "code_resolution": CODE_RESOLUTION,
        "bin_spread": [float(v) for v in spreads],
    }
    return Codebook(grid=grid, codes=codes, meta=meta)


def query(cb: Codebook, code: np.ndarray) -> np.ndarray:
    """Cosine similarity of one code against every codebook row."""
    code = np.asarray(code, dtype=np.float64).reshape(-1)
    if code.shape[0] != cb.dim:
        raise ValueError("code dimension does not match the codebook")
    if np.linalg.norm(code) < 1e-12:
        return np.zeros(cb.size)
    sims = cb.codes @ code.astype(np.float32)
    return np.clip(sims.astype(np.float64), -1.0, 1.0)


def likelihoods(
    similarities: np.ndarray,
    global_max: float,
    sigma_phi: float = SIGMA_PHI,
    floor: float = LIKELIHOOD_FLOOR,
) -> np.ndarray:
    """Gaussian of the similarity shortfall from the frame-wide best score."""
    if sigma_phi <= 0.0:
        raise ValueError("sigma_phi must be positive")
    sims = np.asarray(similarities, dtype=np.float64)
    d = sims - global_max
    phi = np.exp(-(d * d) / (2.0 * sigma_phi * sigma_phi))
    phi[phi <= floor] = 0.0
    return phi


def save_codebook(path, cb: Codebook) -> None:
    """ICBK binary: fixed header, row-major float32 codes, JSON metadata."""
    step_milli = int(round(cb.grid.step_deg * 1000.0))
    header = _HEADER.pack(_MAGIC, _VERSION, step_milli, cb.size, cb.dim)
    trailer = json.dumps(cb.meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    Path(path).write_bytes(header + cb.codes.astype("<f4").tobytes() + trailer)


def load_codebook(path) -> Codebook:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise CodebookFormatError("file too short for an ICBK header")
    magic, version, step_milli, J, D = _HEADER.unpack_from(blob)
    if magic != _MAGIC:
        raise CodebookFormatError("bad magic; not an ICBK codebook")
    if version != _VERSION:
        raise CodebookFormatError(f"unsupported codebook version {version}")
    body_end = _HEADER.size + J * D * 4
    if len(blob) < body_end:
        raise CodebookFormatError("truncated code matrix")
    codes = np.frombuffer(blob[_HEADER.size:body_end], dtype="<f4").reshape(J, D).copy()
    try:
        meta = json.loads(blob[body_end:].decode("utf-8")) if len(blob) > body_end else {}
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CodebookFormatError("corrupt metadata trailer") from exc
    grid = build_rotation_grid(step_milli / 1000.0)
    if grid.quats.shape[0] != J:
        raise CodebookFormatError("bin count does not match the stored grid step")
    return Codebook(grid=grid, codes=codes, meta=meta)
