"""Synthetic airway phantoms: tube trees, lung masks and textured CT.

Tubes are capsules (every voxel centre within ``radius`` of the segment),
so tips are rounded and thin cleanly. Voxel ``(i, j, k)`` sits at
``(i*sx, j*sy, k*sz)`` mm. CT texture is Gaussian HU noise around
-850 HU in the lung, -1000 HU in the airway lumen and +40 HU elsewhere,
drawn from the seeded SplitMix64 stream and rounded to integer HU.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .rng import Stream
from .volume_io import Mask3D, Volume3D, save_nifti


@dataclass(frozen=True)
class Segment:
    start: tuple[float, float, float]
    end: tuple[float, float, float]
    radius: float

    @property
    def length(self) -> float:
        return math.dist(self.start, self.end)


@dataclass(frozen=True)
class Texture:
    lung_hu: float = -850.0
    lung_sigma: float = 40.0
    airway_hu: float = -1000.0
    airway_sigma: float = 15.0
    tissue_hu: float = 40.0
    tissue_sigma: float = 10.0


@dataclass(frozen=True)
class PhantomSpec:
    segments: tuple[Segment, ...]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    texture: Texture = field(default_factory=Texture)

    def __post_init__(self):
        extent = [(n - 1) * s for n, s in zip(self.dims, self.spacing)]
        for seg in self.segments:
            if seg.radius <= 0:
                raise ValueError("segment radius must be positive")
            for p in (seg.start, seg.end):
                if any(c - seg.radius < 0 or c + seg.radius > e for c, e in zip(p, extent)):
                    raise ValueError(f"segment {seg} extends outside the volume {extent}")

    def ground_truth(self) -> dict:
        return {
            "branch_count": len(self.segments),
            "total_length_mm": math.fsum(s.length for s in self.segments),
            "branch_lengths_mm": [s.length for s in self.segments],
            "branch_radii_mm": [s.radius for s in self.segments],
        }

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, doc: dict) -> PhantomSpec:
        segs = tuple(Segment(tuple(s["start"]), tuple(s["end"]), float(s["radius"])) for s in doc["segments"])
        tex = Texture(**doc.get("texture", {}))
        return cls(segs, tuple(doc["dims"]), tuple(doc.get("spacing", (1.0, 1.0, 1.0))), tex)


def rasterize(segments, dims, spacing, radius_scale: float = 1.0) -> np.ndarray:
    """Boolean union of capsules on the voxel lattice."""
    out = np.zeros(dims, dtype=bool)
    sp = np.asarray(spacing, dtype=np.float64)
    for seg in segments:
        a = np.asarray(seg.start, dtype=np.float64)
        b = np.asarray(seg.end, dtype=np.float64)
        r = seg.radius * radius_scale
        lo = np.maximum(np.floor((np.minimum(a, b) - r) / sp).astype(int), 0)
        hi = np.minimum(np.ceil((np.maximum(a, b) + r) / sp).astype(int), np.asarray(dims) - 1)
        if np.any(hi < lo):
            continue
        grids = np.meshgrid(*[np.arange(l, h + 1) * s for l, h, s in zip(lo, hi, sp)], indexing="ij")
        p = np.stack(grids, axis=-1)
        ab = b - a
        denom = float(ab @ ab)
        t = np.zeros(p.shape[:-1]) if denom == 0 else np.clip(((p - a) @ ab) / denom, 0.0, 1.0)
        closest = a + t[..., None] * ab
        inside = np.sum((p - closest) ** 2, axis=-1) <= r * r
        out[lo[0] : hi[0] + 1, lo[1] : hi[1] + 1, lo[2] : hi[2] + 1] |= inside
    return out


def lung_ellipsoid(dims, spacing, fill: float = 0.45) -> np.ndarray:
    """Ellipsoid centred in the volume with semi-axes ``fill`` x extent."""
    sp = np.asarray(spacing, dtype=np.float64)
    extent = (np.asarray(dims) - 1) * sp
    centre = extent / 2
    semi = np.maximum(extent * fill, sp)
    grids = np.meshgrid(*[np.arange(n) * s for n, s in zip(dims, sp)], indexing="ij")
    r2 = sum(((g - c) / a) ** 2 for g, c, a in zip(grids, centre, semi))
    return r2 <= 1.0


def generate_phantom(geometry: PhantomSpec, seed: int = 0):
    """Rasterize ``geometry`` into (ct, gt, lung, ground-truth record)."""
    gt = rasterize(geometry.segments, geometry.dims, geometry.spacing)
    lung = lung_ellipsoid(geometry.dims, geometry.spacing) | gt  # the lung mask always encloses the airway
    tex = geometry.texture
    noise = Stream.from_seed(seed, "phantom-texture").normal_array(int(np.prod(geometry.dims))).reshape(geometry.dims)
    ct = np.where(lung, tex.lung_hu + tex.lung_sigma * noise, tex.tissue_hu + tex.tissue_sigma * noise)
    ct = np.where(gt, tex.airway_hu + tex.airway_sigma * noise, ct)
    ct = np.rint(ct).astype(np.float32)
    record = geometry.ground_truth()
    record["seed"] = int(seed)
    return (
        Volume3D(ct, geometry.spacing, "HU"),
        Mask3D(gt, geometry.spacing),
        Mask3D(lung, geometry.spacing),
        record,
    )


def write_phantom(outdir, name: str, geometry: PhantomSpec, seed: int = 0, pred: np.ndarray | None = None) -> dict:
    """Write ``ct/``, ``gt/``, ``lung/`` NIfTI files and a ``truth/<name>.json`` record."""
    outdir = Path(outdir)
    ct, gt, lung, record = generate_phantom(geometry, seed)
    save_nifti(ct, outdir / "ct" / f"{name}.nii.gz", dtype=np.int16)
    save_nifti(gt, outdir / "gt" / f"{name}.nii.gz")
    save_nifti(lung, outdir / "lung" / f"{name}.nii.gz")
    if pred is not None:
        save_nifti(Mask3D(pred, geometry.spacing), outdir / "pred" / f"{name}.nii.gz")
    record = {"id": name, **record, "geometry": geometry.to_dict()}
    truth = outdir / "truth" / f"{name}.json"
    truth.parent.mkdir(parents=True, exist_ok=True)
    truth.write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    return record


# ------------------------------------------------------------------ presets


def straight_tube(radius: float = 2.0, length: float = 20.0, spacing=(1.0, 1.0, 1.0), margin: float = 4.0) -> PhantomSpec:
    """One tube along +z, centred in x and y."""
    span = [2 * (radius + margin), 2 * (radius + margin), length + 2 * (radius + margin)]
    dims = tuple(int(math.ceil(e / s)) + 1 for e, s in zip(span, spacing))
    cx = (dims[0] - 1) * spacing[0] / 2
    cy = (dims[1] - 1) * spacing[1] / 2
    z0 = radius + margin
    return PhantomSpec((Segment((cx, cy, z0), (cx, cy, z0 + length), radius),), dims, tuple(spacing))


def _rotate(v: np.ndarray, axis: np.ndarray, angle: float) -> np.ndarray:
    axis = axis / np.linalg.norm(axis)
    return (
        v * math.cos(angle)
        + np.cross(axis, v) * math.sin(angle)
        + axis * float(axis @ v) * (1 - math.cos(angle))
    )


def tree_segments(levels: int, root_length: float, root_radius: float, length_ratio=0.75,
                  radius_ratio=0.72, angle_deg: float = 35.0, top=(0.0, 0.0, 0.0), jitter=None):
    """Symmetric bifurcating tree hanging down (-z) from ``top``.

    Each generation splits in a plane rotated 90 degrees from its parent's.
    ``jitter`` is an optional callable returning a multiplicative factor
    near 1 for lengths, radii and angles.
    """
    j = jitter or (lambda: 1.0)
    segs: list[Segment] = []
    frontier = [(np.asarray(top, dtype=np.float64), np.array([0.0, 0.0, -1.0]), np.array([0.0, 1.0, 0.0]),
                 root_length, root_radius)]
    for level in range(levels):
        nxt = []
        for start, direction, normal, length, radius in frontier:
            L = length * (j() if level else 1.0)
            end = start + direction * L
            segs.append(Segment(tuple(start), tuple(end), radius))
            if level + 1 < levels:
                for sign in (-1.0, 1.0):
                    ang = math.radians(angle_deg) * j() * sign
                    d = _rotate(direction, normal, ang)
                    nxt.append((end, d, np.cross(d, normal), length * length_ratio, radius * radius_ratio * j()))
        frontier = nxt
    return segs


def _fit(segments, spacing, margin: float) -> PhantomSpec:
    pts = np.array([p for s in segments for p in (s.start, s.end)])
    rmax = max(s.radius for s in segments)
    lo = pts.min(axis=0) - rmax - margin
    hi = pts.max(axis=0) + rmax + margin
    sp = np.asarray(spacing, dtype=np.float64)
    dims = tuple(int(v) for v in np.ceil((hi - lo) / sp) + 1)
    shift = -lo
    moved = tuple(Segment(tuple(np.add(s.start, shift)), tuple(np.add(s.end, shift)), s.radius) for s in segments)
    return PhantomSpec(moved, dims, tuple(float(v) for v in spacing))


def bifurcating_tree(levels: int = 3, root_length: float = 30.0, root_radius: float = 3.0,
                     spacing=(1.0, 1.0, 1.0), margin: float = 4.0, angle_deg: float = 35.0) -> PhantomSpec:
    """``2**levels - 1`` tubes; levels=3 gives the 7-branch tree."""
    return _fit(tree_segments(levels, root_length, root_radius, angle_deg=angle_deg), spacing, margin)


def y_phantom(arm_length: float = 15.0, radius: float = 2.0, spacing=(1.0, 1.0, 1.0), margin: float = 4.0) -> PhantomSpec:
    """Three tubes meeting at a point, 120 degrees apart in the x-z plane."""
    segs = []
    for k in range(3):
        a = math.radians(90 + 120 * k)
        segs.append(Segment((0.0, 0.0, 0.0), (arm_length * math.cos(a), 0.0, arm_length * math.sin(a)), radius))
    return _fit(segs, spacing, margin)


def random_tree(seed: int, levels: int | None = None, spacing=None) -> PhantomSpec:
    """Seeded tree with jittered geometry, used to build synthetic cohorts."""
    s = Stream.from_seed(seed, "random-tree")
    if levels is None:
        levels = 2 + s.randbelow(2)
    if spacing is None:
        spacing = (0.8 + 0.4 * s.random(), 0.8 + 0.4 * s.random(), 0.8 + 0.6 * s.random())
    root_len = 22.0 + 12.0 * s.random()
    root_r = 2.6 + 1.2 * s.random()
    angle = 30.0 + 15.0 * s.random()
    segs = tree_segments(levels, root_len, root_r, angle_deg=angle, jitter=lambda: 0.9 + 0.2 * s.random())
    tex = Texture(lung_hu=-880.0 + 80.0 * s.random(), lung_sigma=30.0 + 30.0 * s.random())
    geometry = _fit(segs, spacing, 4.0)
    return PhantomSpec(geometry.segments, geometry.dims, geometry.spacing, tex)


def simulate_prediction(geometry: PhantomSpec, seed: int, miss: float = 0.5, leak: float = 0.3) -> np.ndarray:
    """A plausible imperfect segmentation of ``geometry``.

    Non-root tubes are truncated at a random fraction of their length
    (heavier truncation for thin tubes, scaled by ``miss``); the radius is
    jittered, and with probability ``leak`` a blob leaks out at one tip.
    """
    s = Stream.from_seed(seed, "prediction")
    rmax = max(seg.radius for seg in geometry.segments)
    segs = []
    for i, seg in enumerate(geometry.segments):
        if i == 0:
            segs.append(seg)
            continue
        thin = 1.0 - seg.radius / rmax
        keep = 1.0 - miss * thin * s.random()
        a = np.asarray(seg.start)
        b = a + (np.asarray(seg.end) - a) * keep
        segs.append(Segment(tuple(a), tuple(b), seg.radius))
    pred = rasterize(segs, geometry.dims, geometry.spacing, radius_scale=0.85 + 0.25 * s.random())
    if s.random() < leak:
        tip = geometry.segments[-1]
        blob = Segment(tip.end, tip.end, 2.5 * tip.radius)
        pred |= rasterize([blob], geometry.dims, geometry.spacing)
    return pred


def synthetic_feature_matrix(n: int, seed: int = 0) -> np.ndarray:
    """``n`` rows of plausible 109-column feature vectors without rasterizing anything.

    Scalars follow the same relations as real extractions (tree length =
    branch count x mean branch length, volume = voxel count x voxel size,
    ...); the lung histogram is a discretized Gaussian around a per-scan
    parenchyma density.
    """
    s = Stream.from_seed(seed, "synthetic-features")
    u = s.random_array(n * 9).reshape(n, 9)
    branch_count = np.floor(3 + 60 * u[:, 0] ** 1.5)
    avg_len = 8.0 + 20.0 * u[:, 1]
    tree_len = branch_count * avg_len
    avg_diam = 2.0 + 4.0 * u[:, 2]
    voxel_size = 0.3 + 0.5 * u[:, 3]
    gt_volume = tree_len * math.pi * (avg_diam / 2) ** 2 * (0.8 + 0.4 * u[:, 4])
    gt_count = np.floor(gt_volume / voxel_size)
    gt_volume = gt_count * voxel_size
    lung_volume = 3.0e6 + 4.0e6 * u[:, 5]
    ratio = gt_volume / lung_volume ** (2.0 / 3.0)
    centre = 10 + 8 * u[:, 6]
    width = 3 + 4 * u[:, 7]
    bins = np.arange(100)
    hist = np.exp(-0.5 * ((bins[None, :] - centre[:, None]) / width[:, None]) ** 2)
    hist /= hist.sum(axis=1, keepdims=True)
    scalars = np.column_stack(
        [tree_len, gt_count, gt_volume, ratio, branch_count, avg_len, avg_diam, voxel_size, lung_volume]
    )
    return np.hstack([scalars, hist])
