"""Scan/ground-truth descriptors for the learned complexity score.

One :class:`FeatureVector` per (CT, airway ground truth, lung mask):

* airway topology and size on the largest 26-connected GT component:
  tree length, voxel count, volume, volume ratio GT / lung^(2/3), branch
  count, mean branch length and mean branch diameter;
* acquisition scalars: voxel size and lung volume;
* a 100-bin histogram of HU values inside the lung over the lung window
  [-1000, +600] HU (16 HU bins, out-of-range values clamped into the end
  bins), normalized to probabilities.
"""

from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .topology import build_graph, distance_transform, largest_component, skeletonize, tree_length
from .volume_io import HU_MAX, HU_MIN, Mask3D, Volume3D, check_same_lattice

log = logging.getLogger(__name__)

HIST_BINS = 100
SCALAR_COLUMNS = (
    "tree_length_mm",
    "gt_voxel_count",
    "gt_volume_mm3",
    "volume_ratio",
    "branch_count",
    "avg_branch_length_mm",
    "avg_branch_diameter_mm",
    "voxel_size_mm3",
    "lung_volume_mm3",
)
HIST_COLUMNS = tuple(f"hist_{i:03d}" for i in range(HIST_BINS))
FEATURE_COLUMNS = SCALAR_COLUMNS + HIST_COLUMNS
EXTRA_COLUMNS = ("gt_voxel_count_raw",)
_INT_COLUMNS = {"gt_voxel_count", "branch_count", "gt_voxel_count_raw"}


@dataclass(frozen=True, eq=False)
class FeatureVector:
    tree_length_mm: float
    gt_voxel_count: int
    gt_volume_mm3: float
    volume_ratio: float
    branch_count: int
    avg_branch_length_mm: float
    avg_branch_diameter_mm: float
    voxel_size_mm3: float
    lung_volume_mm3: float
    histogram: np.ndarray
    gt_voxel_count_raw: int = 0
    degenerate: bool = False

    def as_array(self) -> np.ndarray:
        scalars = [float(getattr(self, name)) for name in SCALAR_COLUMNS]
        return np.concatenate([scalars, np.asarray(self.histogram, dtype=np.float64)])


def lung_histogram(ct: Volume3D, lung: Mask3D, bins: int = HIST_BINS,
                   lo: float = HU_MIN, hi: float = HU_MAX) -> np.ndarray:
    values = np.asarray(ct.data)[np.asarray(lung.data)].astype(np.float64)
    if values.size == 0:
        raise ValueError("empty lung mask")
    width = (hi - lo) / bins
    idx = np.floor((np.clip(values, lo, hi) - lo) / width).astype(np.int64)
    counts = np.bincount(np.clip(idx, 0, bins - 1), minlength=bins)
    return counts / counts.sum()


def extract_features(ct: Volume3D, gt: Mask3D, lung: Mask3D) -> FeatureVector:
    """Feature vector for one scan; an empty GT yields zero topology and ``degenerate=True``."""
    if ct.intensity_kind != "HU":
        raise ValueError("extract_features expects a HU volume")
    check_same_lattice(ct, gt, lung, names=("ct", "gt", "lung"))
    if not np.asarray(lung.data).any():
        raise ValueError("empty lung mask")

    voxel_size = ct.voxel_volume
    lung_volume = lung.count() * voxel_size
    hist = lung_histogram(ct, lung)
    raw = gt.count()

    if raw == 0:
        log.warning("empty ground truth; topology features set to 0")
        return FeatureVector(0.0, 0, 0.0, 0.0, 0, 0.0, 0.0, voxel_size, lung_volume, hist, 0, True)

    core = largest_component(gt)
    graph = build_graph(skeletonize(core), distance_transform(core))
    n = core.count()
    volume = n * voxel_size
    length = tree_length(graph)
    nb = len(graph.branches)
    return FeatureVector(
        tree_length_mm=length,
        gt_voxel_count=n,
        gt_volume_mm3=volume,
        volume_ratio=volume / lung_volume ** (2.0 / 3.0),
        branch_count=nb,
        avg_branch_length_mm=length / nb if nb else 0.0,
        avg_branch_diameter_mm=float(np.mean([b.mean_diameter_mm for b in graph.branches])) if nb else 0.0,
        voxel_size_mm3=voxel_size,
        lung_volume_mm3=lung_volume,
        histogram=hist,
        gt_voxel_count_raw=raw,
        degenerate=nb == 0,
    )


def _fmt(name: str, value) -> str:
    if name in _INT_COLUMNS:
        return str(int(value))
    return repr(float(value))


class FeatureTable:
    """Scan-indexed feature matrix with the fixed 109-column layout."""

    columns = FEATURE_COLUMNS

    def __init__(self, ids, matrix, raw_counts=None):
        self.ids = list(ids)
        self.matrix = np.asarray(matrix, dtype=np.float64).reshape(len(self.ids), len(FEATURE_COLUMNS))
        if len(set(self.ids)) != len(self.ids):
            dupes = sorted({i for i in self.ids if self.ids.count(i) > 1})
            raise ValueError(f"duplicate scan ids: {dupes}")
        if raw_counts is None:
            raw_counts = self.matrix[:, FEATURE_COLUMNS.index("gt_voxel_count")]
        self.raw_counts = np.asarray(raw_counts, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.ids)

    def row(self, scan_id: str) -> np.ndarray:
        return self.matrix[self.ids.index(scan_id)]

    def subset(self, ids) -> FeatureTable:
        pos = {k: i for i, k in enumerate(self.ids)}
        idx = [pos[i] for i in ids]
        return FeatureTable([self.ids[i] for i in idx], self.matrix[idx], self.raw_counts[idx])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id",) + FEATURE_COLUMNS + EXTRA_COLUMNS)
        for sid, row, raw in zip(self.ids, self.matrix, self.raw_counts):
            w.writerow([sid] + [_fmt(c, v) for c, v in zip(FEATURE_COLUMNS, row)] + [str(int(raw))])
        return buf.getvalue()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, text: str) -> FeatureTable:
        reader = csv.DictReader(io.StringIO(text))
        missing = [c for c in ("id",) + FEATURE_COLUMNS if c not in (reader.fieldnames or ())]
        if missing:
            raise ValueError(f"feature CSV lacks columns: {missing[:5]}{'...' if len(missing) > 5 else ''}")
        ids, rows, raws = [], [], []
        for rec in reader:
            ids.append(rec["id"])
            rows.append([float(rec[c]) for c in FEATURE_COLUMNS])
            raw = rec.get("gt_voxel_count_raw")
            raws.append(int(raw) if raw not in (None, "") else int(float(rec["gt_voxel_count"])))
        return cls(ids, np.array(rows).reshape(len(ids), len(FEATURE_COLUMNS)), raws)

    @classmethod
    def read(cls, path) -> FeatureTable:
        return cls.from_csv(Path(path).read_text(encoding="utf-8"))


def feature_table(rows) -> FeatureTable:
    """Build a table from ``(scan_id, FeatureVector)`` pairs, keeping input order."""
    rows = list(rows)
    ids = [sid for sid, _ in rows]
    matrix = np.array([fv.as_array() for _, fv in rows]) if rows else np.zeros((0, len(FEATURE_COLUMNS)))
    raws = [fv.gt_voxel_count_raw for _, fv in rows]
    for sid, fv in rows:
        if not all(math.isfinite(v) for v in fv.as_array()):
            raise ValueError(f"non-finite feature value for scan {sid!r}")
    return FeatureTable(ids, matrix, raws)
