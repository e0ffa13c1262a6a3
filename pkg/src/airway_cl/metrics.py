"""Segmentation quality metrics for airway trees, and the forgetting rate.

Rates whose denominator is empty are reported as ``None`` and their name
is added to ``MetricReport.flags`` instead of producing NaN; cohort
aggregation skips them.

Definitions
-----------
* overlap: ``iou = tp/(tp+fp+fn)``, ``dice = 2tp/(2tp+fp+fn)``,
  ``precision = tp/(tp+fp)``, ``completeness = tpr = tp/(tp+fn)``,
  ``tnr = tn/(tn+fp)``, ``fpr = fp/(fp+tn)``, ``fnr = fn/(fn+tp)``.
* DLR: GT centerline length whose unit steps have both voxels inside the
  prediction, over total GT centerline length.
* DBR: fraction of GT branches with at least ``detect_frac`` of their
  centerline voxels inside the prediction.
* volume leakage: ``|pred \\ gt| / |gt|``; ``one_minus_leakage`` is its
  complement clamped to [0, 1].
* centerline leakage: fraction of predicted centerline voxels outside GT.
* centerline distance: symmetric mean nearest-neighbour distance (mm)
  between the two centerlines.
* airway size MSE: mean squared diameter difference (mm^2) over branches
  paired greedily by ascending centroid distance.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .topology import SkeletonGraph, centerline_graph, largest_component, tree_length
from .volume_io import Mask3D, check_same_lattice

METRIC_NAMES = (
    "iou",
    "dice",
    "precision",
    "completeness",
    "tpr",
    "tnr",
    "fpr",
    "fnr",
    "dlr",
    "dbr",
    "volume_leakage",
    "centerline_leakage",
    "one_minus_leakage",
    "centerline_distance_mm",
    "airway_size_mse_mm2",
)

# +1 when larger is better
ORIENTATION = {
    "iou": 1, "dice": 1, "precision": 1, "completeness": 1, "tpr": 1, "tnr": 1,
    "fpr": -1, "fnr": -1, "dlr": 1, "dbr": 1, "volume_leakage": -1,
    "centerline_leakage": -1, "one_minus_leakage": 1,
    "centerline_distance_mm": -1, "airway_size_mse_mm2": -1,
}

TABLE_COLUMNS = (("iou", "IoU"), ("dlr", "DLR"), ("dbr", "DBR"), ("precision", "Prec."), ("one_minus_leakage", "1-Leak."))
FORGETTING_METRICS = tuple(name for name, _ in TABLE_COLUMNS)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


class OverlapMetrics(NamedTuple):
    iou: float | None
    dice: float | None
    precision: float | None
    completeness: float | None
    tpr: float | None
    tnr: float | None
    fpr: float | None
    fnr: float | None


def _ratio(num: float, den: float) -> float | None:
    return None if den == 0 else num / den


def confusion(pred: Mask3D, gt: Mask3D) -> ConfusionCounts:
    if pred.dims != gt.dims:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs gt {gt.dims}")
    p = np.asarray(pred.data)
    g = np.asarray(gt.data)
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def overlap_metrics(c: ConfusionCounts) -> OverlapMetrics:
    return OverlapMetrics(
        iou=_ratio(c.tp, c.tp + c.fp + c.fn),
        dice=_ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn),
        precision=_ratio(c.tp, c.tp + c.fp),
        completeness=_ratio(c.tp, c.tp + c.fn),
        tpr=_ratio(c.tp, c.tp + c.fn),
        tnr=_ratio(c.tn, c.tn + c.fp),
        fpr=_ratio(c.fp, c.fp + c.tn),
        fnr=_ratio(c.fn, c.fn + c.tp),
    )


def _inside(mask: np.ndarray, voxels) -> np.ndarray:
    v = np.asarray(voxels, dtype=np.int64).reshape(-1, 3)
    return mask[v[:, 0], v[:, 1], v[:, 2]]


def detected_length_rate(gt_graph: SkeletonGraph, pred: Mask3D) -> float | None:
    total = tree_length(gt_graph)
    if not gt_graph.branches or total == 0:
        return None
    p = np.asarray(pred.data)
    sp = np.asarray(gt_graph.spacing)
    covered = []
    for b in gt_graph.branches:
        path = np.asarray(b.path)
        inside = _inside(p, path)
        steps = np.sqrt((((path[1:] - path[:-1]) * sp) ** 2).sum(axis=1))
        covered.extend(steps[inside[1:] & inside[:-1]].tolist())
    return math.fsum(covered) / total


def detected_branch_ratio(gt_graph: SkeletonGraph, pred: Mask3D, detect_frac: float = 0.8) -> float | None:
    if not gt_graph.branches:
        return None
    p = np.asarray(pred.data)
    hit = sum(float(_inside(p, b.path).mean()) >= detect_frac for b in gt_graph.branches)
    return hit / len(gt_graph.branches)


def volume_leakage(pred: Mask3D, gt: Mask3D) -> float | None:
    if pred.dims != gt.dims:
        raise ValueError(f"dimension mismatch: pred {pred.dims} vs gt {gt.dims}")
    g = np.asarray(gt.data)
    return _ratio(int(np.count_nonzero(np.asarray(pred.data) & ~g)), int(np.count_nonzero(g)))


def centerline_leakage(pred_graph: SkeletonGraph, gt: Mask3D) -> float | None:
    vox = pred_graph.voxels()
    if len(vox) == 0:
        return None
    return float(np.count_nonzero(~_inside(np.asarray(gt.data), vox))) / len(vox)


def centerline_distance(a: SkeletonGraph, b: SkeletonGraph) -> float | None:
    va, vb = a.voxels(), b.voxels()
    if len(va) == 0 or len(vb) == 0:
        return None
    if not np.allclose(a.spacing, b.spacing, rtol=1e-6, atol=0):
        raise ValueError("centerline graphs have different spacing")
    sp = np.asarray(a.spacing)
    pa, pb = va * sp, vb * sp
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    return 0.5 * (float(np.mean(d_ab)) + float(np.mean(d_ba)))


def match_branches(pred_graph: SkeletonGraph, gt_graph: SkeletonGraph) -> list[tuple[int, int]]:
    """Greedy one-to-one pairing by ascending centroid distance (ties by branch ids)."""
    if not pred_graph.branches or not gt_graph.branches:
        return []
    cp = np.array([br.centroid_mm(pred_graph.spacing) for br in pred_graph.branches])
    cg = np.array([br.centroid_mm(gt_graph.spacing) for br in gt_graph.branches])
    d = np.sqrt(((cp[:, None, :] - cg[None, :, :]) ** 2).sum(axis=-1))
    order = sorted(((d[i, j], i, j) for i in range(len(cp)) for j in range(len(cg))))
    used_p, used_g, pairs = set(), set(), []
    for _, i, j in order:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        pairs.append((i, j))
    return pairs


def airway_size_mse(pred_graph: SkeletonGraph, gt_graph: SkeletonGraph) -> tuple[float | None, int]:
    """Diameter MSE over matched branches and the number of unmatched branches."""
    pairs = match_branches(pred_graph, gt_graph)
    unmatched = len(pred_graph.branches) + len(gt_graph.branches) - 2 * len(pairs)
    if not pairs:
        return None, unmatched
    sq = [
        (pred_graph.branches[i].mean_diameter_mm - gt_graph.branches[j].mean_diameter_mm) ** 2
        for i, j in pairs
    ]
    return math.fsum(sq) / len(sq), unmatched


@dataclass(frozen=True)
class MetricReport:
    iou: float | None = None
    dice: float | None = None
    precision: float | None = None
    completeness: float | None = None
    tpr: float | None = None
    tnr: float | None = None
    fpr: float | None = None
    fnr: float | None = None
    dlr: float | None = None
    dbr: float | None = None
    volume_leakage: float | None = None
    centerline_leakage: float | None = None
    one_minus_leakage: float | None = None
    centerline_distance_mm: float | None = None
    airway_size_mse_mm2: float | None = None
    unmatched_branches: int = 0
    flags: tuple[str, ...] = field(default=())

    def get(self, name: str) -> float | None:
        if name not in METRIC_NAMES:
            raise KeyError(f"unknown metric {name!r}")
        return getattr(self, name)

    def as_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_values(cls, values: dict, unmatched: int = 0, extra_flags=()) -> MetricReport:
        flags = [n for n in METRIC_NAMES if values.get(n) is None] + list(extra_flags)
        return cls(**{n: values.get(n) for n in METRIC_NAMES}, unmatched_branches=unmatched, flags=tuple(flags))


def full_report(pred: Mask3D, gt: Mask3D, detect_frac: float = 0.8) -> MetricReport:
    """All metrics for one pair, evaluated on the prediction's largest component."""
    check_same_lattice(pred, gt, names=("pred", "gt"))
    pred = largest_component(pred)
    ov = overlap_metrics(confusion(pred, gt))
    gt_graph = centerline_graph(gt)
    pred_graph = centerline_graph(pred)
    vals = ov._asdict()
    vals["dlr"] = detected_length_rate(gt_graph, pred)
    vals["dbr"] = detected_branch_ratio(gt_graph, pred, detect_frac)
    leak = volume_leakage(pred, gt)
    vals["volume_leakage"] = leak
    extra = []
    if leak is None:
        vals["one_minus_leakage"] = None
    elif leak > 1:
        vals["one_minus_leakage"] = 0.0
        extra.append("leakage_clamped")
    else:
        vals["one_minus_leakage"] = 1.0 - leak
    vals["centerline_leakage"] = centerline_leakage(pred_graph, gt)
    vals["centerline_distance_mm"] = centerline_distance(pred_graph, gt_graph)
    mse, unmatched = airway_size_mse(pred_graph, gt_graph)
    vals["airway_size_mse_mm2"] = mse
    return MetricReport.from_values(vals, unmatched, extra)


def _value(report, name: str):
    if isinstance(report, MetricReport):
        return report.get(name)
    if name not in report:
        raise KeyError(f"metric {name!r} missing from report")
    return report[name]


def forgetting_rate(before, after, metrics=FORGETTING_METRICS) -> float:
    """Mean (before - after) over scans and metrics, in percentage points."""
    before, after = list(before), list(after)
    if not before or not after:
        raise ValueError("forgetting rate needs non-empty report lists")
    if len(before) != len(after):
        raise ValueError(f"report lists differ in length: {len(before)} vs {len(after)}")
    diffs = []
    for k, (b, a) in enumerate(zip(before, after)):
        for name in metrics:
            vb, va = _value(b, name), _value(a, name)
            if vb is None or va is None:
                raise ValueError(f"metric {name!r} undefined for scan #{k}")
            diffs.append(vb - va)
    return 100.0 * math.fsum(diffs) / len(diffs)


def cohort_means(reports, names=METRIC_NAMES) -> dict[str, float | None]:
    """Per-metric mean over reports, skipping undefined values."""
    out = {}
    for name in names:
        vals = [v for v in (_value(r, name) for r in reports) if v is not None]
        out[name] = math.fsum(vals) / len(vals) if vals else None
    return out


def table_row(label: str, reports) -> str:
    """Cohort means as a Table-1 style line of percentages with two decimals."""
    means = cohort_means(reports, FORGETTING_METRICS)
    cells = ["n/a" if means[k] is None else f"{100 * means[k]:.2f}" for k, _ in TABLE_COLUMNS]
    return " | ".join([label] + cells)


# ------------------------------------------------------------ serialization

CSV_COLUMNS = ("id",) + METRIC_NAMES + ("unmatched_branches", "flags")


def reports_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for sid, rep in rows:
        w.writerow(
            [sid]
            + ["" if rep.get(n) is None else repr(float(rep.get(n))) for n in METRIC_NAMES]
            + [rep.unmatched_branches, ";".join(rep.flags)]
        )
    return buf.getvalue()


def reports_from_csv(text: str) -> list[tuple[str, MetricReport]]:
    reader = csv.DictReader(io.StringIO(text))
    if "id" not in (reader.fieldnames or ()):
        raise ValueError("metric CSV lacks an 'id' column")
    out = []
    for rec in reader:
        vals = {n: (float(rec[n]) if rec.get(n) not in (None, "") else None) for n in METRIC_NAMES}
        flags = tuple(f for f in (rec.get("flags") or "").split(";") if f)
        kw = {n: vals[n] for n in METRIC_NAMES}
        out.append((rec["id"], MetricReport(**kw, unmatched_branches=int(rec.get("unmatched_branches") or 0), flags=flags)))
    return out


def read_reports(path) -> list[tuple[str, MetricReport]]:
    return reports_from_csv(Path(path).read_text(encoding="utf-8"))


def reports_to_json(rows) -> str:
    return json.dumps([{"id": sid, **rep.as_dict()} for sid, rep in rows], indent=2) + "\n"
