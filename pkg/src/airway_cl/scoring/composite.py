"""Composite segmentation-quality target with PCA-derived weights.

Each metric column is oriented so that larger means better, standardized
(zero mean, unit population variance) and projected on the first principal
axis of the standardized matrix. Weights are the absolute loadings
normalized to sum to one; the sign of an eigenvector is arbitrary, so
direction comes only from the explicit orientation vector. Columns with
zero variance get weight 0.

The complexity target of a scan is the negated weighted quality, so a scan
at the training means scores 0 and better-segmented scans score lower.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from ..metrics import METRIC_NAMES, ORIENTATION, MetricReport

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class CompositeTargetModel:
    metric_names: tuple[str, ...]
    means: np.ndarray
    stdevs: np.ndarray
    weights: np.ndarray
    orientation: np.ndarray
    explained_variance: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "metric_names": list(self.metric_names),
            "means": [float(v) for v in self.means],
            "stdevs": [float(v) for v in self.stdevs],
            "weights": [float(v) for v in self.weights],
            "orientation": [int(v) for v in self.orientation],
            "explained_variance": float(self.explained_variance),
        }

    @classmethod
    def from_dict(cls, doc: dict) -> CompositeTargetModel:
        return cls(
            tuple(doc["metric_names"]),
            np.asarray(doc["means"], dtype=np.float64),
            np.asarray(doc["stdevs"], dtype=np.float64),
            np.asarray(doc["weights"], dtype=np.float64),
            np.asarray(doc["orientation"], dtype=np.int64),
            float(doc.get("explained_variance", float("nan"))),
        )


def first_principal_axis(z: np.ndarray) -> tuple[np.ndarray, float]:
    """Leading eigenvector of ``z.T @ z / n`` and its share of total variance."""
    cov = z.T @ z / z.shape[0]
    vals, vecs = np.linalg.eigh(cov)
    total = float(vals.sum())
    return vecs[:, -1], float(vals[-1] / total) if total > 0 else float("nan")


def fit_composite_target(metric_matrix, orientation=None, metric_names=None) -> CompositeTargetModel:
    """Fit standardization and PCA weights on an ``n_scans x n_metrics`` matrix."""
    m = np.asarray(metric_matrix, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("metric matrix must be 2D")
    n, k = m.shape
    if n < 2:
        raise ValueError("need at least 2 scans to fit the composite target")
    if not np.isfinite(m).all():
        raise ValueError("metric matrix has non-finite entries")
    if metric_names is None:
        metric_names = tuple(f"m{i}" for i in range(k))
    metric_names = tuple(metric_names)
    if len(metric_names) != k:
        raise ValueError("metric_names length does not match matrix columns")
    if orientation is None:
        orientation = [ORIENTATION.get(name, 1) for name in metric_names]
    sign = np.asarray(orientation, dtype=np.int64)
    if sign.shape != (k,) or not np.isin(sign, (-1, 1)).all():
        raise ValueError("orientation must be a +1/-1 entry per metric")

    oriented = m * sign
    means = oriented.mean(axis=0)
    stdevs = oriented.std(axis=0)
    live = stdevs > 0
    if not live.any():
        raise ValueError("all metric columns are constant")
    z = (oriented[:, live] - means[live]) / stdevs[live]
    axis, share = first_principal_axis(z)
    weights = np.zeros(k)
    weights[live] = np.abs(axis) / np.abs(axis).sum()
    return CompositeTargetModel(metric_names, means, stdevs, weights, sign, share)


def _metric(report, name):
    if isinstance(report, MetricReport):
        return report.get(name)
    if name not in report:
        raise KeyError(f"metric {name!r} missing from report")
    return report[name]


def composite_score(model: CompositeTargetModel, report, strict: bool = False) -> float:
    """Complexity target ``y = -sum(w * z)`` for one report (MetricReport or mapping).

    An undefined metric raises when ``strict``; otherwise it is imputed at the
    training mean (contributing zero) and logged.
    """
    q = 0.0
    for name, mean, sd, w, s in zip(model.metric_names, model.means, model.stdevs, model.weights, model.orientation):
        value = _metric(report, name)
        if w == 0:
            continue
        if value is None:
            if strict:
                raise ValueError(f"metric {name!r} is undefined")
            log.warning("metric %s undefined; imputed at training mean", name)
            continue
        q += w * (s * float(value) - mean) / sd
    return -q


def report_matrix(reports, metric_names=METRIC_NAMES):
    """Stack reports into a matrix, dropping metric columns that are undefined anywhere.

    Returns ``(matrix, kept_names, dropped_names)``.
    """
    reports = list(reports)
    kept = [n for n in metric_names if all(_metric(r, n) is not None for r in reports)]
    dropped = [n for n in metric_names if n not in kept]
    matrix = np.array([[float(_metric(r, n)) for n in kept] for r in reports], dtype=np.float64)
    return matrix.reshape(len(reports), len(kept)), tuple(kept), tuple(dropped)
