"""Score tables: ranking, bootstrapping score, histograms, CSV I/O."""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

PROVENANCES = ("bootstrap", "ml")


def bootstrap_score(iou: float) -> float:
    """Complexity of a scan from the IoU a baseline network reached on it: ``1 - iou``."""
    iou = float(iou)
    if not 0.0 <= iou <= 1.0:
        raise ValueError(f"IoU must lie in [0, 1], got {iou}")
    return 1.0 - iou


@dataclass(frozen=True)
class ScoreRow:
    id: str
    score: float
    rank: int


class ScoreTable:
    """Scans sorted by ascending complexity (rank 1 = easiest)."""

    def __init__(self, rows, provenance: str = "ml"):
        self.rows = tuple(rows)
        if provenance not in PROVENANCES:
            raise ValueError(f"provenance must be one of {PROVENANCES}")
        self.provenance = provenance
        if [r.rank for r in self.rows] != list(range(1, len(self.rows) + 1)):
            raise ValueError("ranks must run 1..n in row order")

    def __len__(self) -> int:
        return len(self.rows)

    @property
    def ids(self) -> list[str]:
        return [r.id for r in self.rows]

    @property
    def scores(self) -> np.ndarray:
        return np.array([r.score for r in self.rows], dtype=np.float64)

    def score_of(self, scan_id: str) -> float:
        for r in self.rows:
            if r.id == scan_id:
                return r.score
        raise KeyError(scan_id)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("id", "score", "rank"))
        for r in self.rows:
            w.writerow((r.id, repr(float(r.score)), r.rank))
        return buf.getvalue()

    def digest(self) -> str:
        """16-hex-digit BLAKE2b-64 of the canonical CSV bytes."""
        return hashlib.blake2b(self.to_csv().encode("utf-8"), digest_size=8).hexdigest()

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8")
        return path

    @classmethod
    def from_csv(cls, text: str, provenance: str = "ml") -> ScoreTable:
        reader = csv.DictReader(io.StringIO(text))
        missing = {"id", "score"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"score CSV lacks column(s): {sorted(missing)}")
        return rank([(rec["id"], float(rec["score"])) for rec in reader], provenance)

    @classmethod
    def read(cls, path, provenance: str = "ml") -> ScoreTable:
        return cls.from_csv(Path(path).read_text(encoding="utf-8"), provenance)


def rank(scores, provenance: str = "ml") -> ScoreTable:
    """Sort ``(id, score)`` pairs ascending by score, ties by id."""
    scores = [(str(i), float(s)) for i, s in scores]
    ids = [i for i, _ in scores]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate scan ids: {sorted({i for i in ids if ids.count(i) > 1})}")
    bad = [i for i, s in scores if not math.isfinite(s)]
    if bad:
        raise ValueError(f"non-finite scores for: {bad}")
    ordered = sorted(scores, key=lambda t: (t[1], t[0]))
    return ScoreTable([ScoreRow(i, s, k) for k, (i, s) in enumerate(ordered, start=1)], provenance)


@dataclass(frozen=True)
class ScoreHistogram:
    edges: np.ndarray
    counts: np.ndarray
    mean: float
    std: float

    def to_csv(self) -> str:
        lines = ["bin_lo,bin_hi,count"]
        for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
            lines.append(f"{float(lo)!r},{float(hi)!r},{int(c)}")
        return "\n".join(lines) + "\n"


def score_histogram(table: ScoreTable, bins: int = 20) -> ScoreHistogram:
    """Uniform bins over [min, max] (last bin closed); mean and population std."""
    if bins < 1:
        raise ValueError("bins must be >= 1")
    if len(table) == 0:
        raise ValueError("empty score table")
    s = table.scores
    lo, hi = float(s.min()), float(s.max())
    width = (hi - lo) / bins
    if width == 0:
        idx = np.zeros(len(s), dtype=np.int64)
        edges = np.full(bins + 1, lo)
    else:
        idx = np.minimum(np.floor((s - lo) / width).astype(np.int64), bins - 1)
        edges = lo + width * np.arange(bins + 1)
        edges[-1] = hi
    counts = np.bincount(idx, minlength=bins)
    return ScoreHistogram(edges, counts, float(s.mean()), float(s.std()))
