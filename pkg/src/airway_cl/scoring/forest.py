"""Bagged CART regression forest with reproducible randomness.

Tree ``t`` of a forest fitted with ``seed`` draws from the stream
``derive(seed, "tree", t)``: first ``n`` bootstrap indices
(``randbelow(n)`` each, when bagging), then, for every node in pre-order
(left subtree before right), a feature subset via ``sample(range(p), mtry)``.
Splits maximize the variance reduction ``S_L^2/n_L + S_R^2/n_R`` (on
node-centred targets), scanning candidate features in sampled order and
thresholds in ascending order, keeping the first maximum. Thresholds are
midpoints between consecutive distinct values; ``x <= threshold`` goes left.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from ..rng import Stream

FORMAT = "airway-cl-forest"
VERSION = 1


@dataclass(frozen=True)
class ForestParams:
    n_trees: int = 200
    max_depth: int | None = 16
    min_leaf: int = 2
    max_features: int | None = None  # None -> ceil(p / 3)
    bootstrap: bool = True

    def mtry(self, p: int) -> int:
        if self.max_features is None:
            return max(1, math.ceil(p / 3))
        return max(1, min(int(self.max_features), p))


@dataclass(eq=False)
class RegressionTree:
    feature: np.ndarray  # -1 marks a leaf
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(X)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            f = self.feature[node]
            active = f >= 0
            if not active.any():
                return self.value[node]
            rows = np.flatnonzero(active)
            go_left = X[rows, f[rows]] <= self.threshold[node[rows]]
            node[rows] = np.where(go_left, self.left[node[rows]], self.right[node[rows]])

    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def to_dict(self) -> dict:
        return {
            "feature": [int(v) for v in self.feature],
            "threshold": [float(v) for v in self.threshold],
            "left": [int(v) for v in self.left],
            "right": [int(v) for v in self.right],
            "value": [float(v) for v in self.value],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> RegressionTree:
        return cls(
            np.asarray(doc["feature"], dtype=np.int64),
            np.asarray(doc["threshold"], dtype=np.float64),
            np.asarray(doc["left"], dtype=np.int64),
            np.asarray(doc["right"], dtype=np.int64),
            np.asarray(doc["value"], dtype=np.float64),
        )


@dataclass(eq=False)
class ForestModel:
    trees: list[RegressionTree]
    n_features: int
    params: ForestParams
    seed: int
    oob_r2: float | None = None
    feature_names: tuple[str, ...] = ()
    flags: tuple[str, ...] = ()
    extra: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        single = X.ndim == 1
        X = np.atleast_2d(X)
        if X.shape[1] != self.n_features:
            raise ValueError(f"expected {self.n_features} features, got {X.shape[1]}")
        out = np.mean([t.predict(X) for t in self.trees], axis=0)
        return out[0] if single else out

    def to_json(self) -> str:
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "params": asdict(self.params),
            "seed": int(self.seed),
            "n_features": int(self.n_features),
            "feature_names": list(self.feature_names),
            "oob_r2": self.oob_r2,
            "flags": list(self.flags),
            "extra": self.extra,
            "trees": [t.to_dict() for t in self.trees],
        }
        return json.dumps(doc, separators=(",", ":")) + "\n"

    @classmethod
    def from_json(cls, text: str) -> ForestModel:
        doc = json.loads(text)
        if doc.get("format") != FORMAT:
            raise ValueError("not a forest model document")
        if doc.get("version") != VERSION:
            raise ValueError(f"unsupported forest model version {doc.get('version')}")
        trees = [RegressionTree.from_dict(t) for t in doc["trees"]]
        model = cls(
            trees,
            int(doc["n_features"]),
            ForestParams(**doc["params"]),
            int(doc["seed"]),
            doc.get("oob_r2"),
            tuple(doc.get("feature_names", ())),
            tuple(doc.get("flags", ())),
            doc.get("extra", {}),
        )
        for t in trees:
            if (t.feature >= model.n_features).any():
                raise ValueError("tree split refers to a feature beyond n_features")
        return model


class _Grower:
    def __init__(self, X, y, params: ForestParams, stream: Stream):
        self.X, self.y = X, y
        self.min_leaf = max(1, params.min_leaf)
        self.max_depth = params.max_depth
        self.mtry = params.mtry(X.shape[1])
        self.stream = stream
        self.feature, self.threshold, self.left, self.right, self.value = [], [], [], [], []

    def _new(self, value: float) -> int:
        self.feature.append(-1)
        self.threshold.append(0.0)
        self.left.append(-1)
        self.right.append(-1)
        self.value.append(value)
        return len(self.value) - 1

    def grow(self, idx: np.ndarray, depth: int = 0) -> int:
        ys = self.y[idx]
        node = self._new(float(ys.mean()))
        n = len(idx)
        if n < 2 * self.min_leaf or (self.max_depth is not None and depth >= self.max_depth):
            return node
        if np.all(ys == ys[0]):
            return node
        split = self._best_split(idx, ys)
        if split is None:
            return node
        f, thr, mask = split
        self.feature[node] = f
        self.threshold[node] = thr
        self.left[node] = self.grow(idx[mask], depth + 1)
        self.right[node] = self.grow(idx[~mask], depth + 1)
        return node

    def _best_split(self, idx, ys):
        n = len(idx)
        feats = np.array(self.stream.sample(range(self.X.shape[1]), self.mtry))
        xs = self.X[np.ix_(idx, feats)]
        order = np.argsort(xs, axis=0, kind="stable")
        xs = np.take_along_axis(xs, order, axis=0)
        yc = (ys - ys.mean())[order]
        csum = np.cumsum(yc, axis=0)[:-1]
        total = csum[-1] + yc[-1] if n > 1 else 0.0
        nl = np.arange(1, n, dtype=np.float64)[:, None]
        nr = n - nl
        gain = csum**2 / nl + (total - csum) ** 2 / nr
        valid = (xs[1:] > xs[:-1]) & (nl >= self.min_leaf) & (nr >= self.min_leaf)
        gain = np.where(valid, gain, -np.inf).T  # (mtry, n-1): feature-major for tie order
        flat = int(np.argmax(gain))
        j, k = divmod(flat, n - 1)
        best = gain[j, k]
        sse = float(np.sum(yc**2))
        if not np.isfinite(best) or best <= 1e-12 * max(sse, 1e-300):
            return None
        lo, hi = xs[k, j], xs[k + 1, j]
        thr = lo + (hi - lo) / 2.0
        if not lo <= thr < hi:
            thr = lo
        f = int(feats[j])
        return f, float(thr), self.X[idx, f] <= thr

    def tree(self) -> RegressionTree:
        return RegressionTree(
            np.asarray(self.feature, dtype=np.int64),
            np.asarray(self.threshold, dtype=np.float64),
            np.asarray(self.left, dtype=np.int64),
            np.asarray(self.right, dtype=np.int64),
            np.asarray(self.value, dtype=np.float64),
        )


def _fit_tree(X, y, params: ForestParams, seed: int, t: int):
    stream = Stream.from_seed(seed, "tree", t)
    n = len(y)
    if params.bootstrap:
        idx = np.array([stream.randbelow(n) for _ in range(n)], dtype=np.int64)
    else:
        idx = np.arange(n)
    g = _Grower(X, y, params, stream)
    g.grow(idx)
    return g.tree(), np.bincount(idx, minlength=n)


def fit_forest(features, targets, params: ForestParams | None = None, seed: int = 0,
               n_jobs: int = 1, feature_names=None) -> ForestModel:
    """Fit a regression forest on ``features`` (FeatureTable or array) against ``targets``.

    Serial and threaded fits (``n_jobs > 1``) produce identical trees.
    """
    params = params or ForestParams()
    if hasattr(features, "matrix"):
        if feature_names is None:
            feature_names = tuple(features.columns)
        features = features.matrix
    X = np.asarray(features, dtype=np.float64)
    y = np.asarray(targets, dtype=np.float64).ravel()
    if X.ndim != 2:
        raise ValueError("features must be a 2D matrix")
    if len(X) != len(y):
        raise ValueError(f"{len(X)} feature rows but {len(y)} targets")
    if len(y) < 5:
        raise ValueError(f"need at least 5 samples to fit a forest, got {len(y)}")
    if not (np.isfinite(X).all() and np.isfinite(y).all()):
        raise ValueError("features and targets must be finite")
    if params.n_trees < 1:
        raise ValueError("n_trees must be >= 1")

    flags = ()
    if np.all(y == y[0]):
        flags = ("constant_target",)

    def job(t):
        return _fit_tree(X, y, params, seed, t)

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            fitted = list(pool.map(job, range(params.n_trees)))
    else:
        fitted = [job(t) for t in range(params.n_trees)]
    trees = [tree for tree, _ in fitted]

    oob_r2 = None
    if params.bootstrap:
        acc = np.zeros(len(y))
        hits = np.zeros(len(y))
        for tree, counts in fitted:
            out = counts == 0
            if out.any():
                acc[out] += tree.predict(X[out])
                hits[out] += 1
        seen = hits > 0
        if seen.sum() >= 2:
            pred = acc[seen] / hits[seen]
            sst = float(np.sum((y[seen] - y[seen].mean()) ** 2))
            if sst > 0:
                oob_r2 = 1.0 - float(np.sum((y[seen] - pred) ** 2)) / sst

    return ForestModel(trees, X.shape[1], params, int(seed), oob_r2, tuple(feature_names or ()), flags)


def predict_score(model: ForestModel, x) -> float:
    """Forest prediction (mean leaf value over trees) for one feature vector."""
    if hasattr(x, "as_array"):
        x = x.as_array()
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_features,):
        raise ValueError(f"expected {model.n_features} features, got shape {x.shape}")
    return float(model.predict(x))
