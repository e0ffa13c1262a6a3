"""Centerlines and branch structure of binary airway masks.

The pipeline is ``distance_transform`` + ``skeletonize`` -> ``build_graph``.
Graph construction classifies skeleton voxels by their 26-neighbour count
(1 endpoint, 2 interior, >= 3 junction), merges touching junction voxels
into one node, traces node-to-node paths as branches and prunes one-step
spurs once.
"""

from __future__ import annotations

import itertools
import json
import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from skimage.morphology import skeletonize as _lee_skeletonize

from .volume_io import Mask3D

Voxel = tuple[int, int, int]

_OFFSETS = [d for d in itertools.product((-1, 0, 1), repeat=3) if d != (0, 0, 0)]
_STRUCTURES = {6: 1, 18: 2, 26: 3}


@dataclass(frozen=True, eq=False)
class DistanceField:
    """Per-voxel Euclidean distance (mm) to the nearest background voxel."""

    data: np.ndarray
    spacing: tuple[float, float, float]

    @property
    def dims(self):
        return tuple(self.data.shape)


@dataclass(frozen=True)
class Node:
    id: int
    voxel: Voxel
    kind: str  # "endpoint" | "bifurcation"
    cluster: tuple[Voxel, ...] = ()


@dataclass(frozen=True)
class Branch:
    id: int
    path: tuple[Voxel, ...]
    length_mm: float
    mean_diameter_mm: float
    endpoints: tuple[int, int]

    def centroid_mm(self, spacing) -> np.ndarray:
        return np.asarray(self.path, dtype=np.float64).mean(axis=0) * np.asarray(spacing)


@dataclass
class SkeletonGraph:
    nodes: list[Node]
    branches: list[Branch]
    voxel_map: dict[Voxel, int]
    spacing: tuple[float, float, float]
    dims: tuple[int, int, int]
    node_map: dict[Voxel, int] = field(default_factory=dict)

    def voxels(self) -> np.ndarray:
        """All skeleton voxels covered by the graph, as an (n, 3) int array in linear order."""
        vox = set(self.voxel_map) | set(self.node_map)
        if not vox:
            return np.zeros((0, 3), dtype=np.int64)
        return np.array(sorted(vox, key=lambda v: _lin(v, self.dims)), dtype=np.int64)

    def degree(self, node_id: int) -> int:
        return sum((b.endpoints[0] == node_id) + (b.endpoints[1] == node_id) for b in self.branches)

    def to_json(self) -> str:
        doc = {
            "spacing": list(self.spacing),
            "dims": list(self.dims),
            "nodes": [{"id": n.id, "voxel": list(n.voxel), "kind": n.kind} for n in self.nodes],
            "branches": [
                {
                    "id": b.id,
                    "endpoints": list(b.endpoints),
                    "length_mm": b.length_mm,
                    "mean_diameter_mm": b.mean_diameter_mm,
                    "n_voxels": len(b.path),
                }
                for b in self.branches
            ],
            "tree_length_mm": tree_length(self),
        }
        return json.dumps(doc, indent=2)


def _lin(v: Voxel, dims) -> int:
    return v[0] + dims[0] * (v[1] + dims[1] * v[2])


def distance_transform(mask: Mask3D) -> DistanceField:
    """Exact anisotropic Euclidean distance transform of the foreground.

    Voxels beyond the volume border count as background, so a mask touching
    the border is measured as if it were embedded in empty space.
    """
    data = np.asarray(mask.data)
    if not data.any():
        return DistanceField(np.zeros(data.shape), mask.spacing)
    padded = np.pad(data, 1, mode="constant", constant_values=False)
    dist = ndimage.distance_transform_edt(padded, sampling=mask.spacing)
    return DistanceField(dist[1:-1, 1:-1, 1:-1].astype(np.float64), mask.spacing)


def skeletonize(mask: Mask3D) -> Mask3D:
    """Topology-preserving 3D thinning (Lee-Kashyap-Chu directional sweeps).

    The sweeps can erase a small solid blob (e.g. a 2x2x2 cube) entirely;
    such a component is restored as its single deepest voxel (ties to the
    smallest linear index) so that no component disappears.
    """
    data = np.asarray(mask.data)
    if not data.any():
        return Mask3D(np.zeros(data.shape, dtype=bool), mask.spacing, mask.affine)
    skel = _lee_skeletonize(data) > 0
    labels, n = ndimage.label(data, structure=np.ones((3, 3, 3), dtype=bool))
    kept = np.unique(labels[skel])
    lost = np.setdiff1d(np.arange(1, n + 1), kept)
    if lost.size:
        depth = distance_transform(mask).data
        lin = np.arange(data.size).reshape(data.shape, order="F")
        for lab in lost:
            where = labels == lab
            deepest = where & (depth == depth[where].max())
            skel[np.unravel_index(int(lin[deepest].min()), data.shape, order="F")] = True
    return Mask3D(skel, mask.spacing, mask.affine)


def largest_component(mask: Mask3D, connectivity: int = 26) -> Mask3D:
    """Keep the biggest connected component; ties go to the smallest linear voxel index."""
    if connectivity not in _STRUCTURES:
        raise ValueError("connectivity must be 6, 18 or 26")
    data = np.asarray(mask.data)
    structure = ndimage.generate_binary_structure(3, _STRUCTURES[connectivity])
    labels, n = ndimage.label(data, structure=structure)
    if n <= 1:
        return Mask3D(data.copy(), mask.spacing, mask.affine)
    sizes = np.bincount(labels.ravel())[1:]
    candidates = np.flatnonzero(sizes == sizes.max()) + 1
    if len(candidates) > 1:
        lin = np.arange(data.size).reshape(data.shape, order="F")
        firsts = ndimage.minimum(lin, labels, index=candidates)
        keep = candidates[int(np.argmin(firsts))]
    else:
        keep = candidates[0]
    return Mask3D(labels == keep, mask.spacing, mask.affine)


# ------------------------------------------------------------ graph building


class _Builder:
    def __init__(self, voxels: set[Voxel], dist: np.ndarray, spacing, dims):
        self.vox = voxels
        self.dist = dist
        self.spacing = np.asarray(spacing, dtype=np.float64)
        self.dims = dims
        self.key = lambda v: _lin(v, dims)

    def neighbors(self, v: Voxel) -> list[Voxel]:
        x, y, z = v
        out = [(x + dx, y + dy, z + dz) for dx, dy, dz in _OFFSETS]
        return sorted((n for n in out if n in self.vox), key=self.key)

    def step_mm(self, a: Voxel, b: Voxel) -> float:
        d = (np.subtract(b, a)) * self.spacing
        return math.sqrt(float(d @ d))

    def path_length_mm(self, path) -> float:
        return math.fsum(self.step_mm(a, b) for a, b in zip(path, path[1:]))

    def trace(self):
        """Return raw nodes (clusters) and branches as (path, start_node, end_node)."""
        count = {v: len(self.neighbors(v)) for v in self.vox}
        self.vox = {v for v in self.vox if count[v] > 0}
        junction = {v for v in self.vox if count[v] >= 3}
        ends = sorted((v for v in self.vox if count[v] == 1), key=self.key)

        clusters: list[list[Voxel]] = []
        seen: set[Voxel] = set()
        for v in sorted(junction, key=self.key):
            if v in seen:
                continue
            comp, queue = [], deque([v])
            seen.add(v)
            while queue:
                u = queue.popleft()
                comp.append(u)
                for n in self.neighbors(u):
                    if n in junction and n not in seen:
                        seen.add(n)
                        queue.append(n)
            clusters.append(sorted(comp, key=self.key))
        clusters += [[v] for v in ends]

        node_of: dict[Voxel, int] = {}
        for i, comp in enumerate(clusters):
            for v in comp:
                node_of[v] = i

        branches = []
        assigned: set[Voxel] = set()
        edges: set[frozenset] = set()
        for i, comp in enumerate(clusters):
            for c in comp:
                for n in self.neighbors(c):
                    if n in node_of:
                        if node_of[n] == i:
                            continue
                        key = frozenset((c, n))
                        if key in edges:
                            continue
                        edges.add(key)
                        branches.append(([c, n], i, node_of[n]))
                        continue
                    if n in assigned:
                        continue
                    path, prev, cur = [c, n], c, n
                    assigned.add(n)
                    while True:
                        nxt = [m for m in self.neighbors(cur) if m != prev][0]
                        path.append(nxt)
                        if nxt in node_of:
                            break
                        assigned.add(nxt)
                        prev, cur = cur, nxt
                    branches.append((path, i, node_of[path[-1]]))

        # closed rings without any junction: anchor at their first voxel
        rest = sorted((v for v in self.vox if v not in assigned and v not in node_of), key=self.key)
        for v in rest:
            if v in assigned:
                continue
            i = len(clusters)
            clusters.append([v])
            node_of[v] = i
            path, prev, cur = [v], None, v
            assigned.add(v)
            while True:
                nbrs = [m for m in self.neighbors(cur) if m != prev]
                nxt = nbrs[0]
                path.append(nxt)
                if nxt == v:
                    break
                assigned.add(nxt)
                prev, cur = cur, nxt
            branches.append((path, i, i))
        return clusters, branches

    def finalize(self, clusters, branches) -> SkeletonGraph:
        recs = [{"path": list(p), "s": s, "e": e, "extra": []} for p, s, e in branches]
        clusters = [list(c) for c in clusters]
        # a junction cluster left with two incident branches is a kink, not a node
        changed = True
        while changed:
            changed = False
            for i, comp in enumerate(clusters):
                if not comp:
                    continue
                inc = [r for r in recs if i in (r["s"], r["e"])]
                if len(inc) != 2 or any(r["s"] == r["e"] for r in inc):
                    continue
                a, b = inc
                pa = a["path"] if a["e"] == i else a["path"][::-1]
                pb = b["path"] if b["s"] == i else b["path"][::-1]
                if pa[-1] == pb[0]:
                    merged = pa + pb[1:]
                else:
                    merged = pa + self._cluster_path(comp, pa[-1], pb[0])[1:-1] + pb
                on_path = set(merged)
                rec = {
                    "path": merged,
                    "s": a["s"] if a["e"] == i else a["e"],
                    "e": b["e"] if b["s"] == i else b["s"],
                    "extra": a["extra"] + b["extra"] + [v for v in comp if v not in on_path],
                }
                recs = [r for r in recs if r is not a and r is not b] + [rec]
                clusters[i] = []
                changed = True
        recs.sort(key=lambda r: (min(self.key(r["path"][0]), self.key(r["path"][-1])), self.key(r["path"][1])))

        degree = {i: 0 for i in range(len(clusters))}
        for r in recs:
            degree[r["s"]] += 1
            degree[r["e"]] += 1
        keep = [i for i, comp in enumerate(clusters) if comp and degree[i] > 0]
        reps = {i: self._representative(clusters[i]) for i in keep}
        keep.sort(key=lambda i: self.key(reps[i]))
        renum = {old: new for new, old in enumerate(keep)}
        nodes = [
            Node(renum[i], reps[i], "endpoint" if degree[i] == 1 else "bifurcation", tuple(clusters[i]))
            for i in keep
        ]
        node_map = {v: n.id for n in nodes for v in n.cluster}

        out, voxel_map = [], {}
        for k, r in enumerate(recs):
            path = r["path"]
            d = np.array([self.dist[v] for v in path])
            out.append(
                Branch(k, tuple(path), self.path_length_mm(path), 2.0 * float(d.mean()), (renum[r["s"]], renum[r["e"]]))
            )
            for v in path + r["extra"]:
                if v not in node_map:
                    voxel_map.setdefault(v, k)
        return SkeletonGraph(nodes, out, voxel_map, tuple(self.spacing.tolist()), self.dims, node_map)

    def _representative(self, comp: list[Voxel]) -> Voxel:
        if len(comp) == 1:
            return comp[0]
        centroid = np.asarray(comp, dtype=np.float64).mean(axis=0)
        return min(comp, key=lambda v: (float(np.sum((np.asarray(v) - centroid) ** 2)), self.key(v)))

    def _cluster_path(self, comp, a: Voxel, b: Voxel) -> list[Voxel]:
        members = set(comp) | {a, b}
        prev = {a: None}
        queue = deque([a])
        while queue:
            u = queue.popleft()
            if u == b:
                break
            for n in self.neighbors(u):
                if n in members and n not in prev:
                    prev[n] = u
                    queue.append(n)
        path = [b]
        while prev.get(path[-1]) is not None:
            path.append(prev[path[-1]])
        return path[::-1]


def _spurs(builder: _Builder, clusters, branches) -> set[Voxel]:
    degree: dict[int, int] = {}
    for _, s, e in branches:
        degree[s] = degree.get(s, 0) + 1
        degree[e] = degree.get(e, 0) + 1
    unit = _Builder(set(), None, (1.0, 1.0, 1.0), builder.dims)
    drop: set[Voxel] = set()
    for path, s, e in branches:
        if s == e:
            continue
        if unit.path_length_mm(path) >= 2.0:
            continue
        kinds = (degree[s], degree[e])
        if 1 in kinds and max(kinds) >= 3:
            tip = path[-1] if degree[e] == 1 else path[0]
            drop.add(tip)
            drop.update(v for v in path[1:-1])
    return drop


def build_graph(skeleton: Mask3D, dist: DistanceField, prune_spurs: bool = True) -> SkeletonGraph:
    """Decompose a thin skeleton into nodes and branches.

    Branch length is the physical arc length along the voxel path and the
    diameter is twice the mean distance-field value over the path. Spurs
    (endpoint-to-junction branches shorter than two voxel units) are removed
    in a single pass before the final graph is traced. Isolated single
    voxels carry no branch and are left out.
    """
    data = np.asarray(skeleton.data)
    dims = tuple(int(d) for d in data.shape)
    voxels = {tuple(int(c) for c in v) for v in np.argwhere(data)}
    builder = _Builder(voxels, dist.data, skeleton.spacing, dims)
    clusters, branches = builder.trace()
    if prune_spurs:
        drop = _spurs(builder, clusters, branches)
        if drop:
            builder = _Builder(builder.vox - drop, dist.data, skeleton.spacing, dims)
            clusters, branches = builder.trace()
    return builder.finalize(clusters, branches)


def tree_length(graph: SkeletonGraph) -> float:
    """Total centerline length (mm): the sum of branch lengths."""
    return math.fsum(b.length_mm for b in graph.branches)


def centerline_graph(mask: Mask3D) -> SkeletonGraph:
    """Skeletonize ``mask`` and build its branch graph in one call."""
    return build_graph(skeletonize(mask), distance_transform(mask))
