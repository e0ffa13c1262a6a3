import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from airway_cl.phantom import bifurcating_tree, generate_phantom, random_tree, straight_tube, y_phantom
from airway_cl.topology import (
    build_graph,
    centerline_graph,
    distance_transform,
    largest_component,
    skeletonize,
    tree_length,
)
from airway_cl.volume_io import Mask3D

from oracles import brute_distance_transform, count_components_26


def skeleton_mask(voxels, dims=(12, 12, 12)):
    a = np.zeros(dims, bool)
    for v in voxels:
        a[v] = True
    return Mask3D(a, (1, 1, 1))


def graph_of_skeleton(voxels, dims=(12, 12, 12), prune=True):
    sk = skeleton_mask(voxels, dims)
    dist = distance_transform(sk)
    return build_graph(sk, dist, prune_spurs=prune)


@given(
    hnp.arrays(np.bool_, st.tuples(*[st.integers(1, 7)] * 3)),
    st.tuples(*[st.sampled_from([0.5, 0.8, 1.0, 1.25, 2.0])] * 3),
)
@settings(max_examples=60, deadline=None)
def test_distance_transform_matches_brute_force(mask, spacing):
    got = distance_transform(Mask3D(mask, spacing)).data
    np.testing.assert_allclose(got, brute_distance_transform(mask, spacing), rtol=0, atol=1e-9)


def test_distance_transform_outside_counts_as_background():
    full = Mask3D(np.ones((5, 5, 5), bool), (1, 1, 1))
    d = distance_transform(full).data
    assert d[2, 2, 2] == 3.0 and d[0, 0, 0] == 1.0


def test_straight_line_graph():
    g = graph_of_skeleton([(2, 5, z) for z in range(1, 10)])
    assert len(g.branches) == 1
    assert g.branches[0].length_mm == pytest.approx(8.0)
    assert sorted(n.kind for n in g.nodes) == ["endpoint", "endpoint"]


def test_diagonal_steps_measured_in_mm():
    g = graph_of_skeleton([(i, i, i) for i in range(1, 6)])
    assert tree_length(g) == pytest.approx(4 * math.sqrt(3))


def test_anisotropic_step_length():
    sk = np.zeros((3, 3, 6), bool)
    sk[1, 1, :] = True
    m = Mask3D(sk, (0.6, 0.6, 1.5))
    g = build_graph(m, distance_transform(m))
    assert tree_length(g) == pytest.approx(5 * 1.5)


def test_t_junction_three_branches():
    vox = [(6, 6, z) for z in range(1, 7)] + [(6, y, 6) for y in range(1, 12)]
    g = graph_of_skeleton(vox)
    assert len(g.branches) == 3
    kinds = sorted(n.kind for n in g.nodes)
    assert kinds == ["bifurcation", "endpoint", "endpoint", "endpoint"]
    bif = next(n for n in g.nodes if n.kind == "bifurcation")
    assert g.degree(bif.id) == 3


def test_short_spur_pruned_once():
    vox = [(6, 6, z) for z in range(1, 11)] + [(6, 7, 5), (6, 8, 5)]
    g = graph_of_skeleton(vox)
    assert len(g.branches) == 1
    assert tree_length(g) == pytest.approx(9.0)
    assert not any(n.kind == "bifurcation" for n in g.nodes)


def test_spur_kept_without_pruning():
    vox = [(6, 6, z) for z in range(1, 11)] + [(6, 7, 5), (6, 8, 5)]
    assert len(graph_of_skeleton(vox, prune=False).branches) == 3


def test_isolated_voxel_dropped():
    g = graph_of_skeleton([(2, 2, 2)] + [(8, 8, z) for z in range(1, 6)])
    assert len(g.branches) == 1
    assert (2, 2, 2) not in set(map(tuple, g.voxels().tolist()))


def test_closed_ring_is_one_branch():
    ring = [(3, 3, 3), (3, 4, 3), (3, 5, 3), (4, 6, 3), (5, 6, 3), (6, 5, 3), (6, 4, 3), (6, 3, 3), (5, 2, 3), (4, 2, 3)]
    g = graph_of_skeleton(ring)
    assert len(g.branches) == 1
    assert g.branches[0].endpoints[0] == g.branches[0].endpoints[1]


def test_empty_mask_gives_empty_graph():
    g = centerline_graph(Mask3D(np.zeros((4, 4, 4), bool), (1, 1, 1)))
    assert g.branches == [] and tree_length(g) == 0.0 and len(g.voxels()) == 0


def test_branch_diameter_uses_distance_field():
    geometry = straight_tube(radius=3.0, length=20.0)
    _, gt, _, _ = generate_phantom(geometry, 0)
    g = centerline_graph(gt)
    assert g.branches[0].mean_diameter_mm == pytest.approx(6.0, rel=0.2)


def test_largest_component_ties_go_to_first_in_linear_order():
    a = np.zeros((6, 3, 3), bool)
    a[0, 0, 0] = a[1, 0, 0] = True
    a[4, 2, 2] = a[5, 2, 2] = True
    out = largest_component(Mask3D(a, (1, 1, 1))).data
    assert out[0, 0, 0] and not out[5, 2, 2]


def test_largest_component_connectivity():
    a = np.zeros((4, 4, 4), bool)
    a[0, 0, 0] = a[1, 1, 1] = a[2, 2, 2] = True  # 26-connected chain
    a[0, 3, 3] = a[0, 3, 2] = True  # 6-connected pair, apart from the chain
    assert largest_component(Mask3D(a, (1, 1, 1)), 26).count() == 3
    assert largest_component(Mask3D(a, (1, 1, 1)), 6).count() == 2


@given(hnp.arrays(np.bool_, st.tuples(*[st.integers(2, 7)] * 3)))
@settings(max_examples=150, deadline=None)
def test_skeleton_subset_and_components_preserved(mask):
    m = Mask3D(mask, (1, 1, 1))
    sk = skeletonize(m).data
    assert not (sk & ~mask).any()
    assert count_components_26(sk) == count_components_26(mask)


PHANTOMS = {
    "tube": straight_tube(),
    "y": y_phantom(),
    "tree": bifurcating_tree(3),
    "random": random_tree(4),
}


@pytest.mark.parametrize("name", sorted(PHANTOMS))
def test_phantom_skeleton_properties(name):
    _, gt, _, _ = generate_phantom(PHANTOMS[name], 0)
    sk = skeletonize(gt).data
    assert not (sk & ~gt.data).any()
    assert count_components_26(sk) == count_components_26(gt.data) == 1


def test_tube_length_within_five_percent():
    _, gt, _, rec = generate_phantom(straight_tube(radius=2.0, length=20.0), 0)
    g = centerline_graph(gt)
    assert len(g.branches) == 1
    assert abs(tree_length(g) - 20.0) <= 0.05 * 20.0
    assert rec["total_length_mm"] == pytest.approx(20.0)


def test_y_phantom_one_bifurcation():
    _, gt, _, _ = generate_phantom(y_phantom(), 0)
    g = centerline_graph(gt)
    assert len(g.branches) == 3
    assert sum(n.kind == "bifurcation" for n in g.nodes) == 1


def test_three_level_tree_seven_branches():
    _, gt, _, rec = generate_phantom(bifurcating_tree(3), 0)
    g = centerline_graph(gt)
    assert rec["branch_count"] == 7
    assert len(g.branches) == 7
    assert sum(n.kind == "bifurcation" for n in g.nodes) == 3
    assert abs(tree_length(g) - rec["total_length_mm"]) <= 0.1 * rec["total_length_mm"]


def test_graph_invariants_on_tree():
    _, gt, _, _ = generate_phantom(bifurcating_tree(3), 0)
    g = centerline_graph(gt)
    node_ids = {n.id for n in g.nodes}
    sk = skeletonize(largest_component(gt)).data
    for b in g.branches:
        assert set(b.endpoints) <= node_ids
        assert b.length_mm > 0 and b.mean_diameter_mm > 0
        for v in b.path:
            assert sk[v]
        steps = np.abs(np.diff(np.asarray(b.path), axis=0)).max(axis=1)
        assert (steps == 1).all()
    assert tree_length(g) == pytest.approx(math.fsum(b.length_mm for b in g.branches))


def test_graph_is_deterministic():
    _, gt, _, _ = generate_phantom(random_tree(2), 0)
    assert centerline_graph(gt).to_json() == centerline_graph(gt).to_json()
