import json

import numpy as np
import pytest

from airway_cl.phantom import (
    PhantomSpec,
    Segment,
    bifurcating_tree,
    generate_phantom,
    random_tree,
    simulate_prediction,
    straight_tube,
    synthetic_feature_matrix,
    write_phantom,
    y_phantom,
)


def test_tube_ground_truth():
    rec = straight_tube(radius=2.0, length=20.0).ground_truth()
    assert rec["branch_count"] == 1 and rec["total_length_mm"] == pytest.approx(20.0)
    assert rec["branch_radii_mm"] == [2.0] and rec["branch_lengths_mm"] == pytest.approx([20.0])


def test_tree_ground_truth_counts():
    assert bifurcating_tree(3).ground_truth()["branch_count"] == 7
    assert bifurcating_tree(4).ground_truth()["branch_count"] == 15
    assert y_phantom().ground_truth()["branch_count"] == 3


def test_segments_must_fit():
    with pytest.raises(ValueError, match="outside"):
        PhantomSpec((Segment((1.0, 5.0, 5.0), (5.0, 5.0, 5.0), 2.0),), (10, 10, 10))
    with pytest.raises(ValueError, match="radius"):
        PhantomSpec((Segment((5.0, 5.0, 5.0), (6.0, 5.0, 5.0), 0.0),), (10, 10, 10))


def test_spec_dict_roundtrip():
    geometry = random_tree(3)
    assert PhantomSpec.from_dict(json.loads(json.dumps(geometry.to_dict()))) == geometry


def test_generated_volumes_consistent():
    ct, gt, lung, _ = generate_phantom(bifurcating_tree(2), 7)
    assert ct.dims == gt.dims == lung.dims
    assert not (gt.data & ~lung.data).any()
    assert np.median(ct.data[gt.data]) < -950
    assert -900 < np.median(ct.data[lung.data & ~gt.data]) < -800
    assert np.median(ct.data[~lung.data]) > 0
    assert (ct.data == np.round(ct.data)).all()


def test_same_seed_same_bytes(tmp_path):
    geometry = random_tree(1)
    pred = simulate_prediction(geometry, 1)
    write_phantom(tmp_path / "a", "c", geometry, 5, pred)
    write_phantom(tmp_path / "b", "c", geometry, 5, pred)
    for sub in ("ct/c.nii.gz", "gt/c.nii.gz", "lung/c.nii.gz", "pred/c.nii.gz", "truth/c.json"):
        assert (tmp_path / "a" / sub).read_bytes() == (tmp_path / "b" / sub).read_bytes()
    write_phantom(tmp_path / "d", "c", geometry, 6)
    assert (tmp_path / "a/ct/c.nii.gz").read_bytes() != (tmp_path / "d/ct/c.nii.gz").read_bytes()


def test_simulated_prediction_is_imperfect():
    geometry = bifurcating_tree(3)
    _, gt, _, _ = generate_phantom(geometry, 0)
    pred = simulate_prediction(geometry, 0)
    assert pred.shape == gt.dims
    assert (pred & ~gt.data).any() and (gt.data & ~pred).any()


def test_synthetic_feature_matrix_relations():
    X = synthetic_feature_matrix(50, 0)
    assert X.shape == (50, 109)
    np.testing.assert_allclose(X[:, 0], X[:, 4] * X[:, 5])
    np.testing.assert_allclose(X[:, 9:].sum(axis=1), 1.0)
    np.testing.assert_array_equal(X, synthetic_feature_matrix(50, 0))
