import json

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from airway_cl.curriculum import STRATEGIES, apply_overlap, compose, partition
from airway_cl.schedule import ManifestError, Schedule, emit, load_schedule
from airway_cl.scoring import rank

from oracles import batch_sizes, phase_sizes_with_overlap

# Frozen oracle outputs (exact rational arithmetic in oracles.py).
SIZES_254 = (38, 101, 115)
PHASES_100 = (15, 46, 52)


def table(n, prefix="s"):
    return rank([(f"{prefix}{i:04d}", i / max(n, 1)) for i in range(n)])


def test_oracle_frozen_values():
    assert batch_sizes(254) == SIZES_254
    assert batch_sizes(100) == (15, 40, 45)
    assert batch_sizes(3) == (1, 1, 1)
    assert phase_sizes_with_overlap(100) == PHASES_100


@pytest.mark.parametrize("n", [3, 7, 100, 254, 255, 1000])
def test_partition_sizes(n):
    assert tuple(map(len, partition(table(n)))) == batch_sizes(n)


@given(st.integers(3, 600))
@settings(max_examples=150, deadline=None)
def test_partition_is_contiguous_partition(n):
    t = table(n)
    batches = partition(t)
    assert [i for b in batches for i in b] == t.ids
    assert tuple(map(len, batches)) == batch_sizes(n)


def test_partition_errors():
    with pytest.raises(ValueError):
        partition(table(10), (0.5, 0.6))
    with pytest.raises(ValueError):
        partition(table(10), (0.5, -0.1, 0.6))
    with pytest.raises(ValueError):
        partition(table(2))


def test_overlap_sizes_and_clamp():
    batches = partition(table(100))
    assert tuple(map(len, apply_overlap(batches, 0.15, 0))) == PHASES_100
    assert apply_overlap(batches, 0.0, 0) == [list(b) for b in batches]
    small = [["a"], ["b", "c", "d", "e", "f", "g", "h", "i", "j", "k"]]
    assert apply_overlap(small, 0.5, 0)[1][-1:] == ["a"]


@given(st.integers(3, 400), st.sampled_from(STRATEGIES), st.integers(0, 1000))
@settings(max_examples=120, deadline=None)
def test_schedule_invariants(n, strategy, seed):
    t = table(n)
    s = compose(t, strategy, seed=seed)
    pos = {i: k for k, i in enumerate(t.ids)}
    assert s.all_ids() == set(t.ids)
    assert s.total_epochs == 200
    assert s.score_digest == t.digest()
    for ph in s.phases:
        assert len(set(ph.scan_ids)) == len(ph.scan_ids)
    if strategy == "no_cl":
        assert len(s.phases) == 1 and sorted(s.phases[0].scan_ids) == sorted(t.ids)
        return
    cores = [ph.core_ids for ph in s.phases]
    assert sorted(i for c in cores for i in c) == sorted(t.ids)
    vanilla_cores = partition(t)
    order = vanilla_cores[::-1] if strategy == "reverse" else vanilla_cores
    assert [sorted(c) for c in cores] == [sorted(c) for c in order]
    assert [ph.epochs for ph in s.phases] == [20, 70, 110]
    for k, ph in enumerate(s.phases):
        earlier = {i for c in cores[:k] for i in c}
        assert set(ph.overlap_ids) <= earlier
        if strategy == "mixed":
            hardest = max(pos[i] for i in ph.core_ids)
            assert all(pos[i] > hardest for i in ph.mixed_ids)
            if k == len(s.phases) - 1:
                assert ph.mixed_ids == ()
    if strategy == "vanilla":
        for a, b in zip(cores, cores[1:]):
            assert max(t.score_of(i) for i in a) <= min(t.score_of(i) for i in b)


def test_vanilla_100_example():
    s = compose(table(100), "vanilla", seed=3)
    assert [len(p.scan_ids) for p in s.phases] == list(PHASES_100)
    assert sorted(s.phases[0].scan_ids) == table(100).ids[:15]


def test_mixed_counts():
    s = compose(table(100), "mixed", seed=0)
    assert [len(p.mixed_ids) for p in s.phases] == [3, 7, 0]  # ceil(.15*15), ceil(.15*46)


def test_no_cl_single_phase():
    s = compose(table(100), "no_cl", seed=0)
    assert len(s.phases) == 1 and len(s.phases[0].scan_ids) == 100 and s.phases[0].epochs == 200


def test_seed_changes_only_sampling():
    a, b = compose(table(60), "vanilla", seed=1), compose(table(60), "vanilla", seed=2)
    assert [sorted(p.core_ids) for p in a.phases] == [sorted(p.core_ids) for p in b.phases]
    assert a.to_json() != b.to_json()
    assert a.to_json() == compose(table(60), "vanilla", seed=1).to_json()


def test_compose_errors():
    with pytest.raises(ValueError, match="strategy"):
        compose(table(10), "random")
    with pytest.raises(ValueError):
        compose(table(10), "vanilla", epochs=(10, 10))


# ----------------------------------------------------------------- manifest


def test_manifest_roundtrip(tmp_path):
    t = table(40)
    for strategy in STRATEGIES:
        s = compose(t, strategy, seed=9)
        path = emit(s, tmp_path / f"{strategy}.json")
        back = load_schedule(path, t)
        assert back == s
        assert back.to_json() == path.read_text()


def test_manifest_digest_verification(tmp_path):
    t = table(40)
    path = emit(compose(t, "vanilla"), tmp_path / "m.json")
    with pytest.raises(ManifestError, match="mismatch"):
        load_schedule(path, table(41))
    doc = json.loads(path.read_text())
    doc["score_digest"] = "xyz"
    path.write_text(json.dumps(doc))
    with pytest.raises(ManifestError, match="digest"):
        load_schedule(path)


def test_manifest_rejects_malformed():
    with pytest.raises(ManifestError):
        Schedule.from_json("{}")
    with pytest.raises(ManifestError, match="version"):
        Schedule.from_json(json.dumps({"version": 2}))
    bad = {"version": 1, "strategy": "x", "seed": 0, "score_digest": "0" * 16,
           "phases": [{"index": 0, "epochs": 1, "scan_ids": ["a", "a"]}]}
    with pytest.raises(ManifestError):
        Schedule.from_json(json.dumps(bad))
