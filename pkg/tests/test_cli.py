import csv
import io
import json

import numpy as np
import pytest

from airway_cl.cli import main
from airway_cl.features import FeatureTable
from airway_cl.metrics import METRIC_NAMES, MetricReport, reports_to_csv
from airway_cl.phantom import synthetic_feature_matrix
from airway_cl.schedule import load_schedule
from airway_cl.scoring import ForestModel, ScoreTable
from airway_cl.volume_io import Mask3D, save_nifti


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def cohort(tmp_path_factory):
    root = tmp_path_factory.mktemp("cohort")
    assert main(["phantom", "--preset", "random", "--count", "6", "--with-pred", "--seed", "2", "--out", str(root)]) == 0
    return root


def planted_tables(tmp_path, n=200, seed=0):
    """Feature CSV from the synthetic generator and metric CSV whose quality follows a feature function."""
    X = synthetic_feature_matrix(n, seed)
    ids = [f"p{i:03d}" for i in range(n)]
    FeatureTable(ids, X).write(tmp_path / "feats.csv")
    signal = np.log(X[:, 0])
    q = 0.4 + 0.55 * (signal - signal.min()) / (signal.max() - signal.min())
    rows = []
    for sid, v in zip(ids, q):
        vals = {n: float(v) for n in METRIC_NAMES}
        for name in ("fpr", "fnr", "volume_leakage", "centerline_leakage"):
            vals[name] = float(1 - v)
        vals["centerline_distance_mm"] = float(4 * (1 - v))
        vals["airway_size_mse_mm2"] = float(3 * (1 - v) ** 2)
        rows.append((sid, MetricReport.from_values(vals)))
    (tmp_path / "metrics.csv").write_text(reports_to_csv(rows))
    return tmp_path / "feats.csv", tmp_path / "metrics.csv"


# ------------------------------------------------------------------ phantom


def test_phantom_writes_lists_and_is_deterministic(tmp_path, capsys):
    for d in ("a", "b"):
        code, _, _ = run(capsys, "phantom", "--preset", "tree", "--count", "2", "--seed", "4", "--out", tmp_path / d)
        assert code == 0
    names = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert len(names) == 2 * 4 + 3
    for name in names:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    truth = json.loads((tmp_path / "a/truth/case_000.json").read_text())
    assert truth["branch_count"] == 7


def test_env_seed_default(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("AIRWAY_CL_SEED", "4")
    run(capsys, "phantom", "--preset", "random", "--out", tmp_path / "env")
    monkeypatch.delenv("AIRWAY_CL_SEED")
    run(capsys, "phantom", "--preset", "random", "--seed", "4", "--out", tmp_path / "flag")
    assert (tmp_path / "env/ct/case_000.nii.gz").read_bytes() == (tmp_path / "flag/ct/case_000.nii.gz").read_bytes()
    monkeypatch.setenv("AIRWAY_CL_SEED", "abc")
    assert run(capsys, "phantom", "--out", tmp_path / "bad")[0] == 2


# ------------------------------------------------------------------ extract


def test_extract_rows_in_input_order(cohort, tmp_path, capsys):
    code, _, _ = run(capsys, "extract", "--ct", cohort / "ct.txt", "--gt", cohort / "gt.txt",
                     "--lung", cohort / "lung.txt", "--out", tmp_path / "f1.csv", "--workers", "1")
    assert code == 0
    code, _, _ = run(capsys, "extract", "--ct", cohort / "ct.txt", "--gt", cohort / "gt.txt",
                     "--lung", cohort / "lung.txt", "--out", tmp_path / "f2.csv", "--workers", "3")
    assert code == 0
    assert (tmp_path / "f1.csv").read_bytes() == (tmp_path / "f2.csv").read_bytes()
    table = FeatureTable.read(tmp_path / "f1.csv")
    assert table.ids == [f"case_{i:03d}" for i in range(6)]


def test_extract_partial_failure(cohort, tmp_path, capsys):
    bad = tmp_path / "case_bad.nii.gz"
    bad.write_bytes(b"not a nifti file at all")
    cts = [cohort / "ct/case_000.nii.gz", bad, cohort / "ct/case_002.nii.gz"]
    gts = [cohort / "gt/case_000.nii.gz", cohort / "gt/case_001.nii.gz", cohort / "gt/case_002.nii.gz"]
    lungs = [cohort / "lung/case_000.nii.gz", cohort / "lung/case_001.nii.gz", cohort / "lung/case_002.nii.gz"]
    code, _, err = run(capsys, "extract", "--ct", *cts, "--gt", *gts, "--lung", *lungs,
                       "--out", tmp_path / "f.csv", "--workers", "1")
    assert code == 1
    assert "case_bad" in err
    assert FeatureTable.read(tmp_path / "f.csv").ids == ["case_000", "case_002"]


def test_extract_usage_errors(cohort, tmp_path, capsys):
    empty = tmp_path / "empty.txt"
    empty.write_text("")
    assert run(capsys, "extract", "--ct", empty, "--gt", empty, "--lung", empty, "--out", tmp_path / "x.csv")[0] == 2
    code, _, err = run(capsys, "extract", "--ct", cohort / "ct.txt", "--gt", cohort / "gt/case_000.nii.gz",
                       "--lung", cohort / "lung.txt", "--out", tmp_path / "x.csv")
    assert code == 2 and "aligned" in err
    assert run(capsys, "extract", "--out", tmp_path / "x.csv")[0] == 2


# ----------------------------------------------------------------- evaluate


def test_evaluate_perfect_predictions(cohort, tmp_path, capsys):
    code, out, _ = run(capsys, "evaluate", "--pred", cohort / "gt.txt", "--gt", cohort / "gt.txt",
                       "--out", tmp_path / "m.csv", "--json", tmp_path / "m.json", "--label", "self", "--workers", "2")
    assert code == 0
    assert "self | 100.00 | 100.00 | 100.00 | 100.00 | 100.00" in out
    assert len(json.loads((tmp_path / "m.json").read_text())) == 6


def test_evaluate_forgetting(cohort, tmp_path, capsys):
    run(capsys, "evaluate", "--pred", cohort / "pred.txt", "--gt", cohort / "gt.txt", "--out", tmp_path / "m.csv")
    code, out, _ = run(capsys, "evaluate", "--forgetting", tmp_path / "m.csv", tmp_path / "m.csv")
    assert code == 0 and "0.00" in out


def test_evaluate_dimension_mismatch_is_per_pair(cohort, tmp_path, capsys):
    odd = save_nifti(Mask3D(np.ones((3, 3, 3), bool), (1, 1, 1)), tmp_path / "case_000.nii.gz")
    code, _, err = run(capsys, "evaluate", "--pred", odd, cohort / "gt/case_001.nii.gz",
                       "--gt", cohort / "gt/case_000.nii.gz", cohort / "gt/case_001.nii.gz",
                       "--out", tmp_path / "m.csv", "--workers", "1")
    assert code == 1 and "case_000" in err and "dimension" in err
    rows = list(csv.DictReader(io.StringIO((tmp_path / "m.csv").read_text())))
    assert [r["id"] for r in rows] == ["case_001"]


# --------------------------------------------------------- train and score


def test_train_scorer_planted_target(tmp_path, capsys):
    feats, metrics = planted_tables(tmp_path)
    code, out, _ = run(capsys, "train-scorer", "--features", feats, "--metrics", metrics, "--seed", "3",
                       "--out", tmp_path / "model.json")
    assert code == 0
    oob = float(out.split("OOB R2: ")[1].split()[0])
    assert oob >= 0.9
    assert "composite weights" in out
    model = ForestModel.from_json((tmp_path / "model.json").read_text())
    assert model.extra["composite"]["metric_names"] == list(METRIC_NAMES)

    code, _, _ = run(capsys, "train-scorer", "--features", feats, "--metrics", metrics, "--seed", "3",
                     "--workers", "4", "--out", tmp_path / "model2.json")
    assert (tmp_path / "model.json").read_bytes() == (tmp_path / "model2.json").read_bytes()

    code, out, _ = run(capsys, "score", "--features", feats, "--model", tmp_path / "model.json",
                       "--out", tmp_path / "scores.csv", "--histogram", tmp_path / "hist.csv")
    assert code == 0
    scores = ScoreTable.read(tmp_path / "scores.csv")
    assert len(scores) == 200
    lengths = FeatureTable.read(feats)
    short = lengths.ids[int(np.argmin(lengths.matrix[:, 0]))]
    assert scores.ids.index(short) >= 180  # lowest planted quality, so among the most complex
    hist = (tmp_path / "hist.csv").read_text().splitlines()
    assert hist[0] == "bin_lo,bin_hi,count" and sum(int(l.split(",")[2]) for l in hist[1:]) == 200


def test_train_scorer_id_mismatch(tmp_path, capsys):
    feats, metrics = planted_tables(tmp_path, n=10)
    text = metrics.read_text().replace("p003,", "zz9,")
    metrics.write_text(text)
    code, _, err = run(capsys, "train-scorer", "--features", feats, "--metrics", metrics, "--out", tmp_path / "m.json")
    assert code == 2 and "p003" in err and "zz9" in err


def test_score_dimension_mismatch(tmp_path, capsys):
    feats, metrics = planted_tables(tmp_path, n=10)
    run(capsys, "train-scorer", "--features", feats, "--metrics", metrics, "--n-trees", "5", "--out", tmp_path / "m.json")
    doc = json.loads((tmp_path / "m.json").read_text())
    doc["n_features"] = 120
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    code, _, err = run(capsys, "score", "--features", feats, "--model", tmp_path / "bad.json", "--out", tmp_path / "s.csv")
    assert code == 2 and "120 features" in err


def test_score_bootstrap(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("id,iou\na,0.8043\nb,0.4386\nc,1.0\n")
    code, _, _ = run(capsys, "score", "--mode", "bootstrap", "--metrics", tmp_path / "m.csv", "--out", tmp_path / "s.csv")
    assert code == 0
    t = ScoreTable.read(tmp_path / "s.csv", "bootstrap")
    assert t.ids == ["c", "a", "b"]
    assert abs(t.score_of("a") - 0.1957) <= 1e-12 and abs(t.score_of("b") - 0.5614) <= 1e-12


def test_score_bootstrap_missing_column(tmp_path, capsys):
    (tmp_path / "m.csv").write_text("id,dice\na,0.8\n")
    code, _, err = run(capsys, "score", "--mode", "bootstrap", "--metrics", tmp_path / "m.csv", "--out", tmp_path / "s.csv")
    assert code == 2 and "'iou'" in err


# ------------------------------------------------------------------ compose


def write_scores(path, n, prefix="s"):
    path.write_text("id,score,rank\n" + "".join(f"{prefix}{i:03d},{i / n!r},{i + 1}\n" for i in range(n)))
    return path


def test_compose_vanilla_100(tmp_path, capsys):
    scores = write_scores(tmp_path / "s.csv", 100)
    code, out, _ = run(capsys, "compose", "--scores", scores, "--strategy", "vanilla", "--out", tmp_path / "v.json")
    assert code == 0
    s = load_schedule(tmp_path / "v.json", ScoreTable.read(scores))
    assert [len(p.scan_ids) for p in s.phases] == [15, 46, 52]
    assert [p.epochs for p in s.phases] == [20, 70, 110]
    assert "200 epochs" in out


def test_compose_reverse_mirrors_vanilla(tmp_path, capsys):
    scores = write_scores(tmp_path / "s.csv", 100)
    run(capsys, "compose", "--scores", scores, "--strategy", "vanilla", "--out", tmp_path / "v.json")
    run(capsys, "compose", "--scores", scores, "--strategy", "reverse", "--out", tmp_path / "r.json")
    v, r = load_schedule(tmp_path / "v.json"), load_schedule(tmp_path / "r.json")
    assert [sorted(p.core_ids) for p in r.phases] == [sorted(p.core_ids) for p in v.phases][::-1]


def test_compose_adapt_defaults(tmp_path, capsys):
    target = write_scores(tmp_path / "t.csv", 90, "t")
    source = write_scores(tmp_path / "src.csv", 60, "s")
    code, out, _ = run(capsys, "compose", "--mode", "adapt", "--target-scores", target, "--source-scores", source,
                       "--out", tmp_path / "a.json")
    assert code == 0
    s = load_schedule(tmp_path / "a.json")
    assert len(s.phases) == 35 and s.total_epochs == 175
    assert s.phases[0].domain_mix == (5, 0) and s.phases[-1].domain_mix == (0, 5)
    assert "5/0" in out


def test_compose_adapt_random(tmp_path, capsys):
    target = write_scores(tmp_path / "t.csv", 90, "t")
    code, _, _ = run(capsys, "compose", "--mode", "adapt", "--adapt-mode", "random", "--target-scores", target,
                     "--out", tmp_path / "a.json")
    s = load_schedule(tmp_path / "a.json")
    assert code == 0 and len(s.phases[0].scan_ids) == 20 and s.total_epochs == 80


def test_compose_invalid_params(tmp_path, capsys):
    scores = write_scores(tmp_path / "s.csv", 10)
    assert run(capsys, "compose", "--scores", scores, "--fractions", "0.5,0.6,0.1", "--out", tmp_path / "x.json")[0] == 2
    assert run(capsys, "compose", "--scores", scores, "--strategy", "sideways", "--out", tmp_path / "x.json")[0] == 2
    assert run(capsys, "compose", "--out", tmp_path / "x.json")[0] == 2
