"""Command-line entry point: ``airway-cl <command> ...``.

Commands: ``phantom``, ``extract``, ``evaluate``, ``train-scorer``,
``score``, ``compose``. Exit status is 0 when every item succeeded, 1 on
partial failure and 2 for usage or configuration errors. Seeds default to
the ``AIRWAY_CL_SEED`` environment variable, else 0. Any list argument that
ends in ``.txt`` is read as a manifest with one path per line (relative
paths resolve against the manifest's directory).
"""

from __future__ import annotations

import argparse
import csv
import io
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import adaptation, curriculum
from .features import FeatureTable, extract_features, feature_table
from .metrics import (
    FORGETTING_METRICS,
    METRIC_NAMES,
    TABLE_COLUMNS,
    full_report,
    forgetting_rate,
    read_reports,
    reports_to_csv,
    reports_to_json,
    table_row,
)
from .phantom import PhantomSpec, bifurcating_tree, random_tree, simulate_prediction, straight_tube, write_phantom, y_phantom
from .schedule import Schedule, emit
from .scoring import (
    ForestModel,
    ForestParams,
    bootstrap_score,
    composite_score,
    fit_composite_target,
    fit_forest,
    rank,
    report_matrix,
    score_histogram,
)
from .scoring.ranking import ScoreTable
from .volume_io import load_mask, load_volume, scan_id

log = logging.getLogger("airway_cl")

EXIT_OK, EXIT_PARTIAL, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    pass


def _default_seed() -> int:
    raw = os.environ.get("AIRWAY_CL_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"AIRWAY_CL_SEED must be an integer, got {raw!r}") from None


def expand_paths(items) -> list[Path]:
    out = []
    for item in items or ():
        p = Path(item)
        if p.suffix == ".txt":
            for line in p.read_text(encoding="utf-8").splitlines():
                line = line.strip()
                if line and not line.startswith("#"):
                    q = Path(line)
                    out.append(q if q.is_absolute() else p.parent / q)
        else:
            out.append(p)
    return out


def _unique_ids(paths) -> list[str]:
    ids = [scan_id(p) for p in paths]
    if len(set(ids)) != len(ids):
        raise UsageError(f"duplicate scan ids: {sorted({i for i in ids if ids.count(i) > 1})}")
    return ids


def _run_pool(func, items, workers: int):
    """Map ``func`` over ``items``, results in input order."""
    workers = max(1, workers or 1)
    if workers == 1 or len(items) <= 1:
        return [func(it) for it in items]
    with ProcessPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(func, items))


def _csv_list(text: str, cast=float) -> list:
    try:
        return [cast(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"cannot parse list {text!r}") from None


def _write(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


# ------------------------------------------------------------------ extract


def _extract_one(item):
    sid, ct_path, gt_path, lung_path = item
    try:
        fv = extract_features(load_volume(ct_path), load_mask(gt_path), load_mask(lung_path))
        return sid, fv, None
    except Exception as exc:  # reported per scan; the run continues
        return sid, None, f"{type(exc).__name__}: {exc}"


def cmd_extract(args) -> int:
    cts, gts, lungs = expand_paths(args.ct), expand_paths(args.gt), expand_paths(args.lung)
    if not cts:
        raise UsageError("no CT inputs given")
    if not len(cts) == len(gts) == len(lungs):
        raise UsageError(f"need aligned inputs: {len(cts)} CT, {len(gts)} GT, {len(lungs)} lung paths")
    ids = _unique_ids(cts)
    results = _run_pool(_extract_one, list(zip(ids, cts, gts, lungs)), args.workers)
    rows, failed = [], 0
    for sid, fv, err in results:
        if err is not None:
            failed += 1
            print(f"extract: {sid}: {err}", file=sys.stderr)
            continue
        if fv.degenerate:
            print(f"extract: {sid}: empty or branchless ground truth (topology features are 0)", file=sys.stderr)
        rows.append((sid, fv))
    feature_table(rows).write(args.out)
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return EXIT_PARTIAL if failed else EXIT_OK


# ----------------------------------------------------------------- evaluate


def _evaluate_one(item):
    sid, pred_path, gt_path, detect_frac = item
    try:
        return sid, full_report(load_mask(pred_path), load_mask(gt_path), detect_frac), None
    except Exception as exc:
        return sid, None, f"{type(exc).__name__}: {exc}"


def cmd_evaluate(args) -> int:
    if args.forgetting:
        before, after = (read_reports(p) for p in args.forgetting)
        b, a = dict(before), dict(after)
        if set(b) != set(a):
            raise UsageError(f"report CSVs cover different scans: {sorted(set(b) ^ set(a))}")
        ids = [sid for sid, _ in before]
        metrics = _csv_list(args.metrics, str) if args.metrics else FORGETTING_METRICS
        try:
            rate = forgetting_rate([b[i] for i in ids], [a[i] for i in ids], metrics)
        except (ValueError, KeyError) as exc:
            raise UsageError(str(exc)) from None
        print(f"forgetting rate over {len(ids)} scans ({', '.join(metrics)}): {rate:.2f}")
        return EXIT_OK

    preds, gts = expand_paths(args.pred), expand_paths(args.gt)
    if not preds:
        raise UsageError("no prediction inputs given")
    if len(preds) != len(gts):
        raise UsageError(f"need aligned inputs: {len(preds)} predictions, {len(gts)} ground truths")
    if not args.out:
        raise UsageError("--out is required")
    ids = _unique_ids(gts)
    results = _run_pool(_evaluate_one, [(i, p, g, args.detect_frac) for i, p, g in zip(ids, preds, gts)], args.workers)
    rows, failed = [], 0
    for sid, rep, err in results:
        if err is not None:
            failed += 1
            print(f"evaluate: {sid}: {err}", file=sys.stderr)
            continue
        rows.append((sid, rep))
    _write(args.out, reports_to_csv(rows))
    if args.json:
        _write(args.json, reports_to_json(rows))
    header = " | ".join(["experiment"] + [f"{label} (%)" for _, label in TABLE_COLUMNS])
    print(header)
    print(table_row(args.label, [r for _, r in rows]))
    return EXIT_PARTIAL if failed else EXIT_OK


# ------------------------------------------------------------- train-scorer


def cmd_train_scorer(args) -> int:
    table = FeatureTable.read(args.features)
    reports = dict(read_reports(args.metrics))
    fids, mids = set(table.ids), set(reports)
    if fids != mids:
        raise UsageError(
            "scan ids differ between features and metrics; "
            f"only in features: {sorted(fids - mids)}, only in metrics: {sorted(mids - fids)}"
        )
    names = _csv_list(args.metric_names, str) if args.metric_names else METRIC_NAMES
    unknown = [n for n in names if n not in METRIC_NAMES]
    if unknown:
        raise UsageError(f"unknown metric names: {unknown}")
    ordered = [reports[i] for i in table.ids]
    matrix, kept, dropped = report_matrix(ordered, names)
    if dropped:
        print(f"metrics undefined for some scans, left out of the composite: {', '.join(dropped)}")
    if len(table) < 5:
        raise UsageError(f"need at least 5 scans to train the scorer, got {len(table)}")
    try:
        composite = fit_composite_target(matrix, metric_names=kept)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    targets = np.array([composite_score(composite, r) for r in ordered])
    params = ForestParams(args.n_trees, args.max_depth if args.max_depth > 0 else None, args.min_leaf,
                          args.max_features, not args.no_bootstrap)
    model = fit_forest(table, targets, params, seed=args.seed, n_jobs=args.workers or 1)
    model.extra["composite"] = composite.to_dict()
    _write(args.out, model.to_json())

    print("composite weights (first principal component):")
    for name, w in zip(composite.metric_names, composite.weights):
        print(f"  {name:<24s} {w:.4f}")
    print(f"explained variance share: {composite.explained_variance:.4f}")
    print("OOB R2: " + ("undefined" if model.oob_r2 is None else f"{model.oob_r2:.4f}"))
    if model.flags:
        print(f"flags: {', '.join(model.flags)}")
    print(f"wrote model to {args.out}")
    return EXIT_OK


# -------------------------------------------------------------------- score


def cmd_score(args) -> int:
    if args.mode == "ml":
        if not (args.features and args.model):
            raise UsageError("ml mode needs --features and --model")
        table = FeatureTable.read(args.features)
        model = ForestModel.from_json(Path(args.model).read_text(encoding="utf-8"))
        if model.n_features != table.matrix.shape[1]:
            raise UsageError(f"model expects {model.n_features} features, table has {table.matrix.shape[1]}")
        preds = model.predict(table.matrix) if len(table) else np.zeros(0)
        scores = rank(zip(table.ids, preds.tolist()), "ml")
    else:
        if not args.metrics:
            raise UsageError("bootstrap mode needs --metrics (a CSV with id and IoU columns)")
        reader = csv.DictReader(io.StringIO(Path(args.metrics).read_text(encoding="utf-8")))
        fields = reader.fieldnames or []
        for col in ("id", args.iou_column):
            if col not in fields:
                raise UsageError(f"metrics CSV has no column {col!r}")
        pairs = []
        for rec in reader:
            if rec[args.iou_column] in ("", None):
                raise UsageError(f"scan {rec['id']}: empty {args.iou_column!r} value")
            pairs.append((rec["id"], bootstrap_score(float(rec[args.iou_column]))))
        scores = rank(pairs, "bootstrap")
    scores.write(args.out)
    print(f"wrote {len(scores)} {scores.provenance} scores to {args.out}")
    if args.histogram and len(scores):
        hist = score_histogram(scores, args.bins)
        _write(args.histogram, hist.to_csv())
        print(f"score mean {hist.mean:.4f}, std {hist.std:.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ compose


def _print_schedule(schedule: Schedule) -> None:
    print(f"strategy {schedule.strategy}: {len(schedule.phases)} phases, {schedule.total_epochs} epochs")
    print("phase | scans | epochs | domain mix (S/T)")
    for ph in schedule.phases:
        mix = "-" if ph.domain_mix is None else f"{ph.domain_mix[0]}/{ph.domain_mix[1]}"
        print(f"{ph.index:5d} | {len(ph.scan_ids):5d} | {ph.epochs:6d} | {mix}")


def cmd_compose(args) -> int:
    if args.mode == "curriculum":
        scores_path = args.scores or args.target_scores
        if not scores_path:
            raise UsageError("curriculum mode needs --scores")
        ranked = ScoreTable.read(scores_path)
        fractions = _csv_list(args.fractions)
        epochs = _csv_list(args.epochs, int)
        try:
            schedule = curriculum.compose(ranked, args.strategy, epochs, args.overlap, args.mixed, args.seed, fractions)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    else:
        target_path = args.target_scores or args.scores
        if not target_path:
            raise UsageError("adapt mode needs --target-scores")
        target = ScoreTable.read(target_path)
        try:
            if args.adapt_mode == "random":
                epochs = args.random_epochs
                if epochs is None:
                    p = adaptation.WindowParams(args.window, args.step, args.step_epochs)
                    epochs = len(adaptation.window_starts(args.n_target, p)) * p.step_epochs
                schedule = adaptation.random_schedule(target, args.n_target, epochs, args.seed)
            else:
                source = ScoreTable.read(args.source_scores) if args.source_scores else None
                seq = adaptation.select_scans(target, source, args.n_target, args.n_source, args.adapt_mode,
                                              args.source_order)
                p = adaptation.WindowParams(args.window, args.step, args.step_epochs)
                digest = adaptation.adaptation_digest(target, source if args.adapt_mode == "source2target" else None)
                schedule = adaptation.window_schedule(seq, p, args.adapt_mode, digest, args.seed, args.shuffle_windows)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    emit(schedule, args.out)
    _print_schedule(schedule)
    print(f"wrote manifest to {args.out}")
    return EXIT_OK


# ------------------------------------------------------------------ phantom


def _preset(name: str, index: int, seed: int, levels: int | None) -> PhantomSpec:
    if name == "tube":
        return straight_tube()
    if name == "y":
        return y_phantom()
    if name == "tree":
        return bifurcating_tree(levels or 3)
    return random_tree(seed * 1_000_003 + index, levels)


def cmd_phantom(args) -> int:
    out = Path(args.out)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    if args.geometry:
        import json

        geometries = [PhantomSpec.from_dict(json.loads(Path(args.geometry).read_text(encoding="utf-8")))] * args.count
    else:
        geometries = [_preset(args.preset, i, args.seed, args.levels) for i in range(args.count)]
    lists: dict[str, list[str]] = {"ct": [], "gt": [], "lung": [], "pred": []}
    for i, geometry in enumerate(geometries):
        name = f"{args.prefix}_{i:03d}"
        pred = simulate_prediction(geometry, args.seed * 1_000_003 + i) if args.with_pred else None
        write_phantom(out, name, geometry, args.seed * 1_000_003 + i, pred)
        for kind in ("ct", "gt", "lung") + (("pred",) if args.with_pred else ()):
            lists[kind].append(f"{kind}/{name}.nii.gz")
    for kind, paths in lists.items():
        if paths:
            _write(out / f"{kind}.txt", "\n".join(paths) + "\n")
    print(f"wrote {len(geometries)} phantom(s) to {out}")
    return EXIT_OK


# ------------------------------------------------------------------- parser


def build_parser(default_seed: int) -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="airway-cl", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    cpus = os.cpu_count() or 1

    p = sub.add_parser("phantom", help="generate synthetic airway phantoms")
    p.add_argument("--out", required=True)
    p.add_argument("--preset", choices=("tube", "y", "tree", "random"), default="random")
    p.add_argument("--geometry", help="PhantomSpec JSON file (overrides --preset)")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--levels", type=int)
    p.add_argument("--prefix", default="case")
    p.add_argument("--with-pred", action="store_true", help="also write a simulated imperfect prediction")
    p.add_argument("--seed", type=int, default=default_seed)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("extract", help="compute the feature table")
    p.add_argument("--ct", nargs="+", required=True)
    p.add_argument("--gt", nargs="+", required=True)
    p.add_argument("--lung", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=cpus)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("evaluate", help="segmentation metrics, or the forgetting rate")
    p.add_argument("--pred", nargs="+")
    p.add_argument("--gt", nargs="+")
    p.add_argument("--out")
    p.add_argument("--json")
    p.add_argument("--label", default="cohort")
    p.add_argument("--detect-frac", type=float, default=0.8)
    p.add_argument("--forgetting", nargs=2, metavar=("BEFORE_CSV", "AFTER_CSV"))
    p.add_argument("--metrics", help="comma-separated metrics for --forgetting")
    p.add_argument("--workers", type=int, default=cpus)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("train-scorer", help="fit the composite target and the forest")
    p.add_argument("--features", required=True)
    p.add_argument("--metrics", required=True)
    p.add_argument("--metric-names")
    p.add_argument("--n-trees", type=int, default=200)
    p.add_argument("--max-depth", type=int, default=16, help="0 for unlimited")
    p.add_argument("--min-leaf", type=int, default=2)
    p.add_argument("--max-features", type=int)
    p.add_argument("--no-bootstrap", action="store_true")
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train_scorer)

    p = sub.add_parser("score", help="rank scans by complexity")
    p.add_argument("--mode", choices=("ml", "bootstrap"), default="ml")
    p.add_argument("--features")
    p.add_argument("--model")
    p.add_argument("--metrics")
    p.add_argument("--iou-column", default="iou")
    p.add_argument("--out", required=True)
    p.add_argument("--histogram")
    p.add_argument("--bins", type=int, default=20)
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("compose", help="write a training schedule manifest")
    p.add_argument("--mode", choices=("curriculum", "adapt"), default="curriculum")
    p.add_argument("--scores")
    p.add_argument("--strategy", choices=curriculum.STRATEGIES, default="vanilla")
    p.add_argument("--fractions", default="0.15,0.40,0.45")
    p.add_argument("--epochs", default="20,70,110")
    p.add_argument("--overlap", type=float, default=0.15)
    p.add_argument("--mixed", type=float, default=0.15)
    p.add_argument("--adapt-mode", choices=("target", "source2target", "random"), default="source2target")
    p.add_argument("--target-scores")
    p.add_argument("--source-scores")
    p.add_argument("--n-target", type=int, default=20)
    p.add_argument("--n-source", type=int, default=19)
    p.add_argument("--source-order", choices=("ascending", "descending"), default="ascending")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--step", type=int, default=1)
    p.add_argument("--step-epochs", type=int, default=5)
    p.add_argument("--shuffle-windows", action="store_true")
    p.add_argument("--random-epochs", type=int)
    p.add_argument("--seed", type=int, default=default_seed)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_compose)
    return parser


def main(argv=None) -> int:
    try:
        seed = _default_seed()
    except UsageError as exc:
        print(f"airway-cl: {exc}", file=sys.stderr)
        return EXIT_USAGE
    parser = build_parser(seed)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"airway-cl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"airway-cl {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
