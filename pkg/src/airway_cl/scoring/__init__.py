"""Complexity scoring: bootstrapping score and the learned feature-based score."""

from .composite import CompositeTargetModel, composite_score, fit_composite_target, report_matrix
from .forest import ForestModel, ForestParams, RegressionTree, fit_forest, predict_score
from .ranking import ScoreHistogram, ScoreRow, ScoreTable, bootstrap_score, rank, score_histogram

__all__ = [
    "CompositeTargetModel",
    "ForestModel",
    "ForestParams",
    "RegressionTree",
    "ScoreHistogram",
    "ScoreRow",
    "ScoreTable",
    "bootstrap_score",
    "composite_score",
    "fit_composite_target",
    "fit_forest",
    "predict_score",
    "rank",
    "report_matrix",
    "score_histogram",
]
