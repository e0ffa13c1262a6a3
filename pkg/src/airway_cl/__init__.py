"""Complexity-ranked training curricula for airway segmentation.

Covers NIfTI input/output, airway centerline graphs, per-scan features,
segmentation metrics, complexity scoring, schedule composition and
few-shot adaptation windows.
"""

__version__ = "0.1.0"
