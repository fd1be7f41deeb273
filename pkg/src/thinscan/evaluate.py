"""Quantitative comparison of reconstructed skeletons against ground truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .fusion import FusionParams, icp_align
from .geometry import GeometryError, SkeletonGraph
from .wiremodels import WireModel

EVAL_SAMPLE_SPACING = 0.0005


@dataclass(frozen=True)
class SkeletonMetrics:
    rms_distance: float          # reconstruction -> truth, meters
    hausdorff: float             # symmetric, meters
    completeness: float          # truth arc fraction within tau of recon
    junction_precision: float
    junction_recall: float
    radius_error_mm: float       # NaN when no radius estimate given

    def as_row(self) -> dict:
        return {
            "rms_distance_mm": self.rms_distance * 1000.0,
            "hausdorff_mm": self.hausdorff * 1000.0,
            "completeness": self.completeness,
            "junction_precision": self.junction_precision,
            "junction_recall": self.junction_recall,
            "radius_error_mm": self.radius_error_mm,
        }


def greedy_junction_matching(a: np.ndarray, b: np.ndarray, rho: float) -> int:
    """Number of one-to-one junction pairs within rho (closest pairs first)."""
    if len(a) == 0 or len(b) == 0:
        return 0
    pairs = []
    for i, pa in enumerate(a):
        for j, pb in enumerate(b):
            d = float(np.linalg.norm(pa - pb))
            if d <= rho:
                pairs.append((d, i, j))
    pairs.sort()
    used_a = set()
    used_b = set()
    matched = 0
    for _, i, j in pairs:
        if i in used_a or j in used_b:
            continue
        used_a.add(i)
        used_b.add(j)
        matched += 1
    return matched


def compare(reconstructed: SkeletonGraph, truth: WireModel,
            tau: float = 0.005, rho: float = 0.010,
            estimated_radius_mm: Optional[float] = None,
            align: bool = True) -> SkeletonMetrics:
    """Metrics of a reconstruction against the ground-truth wire model.

    The reconstruction is first rigidly aligned to the truth skeleton (the
    pipeline output lives in a drifted frame). Distances use dense 0.5 mm
    samples and nearest-point queries; junction matching is greedy one-to-one
    within rho.
    """
    if reconstructed.is_empty() or truth.skeleton.is_empty():
        raise GeometryError("compare needs non-empty skeletons")
    recon = reconstructed
    if align:
        result = icp_align(recon, truth.skeleton, FusionParams())
        recon = recon.transformed(result.pose)
    rec_pts = recon.dense_points(EVAL_SAMPLE_SPACING)
    gt_pts = truth.skeleton.dense_points(EVAL_SAMPLE_SPACING)
    rec_tree = cKDTree(rec_pts)
    gt_tree = cKDTree(gt_pts)
    d_rec = gt_tree.query(rec_pts, workers=-1)[0]
    d_gt = rec_tree.query(gt_pts, workers=-1)[0]
    rms = float(np.sqrt(np.mean(d_rec ** 2)))
    hausdorff = float(max(d_rec.max(), d_gt.max()))
    completeness = float((d_gt <= tau).mean())
    n_rec = recon.n_junctions
    n_gt = truth.skeleton.n_junctions
    matched = greedy_junction_matching(recon.junctions, truth.skeleton.junctions, rho)
    precision = matched / n_rec if n_rec else 1.0
    recall = matched / n_gt if n_gt else 1.0
    radius_err = float("nan") if estimated_radius_mm is None \
        else abs(estimated_radius_mm - truth.radius * 1000.0)
    return SkeletonMetrics(rms, hausdorff, completeness, precision, recall, radius_err)
