"""L1-median skeleton extraction for wire-like point clouds.

Samples drawn from the cloud contract onto the local L1 median under a
Gaussian locality kernel while a repulsion term spreads them along the local
dominant direction. Samples that become locally linear are frozen as branch
points; the leftover residue clusters mark junctions, and branch points are
chained into polylines that attach to those junctions.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (GeometryError, LabeledPointCloud, Polyline, SkeletonGraph,
                       SkeletonSegment, resample_polyline, validate_skeleton_graph)


@dataclass(frozen=True)
class L1Params:
    h0: float = 0.015                 # initial neighborhood radius
    h_max: float = 0.025              # final neighborhood radius
    h_step: float = 0.005             # radius growth per level
    mu: float = 0.35                  # repulsion weight
    branch_linearity_threshold: float = 0.9
    max_iters: int = 60               # per radius level
    convergence_eps: float = 1e-4     # max displacement stopping threshold
    downsample_cell: float = 0.0025   # sample initialization grid
    cluster_radius: float = 0.008     # residue single-linkage radius

    def __post_init__(self):
        if not (0 < self.h0 <= self.h_max):
            raise GeometryError("need 0 < h0 <= h_max")
        if self.mu < 0:
            raise GeometryError("mu must be non-negative")
        if not (0 < self.branch_linearity_threshold < 1):
            raise GeometryError("branch_linearity_threshold must be in (0, 1)")

    def radius_schedule(self) -> np.ndarray:
        if self.h_step <= 0:
            return np.asarray([self.h0])
        return np.arange(self.h0, self.h_max + 1e-12, self.h_step)


@dataclass(frozen=True)
class ContractionState:
    """Contraction intermediates: sample positions, per-sample linearity
    sigma = l1/(l1+l2+l3) from local weighted PCA, branch and frozen flags."""

    samples: np.ndarray
    linearity: np.ndarray
    is_branch: np.ndarray
    fixed: np.ndarray

    def __post_init__(self):
        n = len(self.samples)
        if not (len(self.linearity) == len(self.is_branch) == len(self.fixed) == n):
            raise GeometryError("contraction state arrays have mismatched lengths")


def _theta(r: np.ndarray, h: float) -> np.ndarray:
    return np.exp(-(r ** 2) / (h / 2.0) ** 2)


def _neighbor_lists(tree: cKDTree, points: np.ndarray, radius: float):
    nb = tree.query_ball_point(points, radius, workers=-1)
    lens = np.fromiter((len(x) for x in nb), dtype=np.int64, count=len(nb))
    flat = np.concatenate(nb) if lens.sum() else np.zeros(0, np.int64)
    rows = np.repeat(np.arange(len(points)), lens)
    return rows, flat.astype(np.int64)


def _local_structure(samples: np.ndarray, h: float):
    """Weighted scatter PCA per sample over neighboring samples.

    Returns (sigma, tangent): linearity in [0, 1] and unit dominant direction.
    """
    n = len(samples)
    rows, cols = _neighbor_lists(cKDTree(samples), samples, h)
    keep = rows != cols
    rows, cols = rows[keep], cols[keep]
    diff = samples[cols] - samples[rows]
    w = _theta(np.linalg.norm(diff, axis=1), h)
    outer = w[:, None, None] * (diff[:, :, None] * diff[:, None, :])
    cov = np.zeros((n, 3, 3))
    np.add.at(cov, rows, outer)
    evals, evecs = np.linalg.eigh(cov)  # ascending
    total = evals.sum(axis=1)
    sigma = np.where(total > 1e-18, evals[:, 2] / np.maximum(total, 1e-18), 0.0)
    tangent = evecs[:, :, 2]
    counts = np.bincount(rows, minlength=n)
    sigma = np.where(counts >= 2, sigma, 0.0)
    return sigma, tangent


def l1_median_step(state: ContractionState, cloud: LabeledPointCloud,
                   h: float, mu: float) -> ContractionState:
    """One synchronous contraction update at radius h.

    Non-fixed samples take a single Weiszfeld step toward the Gaussian-
    weighted L1 median of their cloud neighborhood, plus a repulsion that
    pushes neighboring samples apart along the local dominant direction
    (scaled by the sample's linearity). Samples with no cloud neighbors are
    unchanged.
    """
    pts = state.samples
    n = len(pts)
    if n == 0:
        return state
    sigma, tangent = _local_structure(pts, h)
    sigma = np.where(state.fixed, state.linearity, sigma)

    rows, cols = _neighbor_lists(cKDTree(cloud.points), pts, h)
    diff = cloud.points[cols] - pts[rows]
    r = np.linalg.norm(diff, axis=1)
    alpha = _theta(r, h) / np.maximum(r, h / 100.0)
    den = np.bincount(rows, weights=alpha, minlength=n)
    attract = np.stack(
        [np.bincount(rows, weights=alpha * cloud.points[cols, c], minlength=n)
         for c in range(3)], axis=1)
    has_nb = den > 0
    attract[has_nb] /= den[has_nb, None]
    attract[~has_nb] = pts[~has_nb]

    srows, scols = _neighbor_lists(cKDTree(pts), pts, h)
    keep = srows != scols
    srows, scols = srows[keep], scols[keep]
    sdiff = pts[srows] - pts[scols]
    sr = np.linalg.norm(sdiff, axis=1)
    beta = _theta(sr, h) / np.maximum(sr, h / 100.0) ** 2
    bden = np.bincount(srows, weights=beta, minlength=n).astype(float)
    rep = np.stack([np.bincount(srows, weights=beta * sdiff[:, c], minlength=n)
                    for c in range(3)], axis=1).astype(float)
    ok = bden > 0
    rep[ok] /= bden[ok, None]
    # repulsion acts along the local dominant direction only
    rep_t = np.einsum("ij,ij->i", rep, tangent)[:, None] * tangent

    new_pts = attract + mu * sigma[:, None] * rep_t
    new_pts = np.where((state.fixed | ~has_nb)[:, None], pts, new_pts)
    return ContractionState(new_pts, sigma, state.is_branch, state.fixed)


def _recenter_branches(state: ContractionState, cloud: LabeledPointCloud,
                       h: float, iterations: int = 3) -> ContractionState:
    """Perpendicular mean-shift polish for branch samples.

    The Weiszfeld fixed point under re-frozen locality weights sits slightly
    off-axis for hollow tube clouds (the near surface is overweighted); the
    Gaussian-weighted centroid has no such bias perpendicular to the branch.
    Shifts each branch sample onto the local centroid in the plane normal to
    its tangent, leaving the along-branch distribution untouched.
    """
    pts = state.samples.copy()
    branch_idx = np.nonzero(state.is_branch)[0]
    if len(branch_idx) == 0:
        return state
    tree = cKDTree(cloud.points)
    for _ in range(iterations):
        _, tangents = _local_structure(pts, h)
        rows, cols = _neighbor_lists(tree, pts[branch_idx], h)
        w = _theta(np.linalg.norm(cloud.points[cols] - pts[branch_idx][rows], axis=1), h)
        den = np.bincount(rows, weights=w, minlength=len(branch_idx))
        mean = np.stack([np.bincount(rows, weights=w * cloud.points[cols, c],
                                     minlength=len(branch_idx)) for c in range(3)], 1)
        ok = den > 0
        mean[ok] /= den[ok, None]
        delta = np.where(ok[:, None], mean - pts[branch_idx], 0.0)
        t = tangents[branch_idx]
        delta -= np.einsum("ij,ij->i", delta, t)[:, None] * t
        pts[branch_idx] += delta
    return ContractionState(pts, state.linearity, state.is_branch, state.fixed)


def _downsample_indices(points: np.ndarray, cell: float, rng) -> np.ndarray:
    """One random member per occupied grid cell (seeded, deterministic)."""
    idx = np.floor((points - points.min(axis=0)) / cell).astype(np.int64)
    dims = idx.max(axis=0) + 1
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    perm = rng.permutation(len(points))
    _, first = np.unique(flat[perm], return_index=True)
    return np.sort(perm[first])


def contract(cloud: LabeledPointCloud, params: L1Params, seed: int) -> ContractionState:
    """Run the contraction schedule; every returned sample is branch or residue.

    Samples initialize from a seeded random downsampling of the cloud (one
    point per occupied downsample_cell). At each radius level the update
    iterates until the max displacement falls below convergence_eps, then
    samples whose linearity reaches the threshold are frozen as branch points.
    """
    if len(cloud) < 3:
        raise GeometryError("cloud too small for contraction (need >= 3 points)")
    rng = np.random.default_rng(seed)
    sel = _downsample_indices(cloud.points, params.downsample_cell, rng)
    pts = cloud.points[sel].copy()
    n = len(pts)
    state = ContractionState(pts, np.zeros(n), np.zeros(n, bool), np.zeros(n, bool))
    for h in params.radius_schedule():
        for _ in range(params.max_iters):
            new = l1_median_step(state, cloud, h, params.mu)
            moved = ~new.fixed
            disp = np.linalg.norm(new.samples - state.samples, axis=1)[moved]
            state = new
            if len(disp) == 0 or disp.max() < params.convergence_eps:
                break
        newly = ~state.fixed & (state.linearity >= params.branch_linearity_threshold)
        state = ContractionState(state.samples, state.linearity,
                                 state.is_branch | newly, state.fixed | newly)
    return _recenter_branches(state, cloud, params.h0)


# ---------------------------------------------------------------------------
# Junction detection
# ---------------------------------------------------------------------------

def _single_linkage(points: np.ndarray, radius: float):
    """Connected components under the pairwise-distance <= radius relation."""
    n = len(points)
    parent = np.arange(n)

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    if n > 1:
        for i, j in cKDTree(points).query_pairs(radius, output_type="ndarray"):
            ri, rj = find(i), find(j)
            if ri != rj:
                parent[rj] = ri
    groups = {}
    for i in range(n):
        groups.setdefault(find(i), []).append(i)
    return list(groups.values())


def detect_junctions(state: ContractionState, cluster_radius: float,
                     incident_radius: float = 0.0375,
                     support_radius: float = 0.015,
                     min_directions: int = 3,
                     direction_angle_deg: float = 45.0) -> np.ndarray:
    """Junction centers from residue clusters.

    Residue (non-branch) samples are clustered by single linkage; a cluster
    with at least two samples becomes a junction at its centroid when at
    least `min_directions` angularly distinct branch directions are incident
    within incident_radius, each backed by a branch sample no farther than
    support_radius (this last guard keeps the tip residue of one wire from
    counting a neighboring parallel wire as extra directions).
    """
    residue = state.samples[~state.is_branch]
    branch = state.samples[state.is_branch]
    centers = []
    if len(residue) == 0 or len(branch) == 0:
        return np.zeros((0, 3))
    btree = cKDTree(branch)
    cos_thresh = np.cos(np.deg2rad(direction_angle_deg))
    for group in _single_linkage(residue, cluster_radius):
        if len(group) < 2:
            continue
        centroid = residue[group].mean(axis=0)
        near = btree.query_ball_point(centroid, incident_radius)
        if len(near) < min_directions:
            continue
        vecs = branch[near] - centroid
        dists = np.linalg.norm(vecs, axis=1)
        keep = dists > 0.002
        vecs, dists = vecs[keep] / dists[keep, None], dists[keep]
        order = np.argsort(dists)
        reps = []  # (unit direction, nearest supporting distance)
        for k in order:
            if all(vecs[k] @ rep_dir <= cos_thresh for rep_dir, _ in reps):
                reps.append((vecs[k], dists[k]))
        supported = sum(1 for _, d in reps if d <= support_radius)
        if supported >= min_directions:
            centers.append(centroid)
    return np.asarray(centers).reshape(-1, 3)


# ---------------------------------------------------------------------------
# Branch tracing and graph assembly
# ---------------------------------------------------------------------------

def _trace_chains(branch: np.ndarray, tangents: np.ndarray, junctions: np.ndarray,
                  gap_tol: float, block_radius: float, max_angle_deg: float = 50.0):
    """Chain branch samples into ordered runs by nearest-neighbor walking
    along the local dominant direction. Hops whose segment passes close to a
    junction stop the chain so curves terminate at junctions."""
    n = len(branch)
    tree = cKDTree(branch)
    jtree = cKDTree(junctions) if len(junctions) else None
    visited = np.zeros(n, bool)
    cos_max = np.cos(np.deg2rad(max_angle_deg))

    def blocked(a, b):
        if jtree is None:
            return False
        mid = (branch[a] + branch[b]) / 2.0
        seg_len = np.linalg.norm(branch[b] - branch[a])
        for j in jtree.query_ball_point(mid, seg_len / 2.0 + block_radius):
            p, q = branch[a], branch[b]
            d = q - p
            t = np.clip((junctions[j] - p) @ d / max(d @ d, 1e-18), 0.0, 1.0)
            if np.linalg.norm(p + t * d - junctions[j]) < block_radius:
                return True
        return False

    def walk(start, direction):
        out = []
        cur = start
        cur_dir = direction
        while True:
            cand = [c for c in tree.query_ball_point(branch[cur], gap_tol)
                    if not visited[c]]
            best, best_d = -1, np.inf
            for c in cand:
                step = branch[c] - branch[cur]
                d = np.linalg.norm(step)
                if d < 1e-9:
                    visited[c] = True
                    continue
                if (step / d) @ cur_dir < cos_max:
                    continue
                if d < best_d and not blocked(cur, c):
                    best, best_d = c, d
            if best < 0:
                return out
            visited[best] = True
            cur_dir = (branch[best] - branch[cur]) / best_d
            cur = best
            out.append(best)

    chains = []
    for seed in range(n):
        if visited[seed]:
            continue
        visited[seed] = True
        fwd = walk(seed, tangents[seed])
        bwd = walk(seed, -tangents[seed])
        chain = bwd[::-1] + [seed] + fwd
        if len(chain) >= 2:
            chains.append(chain)
    return chains


def build_bundle_skeleton(state: ContractionState, junctions: np.ndarray,
                          params: L1Params) -> SkeletonGraph:
    """Assemble branch samples and junction centers into a skeleton graph.

    Branch chains become polylines resampled at 1 mm; endpoints within
    1.5 * h_max of a junction snap onto it. Junctions that attract no
    endpoints are dropped; low-valence ones stay flagged provisional.
    """
    junctions = np.asarray(junctions, float).reshape(-1, 3)
    branch = state.samples[state.is_branch]
    if len(branch) < 2:
        return SkeletonGraph(np.zeros((0, 3)), [])
    _, tangents = _local_structure(branch, params.h0)
    gap_tol = 1.5 * params.h0
    attach_radius = 1.5 * params.h_max
    chains = _trace_chains(branch, tangents, junctions, gap_tol, params.cluster_radius)
    jtree = cKDTree(junctions) if len(junctions) else None

    segments = []
    for chain in chains:
        pts = branch[chain]
        start_j = end_j = None
        if jtree is not None:
            d0, j0 = jtree.query(pts[0])
            d1, j1 = jtree.query(pts[-1])
            if d0 <= attach_radius:
                start_j = int(j0)
                pts = np.vstack([junctions[start_j], pts]) \
                    if d0 > 1e-7 else np.vstack([junctions[start_j], pts[1:]])
            if d1 <= attach_radius:
                end_j = int(j1)
                pts = np.vstack([pts, junctions[end_j]]) \
                    if d1 > 1e-7 else np.vstack([pts[:-1], junctions[end_j]])
        if start_j is None and end_j is None and len(pts) > 3:
            closure = np.linalg.norm(pts[0] - pts[-1])
            if 1e-7 < closure <= gap_tol:
                pts = np.vstack([pts, pts[0]])  # close the loop
        # drop consecutive duplicates
        keep = np.ones(len(pts), bool)
        keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-7
        pts = pts[keep]
        if len(pts) < 2:
            continue
        line = resample_polyline(Polyline(pts), 0.001)
        if line.length < 0.002:
            continue
        segments.append(SkeletonSegment(line, start_j, end_j))

    # keep only junctions that received endpoints; reindex attachments
    used = sorted({j for s in segments for j in (s.start_junction, s.end_junction)
                   if j is not None})
    remap = {old: new for new, old in enumerate(used)}
    segments = [SkeletonSegment(s.polyline,
                                remap.get(s.start_junction),
                                remap.get(s.end_junction)) for s in segments]
    graph = SkeletonGraph(junctions[used] if used else np.zeros((0, 3)), segments,
                          provisional=np.ones(len(used), bool))
    validate_skeleton_graph(graph)
    return graph


def extract_skeleton(cloud: LabeledPointCloud, params: L1Params,
                     seed: int) -> SkeletonGraph:
    """contract + detect_junctions + build_bundle_skeleton in one call."""
    state = contract(cloud, params, seed)
    junctions = detect_junctions(state, params.cluster_radius,
                                 incident_radius=1.5 * params.h_max)
    return build_bundle_skeleton(state, junctions, params)
