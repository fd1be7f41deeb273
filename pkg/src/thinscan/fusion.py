"""Iterative fusion of bundle skeletons into one skeleton graph.

Each incoming skeleton is rigidly aligned to the running partial skeleton by
curve-sample ICP, overlapping curve regions are merged by weighted averaging
(weight i/(i+1) for the partial skeleton at step i), junction pairs merge,
curve crossings spawn new junctions, spurious slivers are trimmed, and a
global least-squares smoothing pass runs after every merge with junctions as
shared variables.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu
from scipy.spatial import cKDTree

from .geometry import (GeometryError, Polyline, RigidPose, SkeletonGraph,
                       SkeletonSegment, resample_polyline, validate_skeleton_graph)


@dataclass(frozen=True)
class FusionParams:
    overlap_distance: float = 0.01
    junction_merge_distance: float = 0.01
    intersection_proximity: float = 0.003
    trim_length: float = 0.002
    sample_spacing: float = 0.001
    min_overlap_run: int = 5
    lambda_smooth: float = 60.0
    icp_max_iters: int = 50
    icp_pair_reject: float = 0.02
    icp_converge_eps: float = 1e-5
    crossing_endpoint_margin: float = 0.01

    def __post_init__(self):
        if min(self.overlap_distance, self.junction_merge_distance,
               self.intersection_proximity, self.trim_length,
               self.sample_spacing) <= 0:
            raise GeometryError("fusion distances must be positive")
        if self.lambda_smooth < 0:
            raise GeometryError("lambda must be non-negative")


# ---------------------------------------------------------------------------
# Nearest-point machinery
# ---------------------------------------------------------------------------

class _CurveIndex:
    """Dense samples of one curve plus a KDTree, with exact nearest-point
    refinement onto the polyline segments."""

    def __init__(self, pts: np.ndarray):
        self.pts = pts
        self.tree = cKDTree(pts)

    def nearest(self, query: np.ndarray):
        """Returns (points, dists, arc_index) of nearest curve points."""
        query = np.atleast_2d(query)
        d, idx = self.tree.query(query, workers=-1)
        best_pts = self.pts[idx].copy()
        best_d = d.copy()
        # refine onto the two segments adjacent to the nearest sample
        for off in (-1, 0):
            a_idx = idx + off
            ok = (a_idx >= 0) & (a_idx + 1 < len(self.pts))
            if not ok.any():
                continue
            a = self.pts[np.clip(a_idx, 0, len(self.pts) - 2)]
            b = self.pts[np.clip(a_idx + 1, 1, len(self.pts) - 1)]
            ab = b - a
            denom = np.einsum("ij,ij->i", ab, ab)
            t = np.clip(np.einsum("ij,ij->i", query - a, ab)
                        / np.maximum(denom, 1e-18), 0.0, 1.0)
            proj = a + t[:, None] * ab
            dd = np.linalg.norm(query - proj, axis=1)
            upd = ok & (dd < best_d)
            best_d[upd] = dd[upd]
            best_pts[upd] = proj[upd]
        return best_pts, best_d, idx


@dataclass(frozen=True)
class IcpResult:
    pose: RigidPose
    iterations: int
    n_pairs: int
    converged: bool


def _solve_rigid(src: np.ndarray, dst: np.ndarray) -> RigidPose:
    """Least-squares rigid transform src -> dst (cross-covariance + SVD)."""
    ca = src.mean(axis=0)
    cb = dst.mean(axis=0)
    h = (src - ca).T @ (dst - cb)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidPose(rot, cb - rot @ ca)


def icp_align(source: SkeletonGraph, target: SkeletonGraph,
              params: FusionParams) -> IcpResult:
    """Rigid transform bringing the source curves onto the target curves.

    Samples every source curve densely, pairs each sample with its nearest
    point on any target curve (pairs beyond icp_pair_reject dropped), and
    solves the closed-form rigid fit, iterating until the incremental motion
    of every sample falls below icp_converge_eps. Junctions contribute no
    constraints. When an iteration has no valid pairs the transform so far is
    returned with converged=False.
    """
    if source.is_empty() or target.is_empty():
        raise GeometryError("icp_align needs non-empty graphs")
    src = source.dense_points(params.sample_spacing)
    indexes = [_CurveIndex(resample_polyline(s.polyline, params.sample_spacing).vertices)
               for s in target.segments]
    pose = RigidPose.identity()
    cur = src.copy()
    n_pairs = 0
    for it in range(params.icp_max_iters):
        best_pts = np.zeros_like(cur)
        best_d = np.full(len(cur), np.inf)
        for index in indexes:
            pts, d, _ = index.nearest(cur)
            upd = d < best_d
            best_d[upd] = d[upd]
            best_pts[upd] = pts[upd]
        ok = best_d <= params.icp_pair_reject
        n_pairs = int(ok.sum())
        if n_pairs < 3:
            return IcpResult(pose, it, n_pairs, False)
        inc = _solve_rigid(cur[ok], best_pts[ok])
        new = inc.apply(cur)
        moved = np.linalg.norm(new - cur, axis=1).max()
        cur = new
        pose = inc.compose(pose)
        if moved < params.icp_converge_eps:
            return IcpResult(pose, it + 1, n_pairs, True)
    return IcpResult(pose, params.icp_max_iters, n_pairs, False)


# ---------------------------------------------------------------------------
# Overlap detection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class OverlapRegion:
    """Maximal run where curve_a of graph a stays within overlap_distance of
    curve_b of graph b; intervals are arc-length ranges on each curve."""

    curve_a: int
    curve_b: int
    interval_a: tuple
    interval_b: tuple
    n_samples: int


def _runs(mask: np.ndarray, min_len: int):
    """Maximal True runs of at least min_len, as (start, stop) inclusive."""
    out = []
    start = None
    for i, v in enumerate(mask):
        if v and start is None:
            start = i
        elif not v and start is not None:
            if i - start >= min_len:
                out.append((start, i - 1))
            start = None
    if start is not None and len(mask) - start >= min_len:
        out.append((start, len(mask) - 1))
    return out


def detect_overlaps(a: SkeletonGraph, b: SkeletonGraph,
                    params: FusionParams) -> list:
    """Overlap regions between every pair of curves of two aligned graphs."""
    regions = []
    spacing = params.sample_spacing
    b_idx = [_CurveIndex(resample_polyline(s.polyline, spacing).vertices)
             for s in b.segments]
    for ia, seg in enumerate(a.segments):
        dense = resample_polyline(seg.polyline, spacing)
        arcs = dense.arc_positions
        for ib, index in enumerate(b_idx):
            _, d, near_idx = index.nearest(dense.vertices)
            for lo, hi in _runs(d <= params.overlap_distance, params.min_overlap_run):
                bi = near_idx[lo:hi + 1]
                regions.append(OverlapRegion(
                    ia, ib, (float(arcs[lo]), float(arcs[hi])),
                    (float(bi.min() * spacing), float(bi.max() * spacing)),
                    hi - lo + 1))
    return regions


# ---------------------------------------------------------------------------
# Merge machinery
# ---------------------------------------------------------------------------

class _Work:
    """Mutable merge workspace: dense curves plus junction bookkeeping."""

    def __init__(self, params: FusionParams):
        self.params = params
        self.curves = []      # [pts, sj, ej]
        self.junctions = []   # positions
        self.origin = []      # 'K' | 'S' | 'X' per junction

    def add_junction(self, pos, origin: str) -> int:
        self.junctions.append(np.asarray(pos, float))
        self.origin.append(origin)
        return len(self.junctions) - 1

    def add_curve(self, pts, sj, ej):
        pts = _dedupe(np.asarray(pts, float))
        if len(pts) >= 2:
            self.curves.append([pts, sj, ej])

    def valences(self):
        val = np.zeros(len(self.junctions), int)
        for _, sj, ej in self.curves:
            for j in (sj, ej):
                if j is not None:
                    val[j] += 1
        return val


def _dedupe(pts: np.ndarray) -> np.ndarray:
    if len(pts) < 2:
        return pts
    keep = np.ones(len(pts), bool)
    keep[1:] = np.linalg.norm(np.diff(pts, axis=0), axis=1) > 1e-9
    return pts[keep]


def _resample_pts(pts: np.ndarray, spacing: float) -> np.ndarray:
    pts = _dedupe(pts)
    if len(pts) < 2:
        return pts
    return resample_polyline(Polyline(pts), spacing).vertices


def _graph_to_work(graph: SkeletonGraph, params: FusionParams, origin: str) -> _Work:
    w = _Work(params)
    for pos in graph.junctions:
        w.add_junction(pos, origin)
    for seg in graph.segments:
        w.add_curve(resample_polyline(seg.polyline, params.sample_spacing).vertices,
                    seg.start_junction, seg.end_junction)
    return w


def _split_curve_at(pts: np.ndarray, k: int):
    """Split dense curve at sample k; both halves contain pts[k]."""
    return pts[:k + 1], pts[k:]


def _split_at_junctions(work: _Work, foreign_junctions, radius: float,
                        origin_for_new: str, attach_ids=None):
    """Split curves that pass within `radius` of a foreign junction at an
    interior point; both new endpoints attach to a new provisional junction
    (or to the given existing ids) at the closest approach."""
    if len(foreign_junctions) == 0:
        return
    jtree = cKDTree(np.asarray(foreign_junctions))
    # a curve merely ending near the junction is an attachment case, not a
    # crossing: require the approach to sit at least `radius` of arc length
    # away from both ends
    margin = int(np.ceil(radius / work.params.sample_spacing)) + 2
    queue = list(range(len(work.curves)))
    while queue:
        ci = queue.pop(0)
        pts, sj, ej = work.curves[ci]
        if len(pts) < 2 * margin + 1:
            continue
        d, jidx = jtree.query(pts)
        mask = d <= radius
        mask[:margin] = False
        mask[-margin:] = False
        if not mask.any():
            continue
        k = int(np.argmin(np.where(mask, d, np.inf)))
        if attach_ids is not None:
            jid = attach_ids[int(jidx[k])]
        else:
            jid = work.add_junction(pts[k], origin_for_new)
        head, tail = _split_curve_at(pts, k)
        work.curves[ci] = [head, sj, jid]
        work.add_curve(tail, jid, ej)
        queue.append(len(work.curves) - 1)
        queue.append(ci)


def _merge_curves_into(work: _Work, s_curves: list, w: float, params: FusionParams):
    """Queue-process S curves: overlap-merge into K curves where possible,
    append verbatim otherwise. Leftover non-overlapping pieces re-enter the
    queue so one S curve can bridge several K curves."""
    queue = list(s_curves)
    guard = 0
    while queue:
        guard += 1
        if guard > 10000:
            raise GeometryError("merge did not terminate")
        s_pts, s_sj, s_ej = queue.pop(0)
        s_pts = _resample_pts(s_pts, params.sample_spacing)
        if len(s_pts) < 2:
            continue
        best = None  # (run_len, curve_idx, lo, hi, flip)
        for ti, (t_pts, _, _) in enumerate(work.curves):
            if len(t_pts) < 2:
                continue
            index = _CurveIndex(t_pts)
            _, d, _ = index.nearest(s_pts)
            for lo, hi in _runs(d <= params.overlap_distance, params.min_overlap_run):
                if best is None or (hi - lo) > best[0]:
                    best = (hi - lo, ti, lo, hi)
        if best is None:
            work.add_curve(s_pts, s_sj, s_ej)
            continue
        _, ti, lo, hi = best
        t_pts, t_sj, t_ej = work.curves[ti]
        t_index = _CurveIndex(t_pts)
        _, _, near_idx = t_index.nearest(s_pts[lo:hi + 1])
        a0, a1 = int(near_idx.min()), int(near_idx.max())
        # orientation of s relative to t over the run
        flip = near_idx[-1] < near_idx[0]
        if flip:
            s_pts = s_pts[::-1].copy()
            s_sj, s_ej = s_ej, s_sj
            lo, hi = len(s_pts) - 1 - hi, len(s_pts) - 1 - lo
        s_index = _CurveIndex(s_pts[lo:hi + 1])
        mid_t = t_pts[a0:a1 + 1]
        s_near, _, _ = s_index.nearest(mid_t)
        merged = w * mid_t + (1.0 - w) * s_near
        new_pts = [t_pts[:a0], merged, t_pts[a1 + 1:]]
        new_sj, new_ej = t_sj, t_ej
        # the new skeleton can extend the partial one past its free ends
        head, tail = s_pts[:lo + 1], s_pts[hi:]
        head_len = max(len(head) - 1, 0) * params.sample_spacing
        tail_len = max(len(tail) - 1, 0) * params.sample_spacing
        if a0 == 0 and t_sj is None and head_len > params.trim_length:
            new_pts.insert(0, head[:-1])
            new_sj = s_sj
            head = None
        if a1 == len(t_pts) - 1 and t_ej is None and tail_len > params.trim_length:
            new_pts.append(tail[1:])
            new_ej = s_ej
            tail = None
        comp = _resample_pts(np.concatenate([p for p in new_pts if len(p)]),
                             params.sample_spacing)
        work.curves[ti] = [comp, new_sj, new_ej]
        # divergent leftovers become their own curves and retry
        if head is not None and head_len > params.trim_length:
            queue.append([head, s_sj, None])
        if tail is not None and tail_len > params.trim_length:
            queue.append([tail, None, s_ej])


def _merge_junction_pairs(work: _Work, w: float, params: FusionParams,
                          cross_only: bool = True):
    """Greedy nearest-pair junction merging (K with S by weighted average)."""
    while True:
        best = None
        for a in range(len(work.junctions)):
            for b in range(a + 1, len(work.junctions)):
                if cross_only and work.origin[a] == work.origin[b]:
                    continue
                d = np.linalg.norm(work.junctions[a] - work.junctions[b])
                if d <= params.junction_merge_distance and (best is None or d < best[0]):
                    best = (d, a, b)
        if best is None:
            return
        _, a, b = best
        ka, kb = (a, b) if work.origin[a] == "K" else (b, a)
        pos = w * work.junctions[ka] + (1.0 - w) * work.junctions[kb]
        work.junctions[a] = pos
        work.origin[a] = "K"
        # re-point curves from b to a (index shift after deleting b)
        for curve in work.curves:
            for slot in (1, 2):
                v = curve[slot]
                if v is None:
                    continue
                if v == b:
                    v = a
                if v > b:
                    v -= 1
                curve[slot] = v
        del work.junctions[b]
        del work.origin[b]


def _create_crossing_junctions(work: _Work, params: FusionParams):
    """New junctions where two curves pass within intersection_proximity at
    interior points; both curves split there."""
    changed = True
    guard = 0
    while changed and guard < 100:
        changed = False
        guard += 1
        n = len(work.curves)
        margin_n = max(int(params.crossing_endpoint_margin / params.sample_spacing), 2)
        for i in range(n):
            pts_i = work.curves[i][0]
            if len(pts_i) < 2 * margin_n + 1:
                continue
            tree_i = cKDTree(pts_i[margin_n:-margin_n])
            for j in range(i + 1, n):
                pts_j = work.curves[j][0]
                if len(pts_j) < 2 * margin_n + 1:
                    continue
                d, idx = tree_i.query(pts_j[margin_n:-margin_n], workers=-1)
                k = int(np.argmin(d))
                if d[k] > params.intersection_proximity:
                    continue
                ki = int(idx[k]) + margin_n
                kj = k + margin_n
                mid = (pts_i[ki] + pts_j[kj]) / 2.0
                jid = work.add_junction(mid, "X")
                pi, si, ei = work.curves[i]
                head, tail = _split_curve_at(pi, ki)
                work.curves[i] = [head, si, jid]
                work.add_curve(tail, jid, ei)
                pj, sj_, ej_ = work.curves[j]
                head2, tail2 = _split_curve_at(pj, kj)
                work.curves[j] = [head2, sj_, jid]
                work.add_curve(tail2, jid, ej_)
                changed = True
                break
            if changed:
                break


def _enforce_junction_separation(work: _Work, params: FusionParams):
    _merge_junction_pairs(work, 0.5, params, cross_only=False)


def _trim_short(work: _Work, params: FusionParams):
    kept = []
    for pts, sj, ej in work.curves:
        length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum()) \
            if len(pts) >= 2 else 0.0
        if length >= params.trim_length:
            kept.append([pts, sj, ej])
    work.curves = kept


def _snap_attachments(work: _Work):
    for curve in work.curves:
        pts, sj, ej = curve
        if sj is not None:
            pts = np.vstack([work.junctions[sj], pts[1:]]) \
                if np.linalg.norm(pts[0] - work.junctions[sj]) > 0 else pts
        if ej is not None:
            pts = np.vstack([pts[:-1], work.junctions[ej]]) \
                if np.linalg.norm(pts[-1] - work.junctions[ej]) > 0 else pts
        curve[0] = _dedupe(pts)


def _work_to_graph(work: _Work) -> SkeletonGraph:
    used = sorted({j for _, sj, ej in work.curves for j in (sj, ej) if j is not None})
    remap = {old: new for new, old in enumerate(used)}
    segments = []
    for pts, sj, ej in work.curves:
        if len(pts) < 2:
            continue
        segments.append(SkeletonSegment(Polyline(pts), remap.get(sj), remap.get(ej)))
    junctions = np.asarray([work.junctions[j] for j in used]).reshape(-1, 3)
    graph = SkeletonGraph(junctions, segments, provisional=np.ones(len(used), bool))
    val = graph.junction_valences()
    graph = SkeletonGraph(junctions, segments, provisional=val < 3)
    return graph


def merge_step(partial: SkeletonGraph, incoming: SkeletonGraph, i: int,
               params: FusionParams) -> SkeletonGraph:
    """Merge the aligned incoming skeleton into the partial one (step i).

    Overlapping curve regions are replaced by the convex combination with
    weight i/(i+1) on the partial skeleton; curves crossing a junction of the
    other graph split first; close junction pairs merge with the same weight;
    interior curve crossings spawn new junctions; segments shorter than
    trim_length are removed.
    """
    if i < 1:
        raise GeometryError("merge_step needs i >= 1")
    w = i / (i + 1.0)
    work = _graph_to_work(partial, params, "K")
    s_work = _graph_to_work(incoming, params, "S")

    # split curves crossing the other graph's junctions
    if len(work.junctions):
        _split_at_junctions(s_work, np.asarray(work.junctions),
                            params.junction_merge_distance, "S")
    if len(s_work.junctions):
        _split_at_junctions(work, np.asarray(s_work.junctions),
                            params.junction_merge_distance, "K")

    # graft S junctions into the workspace, remapping curve attachments
    offset = len(work.junctions)
    for pos in s_work.junctions:
        work.add_junction(pos, "S")
    s_curves = [[pts, None if sj is None else sj + offset,
                 None if ej is None else ej + offset]
                for pts, sj, ej in s_work.curves]

    _merge_curves_into(work, s_curves, w, params)
    _merge_junction_pairs(work, w, params, cross_only=True)
    _create_crossing_junctions(work, params)
    _enforce_junction_separation(work, params)
    _trim_short(work, params)
    _snap_attachments(work)
    graph = _work_to_graph(work)
    validate_skeleton_graph(graph)
    return graph


# ---------------------------------------------------------------------------
# Global smoothing
# ---------------------------------------------------------------------------

def smooth(graph: SkeletonGraph, params: FusionParams) -> SkeletonGraph:
    """Exact minimizer of the global fit-plus-curvature objective.

    Per curve: sum_k |v_k - v0_k|^2 + lambda * sum_k |v_{k-1} - 2 v_k +
    v_{k+1}|^2, summed over all curves with each junction as one shared
    variable (it appears in every incident curve's terms). Free endpoints are
    ordinary variables; solved per coordinate as one sparse least-squares
    system by a direct factorization.
    """
    if graph.is_empty():
        return graph
    lam = params.lambda_smooth
    var_pos = []          # initial position per variable
    junction_var = {}     # junction id -> variable id

    def new_var(pos):
        var_pos.append(np.asarray(pos, float))
        return len(var_pos) - 1

    for j, pos in enumerate(graph.junctions):
        junction_var[j] = new_var(pos)

    curve_vars = []
    for seg in graph.segments:
        pts = seg.polyline.vertices
        ids = np.empty(len(pts), dtype=int)
        closed_free = (seg.start_junction is None and seg.end_junction is None
                       and seg.polyline.is_closed(1e-9))
        for k in range(len(pts)):
            if k == 0 and seg.start_junction is not None:
                ids[k] = junction_var[seg.start_junction]
            elif k == len(pts) - 1 and seg.end_junction is not None:
                ids[k] = junction_var[seg.end_junction]
            elif k == len(pts) - 1 and closed_free:
                ids[k] = ids[0]
            else:
                ids[k] = new_var(pts[k])
        curve_vars.append(ids)

    nvar = len(var_pos)
    rows, cols, vals = [], [], []
    rhs_rows = []
    r = 0
    sqrt_lam = np.sqrt(lam)
    for seg, ids in zip(graph.segments, curve_vars):
        pts = seg.polyline.vertices
        for k in range(len(pts)):          # data term, one row per vertex slot
            rows.append(r)
            cols.append(ids[k])
            vals.append(1.0)
            rhs_rows.append(pts[k])
            r += 1
        for k in range(1, len(pts) - 1):   # curvature term
            for off, c in ((-1, 1.0), (0, -2.0), (1, 1.0)):
                rows.append(r)
                cols.append(ids[k + off])
                vals.append(sqrt_lam * c)
            rhs_rows.append(np.zeros(3))
            r += 1
    a = sp.csr_matrix((vals, (rows, cols)), shape=(r, nvar))
    b = np.asarray(rhs_rows)
    ata = (a.T @ a).tocsc()
    atb = a.T @ b
    solution = splu(ata).solve(atb)

    new_junctions = np.asarray([solution[junction_var[j]]
                                for j in range(graph.n_junctions)]).reshape(-1, 3)
    segments = []
    for seg, ids in zip(graph.segments, curve_vars):
        segments.append(SkeletonSegment(Polyline(solution[ids]),
                                        seg.start_junction, seg.end_junction))
    out = SkeletonGraph(new_junctions, segments, graph.provisional)
    validate_skeleton_graph(out)
    return out


def smoothing_objective(graph: SkeletonGraph, reference: SkeletonGraph,
                        lam: float) -> float:
    """Value of the global smoothing objective of `graph` against reference
    positions (used by optimality checks)."""
    total = 0.0
    for seg, ref in zip(graph.segments, reference.segments):
        v = seg.polyline.vertices
        v0 = ref.polyline.vertices
        total += float(np.sum((v - v0) ** 2))
        if len(v) >= 3:
            total += lam * float(np.sum((v[:-2] - 2 * v[1:-1] + v[2:]) ** 2))
    return total


# ---------------------------------------------------------------------------
# Final cleanup and the fusion driver
# ---------------------------------------------------------------------------

def finalize_graph(graph: SkeletonGraph, params: FusionParams) -> SkeletonGraph:
    """Dissolve junctions that ended with valence < 3: valence-2 junctions
    splice their two curves into one, lower valences just detach."""
    curves = [[resample_polyline(s.polyline, params.sample_spacing).vertices.copy(),
               s.start_junction, s.end_junction] for s in graph.segments]
    junctions = [np.asarray(j) for j in graph.junctions]
    alive = [True] * len(junctions)

    def valence_map():
        val = {}
        for _, sj, ej in curves:
            for j in (sj, ej):
                if j is not None:
                    val[j] = val.get(j, 0) + 1
        return val

    changed = True
    while changed:
        changed = False
        val = valence_map()
        for j in range(len(junctions)):
            if not alive[j]:
                continue
            v = val.get(j, 0)
            if v >= 3:
                continue
            alive[j] = False
            changed = True
            if v == 2:
                incident = [(ci, slot) for ci, c in enumerate(curves)
                            for slot in (1, 2) if c[slot] == j]
                (c0, s0), (c1, s1) = incident
                if c0 == c1:  # loop through the junction: close it
                    curves[c0][1] = curves[c0][2] = None
                    continue
                p0 = curves[c0][0] if s0 == 2 else curves[c0][0][::-1]
                p1 = curves[c1][0] if s1 == 1 else curves[c1][0][::-1]
                joined = _dedupe(np.vstack([p0, p1]))
                new_sj = curves[c0][1] if s0 == 2 else curves[c0][2]
                new_ej = curves[c1][2] if s1 == 1 else curves[c1][1]
                curves[c0] = [joined, new_sj, new_ej]
                curves[c1] = None
                curves = [c for c in curves if c is not None]
            else:
                for c in curves:
                    for slot in (1, 2):
                        if c[slot] == j:
                            c[slot] = None
            break
    used = sorted({j for _, sj, ej in curves for j in (sj, ej) if j is not None})
    remap = {old: new for new, old in enumerate(used)}
    segments = []
    for pts, sj, ej in curves:
        if len(pts) >= 2:
            segments.append(SkeletonSegment(Polyline(pts), remap.get(sj), remap.get(ej)))
    out = SkeletonGraph(np.asarray([junctions[j] for j in used]).reshape(-1, 3),
                        segments, np.zeros(len(used), bool))
    validate_skeleton_graph(out, final=False)
    return out


def fuse_all(bundle_skeletons, params: FusionParams,
             transform_new_skeleton: bool = False) -> SkeletonGraph:
    """Fuse bundle skeletons in order: K starts as the first one; each new
    skeleton is rigidly registered (by default the partial skeleton moves
    toward the new one), merged with weight i/(i+1), resampled, and globally
    smoothed. The result is cleaned so every junction has valence >= 3.
    """
    skeletons = list(bundle_skeletons)
    if not skeletons:
        raise GeometryError("fuse_all needs at least one skeleton")
    partial = skeletons[0].resampled(params.sample_spacing)
    for i, incoming in enumerate(skeletons[1:], start=1):
        incoming = incoming.resampled(params.sample_spacing)
        if transform_new_skeleton:
            result = icp_align(incoming, partial, params)
            incoming = incoming.transformed(result.pose)
        else:
            result = icp_align(partial, incoming, params)
            partial = partial.transformed(result.pose)
        partial = merge_step(partial, incoming, i, params)
        partial = partial.resampled(params.sample_spacing)
        partial = smooth(partial, params)
    if len(skeletons) == 1:
        partial = smooth(partial, params)
    return finalize_graph(partial, params)
