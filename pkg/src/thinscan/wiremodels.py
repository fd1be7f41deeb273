"""Ground-truth wire models: skeleton graphs with a constant tube radius.

Fixture kinds mirror typical scan targets: a closed triangle, a Y junction, a
tetrahedral frame, a helix, a grid-like rack, and a pair of parallel wires at
a configurable spacing. Closed shapes are built with filleted corners (bent
wire has a finite bend radius); junctions stay sharp.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .geometry import (GeometryError, Polyline, SkeletonGraph, SkeletonSegment,
                       resample_polyline, validate_skeleton_graph)

MIN_RADIUS = 0.001
MAX_RADIUS = 0.012

WIRE_KINDS = ("triangle_loop", "y_junction", "tetra_frame", "helix",
              "grid_rack", "parallel_wires")


@dataclass(frozen=True)
class WireModel:
    """Ground-truth thin structure: skeleton + constant tube radius (meters).

    min_separation records the smallest distance between non-adjacent parts
    of the skeleton (metadata used by spacing-resolution studies).
    """

    skeleton: SkeletonGraph
    radius: float
    min_separation: float

    def __post_init__(self):
        if not (MIN_RADIUS <= self.radius <= MAX_RADIUS):
            raise GeometryError(
                f"wire radius {self.radius * 1e3:.2f} mm outside [1, 12] mm")

    @property
    def diameter(self) -> float:
        return 2.0 * self.radius


def min_nonadjacent_separation(graph: SkeletonGraph, sample_spacing: float = 0.002,
                               arc_window: float = 0.03) -> float:
    """Smallest distance between skeleton parts that are not arc-neighbors.

    Pairs on the same curve closer than `arc_window` along the arc are
    excluded, as are pairs of samples adjacent to a shared junction.
    """
    samples = []
    for ci, seg in enumerate(graph.segments):
        dense = resample_polyline(seg.polyline, sample_spacing)
        arcs = dense.arc_positions
        for k, p in enumerate(dense.vertices):
            samples.append((p, ci, arcs[k]))
    if len(samples) < 2:
        return float("inf")
    pts = np.asarray([s[0] for s in samples])
    curve = np.asarray([s[1] for s in samples])
    arc = np.asarray([s[2] for s in samples])
    jdist = np.full(len(pts), np.inf)
    if graph.n_junctions:
        jdist = cKDTree(graph.junctions).query(pts)[0]
    tree = cKDTree(pts)
    best = float("inf")
    for i, j in tree.query_pairs(max(arc_window, 0.05), output_type="ndarray"):
        if curve[i] == curve[j]:
            gap = abs(arc[i] - arc[j])
            # closed curves wrap around
            total = graph.segments[curve[i]].polyline.length
            if graph.segments[curve[i]].polyline.is_closed(1e-6):
                gap = min(gap, total - gap)
            if gap < arc_window:
                continue
        if jdist[i] < arc_window and jdist[j] < arc_window:
            continue  # both next to a junction (shared corner)
        best = min(best, float(np.linalg.norm(pts[i] - pts[j])))
    return best


def _fillet_loop(corners: np.ndarray, fillet: float, pts_per_arc: int = 9) -> Polyline:
    """Closed polyline through `corners` with circular fillets of given radius."""
    n = len(corners)
    verts = []
    for i in range(n):
        prev_c = corners[(i - 1) % n]
        c = corners[i]
        next_c = corners[(i + 1) % n]
        d_in = (c - prev_c) / np.linalg.norm(c - prev_c)
        d_out = (next_c - c) / np.linalg.norm(next_c - c)
        half = np.arccos(np.clip(-d_in @ d_out, -1, 1)) / 2.0  # half interior angle
        setback = fillet / np.tan(half) if half > 1e-6 else 0.0
        p_in = c - d_in * setback
        p_out = c + d_out * setback
        bisector = (d_out - d_in)
        bisector /= np.linalg.norm(bisector)
        center = c + bisector * fillet / np.sin(half)
        # arc from p_in to p_out around center
        v0 = p_in - center
        v1 = p_out - center
        axis = np.cross(v0, v1)
        norm = np.linalg.norm(axis)
        if norm < 1e-12:
            verts.append(p_in)
            continue
        axis /= norm
        ang = np.arccos(np.clip(v0 @ v1 / (np.linalg.norm(v0) * np.linalg.norm(v1)), -1, 1))
        for t in np.linspace(0.0, 1.0, pts_per_arc):
            a = ang * t
            rot = (v0 * np.cos(a) + np.cross(axis, v0) * np.sin(a)
                   + axis * (axis @ v0) * (1 - np.cos(a)))
            verts.append(center + rot)
    verts.append(verts[0])
    return Polyline(np.asarray(verts))


def _build_triangle_loop(scale: float) -> SkeletonGraph:
    h = scale * np.sqrt(3) / 2
    corners = np.array([[-scale / 2, -h / 3, 0.0],
                        [scale / 2, -h / 3, 0.0],
                        [0.0, 2 * h / 3, 0.0]])
    fillet = min(0.015, scale / 8)
    return SkeletonGraph(np.zeros((0, 3)), [SkeletonSegment(_fillet_loop(corners, fillet))])


def _build_y_junction(scale: float) -> SkeletonGraph:
    center = np.zeros(3)
    segs = []
    for ang in (90.0, 210.0, 330.0):
        a = np.deg2rad(ang)
        tip = np.array([np.cos(a), np.sin(a), 0.0]) * scale / 2
        segs.append(SkeletonSegment(Polyline(np.stack([center, tip])), 0, None))
    return SkeletonGraph(center[None, :], segs)


def _build_tetra_frame(scale: float) -> SkeletonGraph:
    v = np.array([[1.0, 1.0, 1.0], [1.0, -1.0, -1.0],
                  [-1.0, 1.0, -1.0], [-1.0, -1.0, 1.0]]) * (scale / (2 * np.sqrt(2)))
    segs = []
    for i in range(4):
        for j in range(i + 1, 4):
            segs.append(SkeletonSegment(Polyline(np.stack([v[i], v[j]])), i, j))
    return SkeletonGraph(v, segs)


def _build_helix(scale: float) -> SkeletonGraph:
    # tapered coil with a straight lead-out, like a conical spring: the taper
    # and tail weaken the screw symmetry that otherwise lets rigid
    # registration slide along the coil
    pitch = max(0.22 * scale, 0.04)
    turns = 2.25
    t = np.linspace(0.0, turns * 2 * np.pi, int(turns * 72) + 1)
    coil_r = (0.42 - 0.10 * t / t[-1]) * scale
    pts = np.stack([coil_r * np.cos(t), coil_r * np.sin(t),
                    pitch * t / (2 * np.pi)], axis=1)
    d0 = pts[0] - pts[1]
    d0 /= np.linalg.norm(d0)
    tail = pts[0] + np.outer(np.linspace(0.3 * scale, 0.3 * scale / 12, 12), d0)
    pts = np.vstack([tail, pts])
    pts -= pts.mean(axis=0)
    return SkeletonGraph(np.zeros((0, 3)), [SkeletonSegment(Polyline(pts))])


def _build_grid_rack(scale: float) -> SkeletonGraph:
    n_bars = 4
    bar_x = (np.arange(n_bars) - (n_bars - 1) / 2) * scale / n_bars
    rail_y = np.array([-0.3, 0.3]) * scale
    overhang = scale / 8
    junctions = np.array([[x, y, 0.0] for y in rail_y for x in bar_x])

    def jid(rail, bar):
        return rail * n_bars + bar

    segs = []
    for rail in range(2):
        y = rail_y[rail]
        tip_l = np.array([bar_x[0] - overhang, y, 0.0])
        tip_r = np.array([bar_x[-1] + overhang, y, 0.0])
        segs.append(SkeletonSegment(Polyline(np.stack([tip_l, junctions[jid(rail, 0)]])),
                                    None, jid(rail, 0)))
        for b in range(n_bars - 1):
            segs.append(SkeletonSegment(
                Polyline(np.stack([junctions[jid(rail, b)], junctions[jid(rail, b + 1)]])),
                jid(rail, b), jid(rail, b + 1)))
        segs.append(SkeletonSegment(Polyline(np.stack([junctions[jid(rail, n_bars - 1)], tip_r])),
                                    jid(rail, n_bars - 1), None))
    for b in range(n_bars):
        segs.append(SkeletonSegment(
            Polyline(np.stack([junctions[jid(0, b)], junctions[jid(1, b)]])),
            jid(0, b), jid(1, b)))
    return SkeletonGraph(junctions, segs)


def _build_parallel_wires(scale: float, spacing: float) -> SkeletonGraph:
    # staggered lengths: end effects make rigid alignment along the axis well-posed
    a = np.array([[-scale / 2, 0.0, 0.0], [scale / 2, 0.0, 0.0]])
    b = np.array([[-0.35 * scale, spacing, 0.0], [0.35 * scale, spacing, 0.0]])
    return SkeletonGraph(np.zeros((0, 3)),
                         [SkeletonSegment(Polyline(a)), SkeletonSegment(Polyline(b))])


def build_wire_model(kind: str, scale: float, radius: float,
                     spacing: float = None) -> WireModel:
    """Construct a ground-truth wire model.

    kind: one of WIRE_KINDS. scale is the overall extent in meters; radius is
    the tube radius in meters. parallel_wires takes the inter-wire spacing.
    """
    if scale <= 0:
        raise GeometryError("scale must be positive")
    if kind == "triangle_loop":
        graph = _build_triangle_loop(scale)
    elif kind == "y_junction":
        graph = _build_y_junction(scale)
    elif kind == "tetra_frame":
        graph = _build_tetra_frame(scale)
    elif kind == "helix":
        graph = _build_helix(scale)
    elif kind == "grid_rack":
        graph = _build_grid_rack(scale)
    elif kind == "parallel_wires":
        if spacing is None or spacing <= 0:
            raise GeometryError("parallel_wires needs a positive spacing")
        graph = _build_parallel_wires(scale, spacing)
    else:
        raise GeometryError(f"unknown wire model kind: {kind!r}")
    validate_skeleton_graph(graph)
    sep = min_nonadjacent_separation(graph)
    return WireModel(graph, radius, sep)
