"""Wire radius estimation from image-space strip widths, and tube mesh
generation along the final skeleton.

Radius estimation projects skeleton samples into their bundle's frames,
measures the width of the single edge-bounded strip inside a small window
around each projection, converts to metric units with the sample's depth,
and takes the mode of the accumulated width histogram.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (CameraIntrinsics, GeometryError, SkeletonGraph,
                       resample_polyline)


class RadiusEstimationError(RuntimeError):
    """No usable measurement boxes were found."""

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class RadiusEstimatorParams:
    box_size: int = 16             # pixel window side, even
    histogram_bin: float = 0.25    # histogram bin width in millimeters
    samples_per_skeleton: int = 200

    def __post_init__(self):
        if self.box_size < 4 or self.box_size % 2:
            raise GeometryError("box_size must be even and >= 4")
        if self.histogram_bin <= 0:
            raise GeometryError("histogram_bin must be positive")


@dataclass(frozen=True)
class RadiusEstimate:
    radius_mm: float
    n_boxes_accepted: int
    n_boxes_total: int
    bin_centers_mm: np.ndarray
    bin_counts: np.ndarray


def measure_strip_width(edge_window: np.ndarray, min_scanlines: int = 4,
                        good_fraction: float = 0.8):
    """Width in pixels of the strip bounded by two edge curves in a window.

    The strip axis is the dominant direction of the edge pixels; scanlines
    run perpendicular to it. A scanline is usable when its edge pixels form
    exactly two groups (the two boundary curves); the window is accepted only
    if at least `good_fraction` of non-empty scanlines are usable. Width per
    scanline is the distance between the group centers plus one pixel (the
    boundary pixels are the outermost covered ones). Returns the mean width
    or None when the window is rejected.
    """
    vs, us = np.nonzero(edge_window)
    if len(vs) < 2 * min_scanlines:
        return None
    pts = np.stack([us, vs], axis=1).astype(float)
    centered = pts - pts.mean(axis=0)
    cov = centered.T @ centered
    evals, evecs = np.linalg.eigh(cov)
    axis = evecs[:, 1]       # dominant direction
    perp = evecs[:, 0]
    a = centered @ axis
    b = centered @ perp
    bins = np.round(a).astype(int)
    widths = []
    n_nonempty = 0
    for bin_id in np.unique(bins):
        sel = bins == bin_id
        if not sel.any():
            continue
        n_nonempty += 1
        bb = np.sort(b[sel])
        gaps = np.nonzero(np.diff(bb) > 1.5)[0]
        if len(gaps) != 1:
            continue  # not exactly two edge crossings
        g1 = bb[:gaps[0] + 1]
        g2 = bb[gaps[0] + 1:]
        widths.append(abs(g2.mean() - g1.mean()) + 1.0)
    if n_nonempty < min_scanlines or len(widths) < good_fraction * n_nonempty:
        return None
    return float(np.mean(widths))


def estimate_radius(bundle_skeletons, bundles, params: RadiusEstimatorParams) -> RadiusEstimate:
    """Wire radius in millimeters from all accepted measurement boxes.

    Samples each bundle skeleton uniformly, projects the samples into every
    frame of its bundle (estimated poses), measures the strip width in the
    box_size window of the frame's edge map around each in-frame projection,
    converts to metric with the sample's camera depth, and returns half of
    the most populated histogram bin center.
    """
    if len(bundle_skeletons) != len(bundles):
        raise GeometryError("skeleton/bundle lists must correspond")
    half = params.box_size // 2
    widths_mm = []
    n_total = 0
    for skel, bundle in zip(bundle_skeletons, bundles):
        if skel.is_empty():
            continue
        dense = skel.dense_points(0.002)
        step = max(len(dense) // params.samples_per_skeleton, 1)
        samples_ref = dense[::step]
        world = bundle.reference_pose.apply(samples_ref)
        for frame in bundle.frames:
            w2c = frame.pose_estimated.inverse()
            K = frame.intrinsics
            cam = w2c.apply(world)
            z = cam[:, 2]
            with np.errstate(divide="ignore", invalid="ignore"):
                u = K.fx * cam[:, 0] / z + K.cx
                v = K.fy * cam[:, 1] / z + K.cy
            ok = (z > 0.05) & (u >= half) & (u < K.width - half) \
                & (v >= half) & (v < K.height - half)
            for ui, vi, zi in zip(u[ok], v[ok], z[ok]):
                n_total += 1
                cu, cv = int(round(ui)), int(round(vi))
                window = frame.edges[cv - half:cv + half, cu - half:cu + half]
                w_px = measure_strip_width(window)
                if w_px is not None:
                    widths_mm.append(w_px * zi / K.fx * 1000.0)
    if not widths_mm:
        raise RadiusEstimationError(
            "no accepted measurement boxes",
            diagnostics={"n_boxes_total": n_total, "n_boxes_accepted": 0})
    widths_mm = np.asarray(widths_mm)
    bin_w = params.histogram_bin
    idx = np.floor(widths_mm / bin_w).astype(int)
    counts = np.bincount(idx)
    mode = int(np.argmax(counts))
    centers = (np.arange(len(counts)) + 0.5) * bin_w
    return RadiusEstimate(radius_mm=float(centers[mode] / 2.0),
                          n_boxes_accepted=len(widths_mm),
                          n_boxes_total=n_total,
                          bin_centers_mm=centers,
                          bin_counts=counts)


# ---------------------------------------------------------------------------
# Tube mesh sweeping
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TubeMeshParams:
    radial_segments: int = 12
    cap_junctions: bool = True   # spheres at junction nodes
    cap_ends: bool = True        # fan caps on free tube ends

    def __post_init__(self):
        if self.radial_segments < 3:
            raise GeometryError("radial_segments must be >= 3")


@dataclass(frozen=True)
class TriangleMesh:
    vertices: np.ndarray
    faces: np.ndarray

    @staticmethod
    def empty():
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), int))

    def area(self) -> float:
        if len(self.faces) == 0:
            return 0.0
        a = self.vertices[self.faces[:, 0]]
        b = self.vertices[self.faces[:, 1]]
        c = self.vertices[self.faces[:, 2]]
        return float(0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1).sum())


def _rm_frames(pts: np.ndarray):
    """Rotation-minimizing frames (double reflection) along a polyline.

    Returns unit tangents and two normal fields n1, n2 per vertex.
    """
    n = len(pts)
    tangents = np.zeros((n, 3))
    tangents[:-1] = pts[1:] - pts[:-1]
    tangents[-1] = tangents[-2]
    norms = np.linalg.norm(tangents, axis=1, keepdims=True)
    tangents = tangents / np.maximum(norms, 1e-18)
    ref = np.array([0.0, 0.0, 1.0])
    if abs(tangents[0] @ ref) > 0.9:
        ref = np.array([0.0, 1.0, 0.0])
    n1 = np.zeros((n, 3))
    n1[0] = np.cross(tangents[0], ref)
    n1[0] /= np.linalg.norm(n1[0])
    for i in range(n - 1):
        # double reflection of (n1, t) over the step and the next tangent
        v1 = pts[i + 1] - pts[i]
        c1 = v1 @ v1
        if c1 < 1e-18:
            n1[i + 1] = n1[i]
            continue
        rl = n1[i] - (2.0 / c1) * (v1 @ n1[i]) * v1
        tl = tangents[i] - (2.0 / c1) * (v1 @ tangents[i]) * v1
        v2 = tangents[i + 1] - tl
        c2 = v2 @ v2
        n1[i + 1] = rl if c2 < 1e-18 else rl - (2.0 / c2) * (v2 @ rl) * v2
        n1[i + 1] /= np.linalg.norm(n1[i + 1])
    n2 = np.cross(tangents, n1)
    return tangents, n1, n2


def _uv_sphere(center, radius, n_seg):
    n_lat = max(n_seg // 2, 2)
    verts = [center + np.array([0.0, 0.0, radius])]
    for i in range(1, n_lat):
        phi = np.pi * i / n_lat
        for j in range(n_seg):
            th = 2 * np.pi * j / n_seg
            verts.append(center + radius * np.array(
                [np.sin(phi) * np.cos(th), np.sin(phi) * np.sin(th), np.cos(phi)]))
    verts.append(center + np.array([0.0, 0.0, -radius]))
    faces = []
    for j in range(n_seg):
        faces.append([0, 1 + j, 1 + (j + 1) % n_seg])
    for i in range(n_lat - 2):
        row0 = 1 + i * n_seg
        row1 = row0 + n_seg
        for j in range(n_seg):
            a = row0 + j
            b = row0 + (j + 1) % n_seg
            c = row1 + j
            d = row1 + (j + 1) % n_seg
            faces.append([a, c, d])
            faces.append([a, d, b])
    last = len(verts) - 1
    row = last - n_seg
    for j in range(n_seg):
        faces.append([last, row + (j + 1) % n_seg, row + j])
    return np.asarray(verts), np.asarray(faces, int)


def sweep_tube_mesh(skeleton: SkeletonGraph, radius: float,
                    params: TubeMeshParams) -> TriangleMesh:
    """Sweep a circular cross-section along every curve of the skeleton.

    Uses rotation-minimizing frames; closed curves weld their seam with a
    twist-compensated closure. Junction nodes optionally get spheres of the
    same radius so incident tubes join. All side-wall vertices lie at
    distance `radius` from the curve.
    """
    if radius <= 0:
        raise GeometryError("radius must be positive")
    all_verts = []
    all_faces = []

    def emit(verts, faces):
        base = sum(len(v) for v in all_verts)
        all_verts.append(verts)
        all_faces.append(np.asarray(faces, int) + base)

    nseg = params.radial_segments
    circle = np.arange(nseg) * 2 * np.pi / nseg
    for seg in skeleton.segments:
        pts = seg.polyline.vertices
        closed = seg.polyline.is_closed(1e-9) \
            and seg.start_junction is None and seg.end_junction is None
        ring_pts = pts[:-1] if closed else pts
        tangents, n1, n2 = _rm_frames(pts)
        twist = np.zeros(len(ring_pts))
        if closed:
            # distribute the frame holonomy so the last ring meets the first
            v1 = _rm_frames(np.vstack([pts[-2], pts[0], pts[1]]))
            end_n1 = n1[-1]
            cosang = np.clip(end_n1 @ n1[0], -1, 1)
            sinang = np.cross(end_n1, n1[0]) @ tangents[0]
            hol = np.arctan2(sinang, cosang)
            twist = hol * np.arange(len(ring_pts)) / len(ring_pts)
        rings = []
        for i, p in enumerate(ring_pts):
            ang = circle + twist[i]
            ring = p + radius * (np.cos(ang)[:, None] * n1[i]
                                 + np.sin(ang)[:, None] * n2[i])
            rings.append(ring)
        verts = np.concatenate(rings)
        faces = []
        n_rings = len(rings)
        last = n_rings if closed else n_rings - 1
        for i in range(last):
            i2 = (i + 1) % n_rings
            for j in range(nseg):
                a = i * nseg + j
                b = i * nseg + (j + 1) % nseg
                c = i2 * nseg + j
                d = i2 * nseg + (j + 1) % nseg
                faces.append([a, c, d])
                faces.append([a, d, b])
        if not closed and params.cap_ends:
            start_c = len(verts)
            verts = np.vstack([verts, pts[0], pts[-1]])
            for j in range(nseg):
                faces.append([start_c, (j + 1) % nseg, j])
                base = (n_rings - 1) * nseg
                faces.append([start_c + 1, base + j, base + (j + 1) % nseg])
        emit(verts, faces)
    if params.cap_junctions:
        for center in skeleton.junctions:
            sv, sf = _uv_sphere(center, radius, nseg)
            emit(sv, sf)
    if not all_verts:
        return TriangleMesh.empty()
    return TriangleMesh(np.concatenate(all_verts), np.concatenate(all_faces))
