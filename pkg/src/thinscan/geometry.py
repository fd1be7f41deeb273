"""Core geometric types shared by the whole pipeline.

All world quantities are in meters. Camera poses follow the camera-to-world
convention (a pose maps camera coordinates into world coordinates); functions
that need the opposite direction take an argument named ``world_to_camera``.
Camera axes: +x right, +y down, +z forward (depth).

All types are treated as immutable after construction: operations return new
values, which makes them safe to share across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial.transform import Rotation


ORTHONORMAL_TOL = 1e-9


class GeometryError(ValueError):
    """Invalid geometric construction or broken invariant."""


# ---------------------------------------------------------------------------
# Rigid poses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RigidPose:
    """Rigid transform p' = R @ p + t with R a proper rotation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        if np.linalg.norm(r.T @ r - np.eye(3)) > 1e-7:
            raise GeometryError("rotation is not orthonormal")
        if np.linalg.det(r) < 0:
            raise GeometryError("rotation has negative determinant")
        r.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "RigidPose":
        return RigidPose(np.eye(3), np.zeros(3))

    @staticmethod
    def from_rotvec(rotvec, translation=(0.0, 0.0, 0.0)) -> "RigidPose":
        return RigidPose(Rotation.from_rotvec(rotvec).as_matrix(), np.asarray(translation, float))

    @staticmethod
    def from_quaternion(qxyzw, translation) -> "RigidPose":
        """Quaternion in (qx, qy, qz, qw) order, scalar last."""
        return RigidPose(Rotation.from_quat(qxyzw).as_matrix(), np.asarray(translation, float))

    def to_quaternion(self) -> np.ndarray:
        """Returns (qx, qy, qz, qw) with qw >= 0 for a canonical form."""
        q = Rotation.from_matrix(self.rotation).as_quat()
        if q[3] < 0:
            q = -q
        return q

    def compose(self, other: "RigidPose") -> "RigidPose":
        """self after other: (self.compose(other))(p) == self(other(p))."""
        return RigidPose(self.rotation @ other.rotation,
                         self.rotation @ other.translation + self.translation)

    def inverse(self) -> "RigidPose":
        rt = self.rotation.T
        return RigidPose(rt, -rt @ self.translation)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array (or a single 3-vector)."""
        p = np.asarray(points, dtype=float)
        if p.ndim == 1:
            return self.rotation @ p + self.translation
        return p @ self.rotation.T + self.translation

    def rotation_angle(self) -> float:
        """Magnitude of the rotation in radians."""
        return float(np.linalg.norm(Rotation.from_matrix(self.rotation).as_rotvec()))


def interpolate_pose(a: RigidPose, b: RigidPose, alpha: float) -> RigidPose:
    """Spherical interpolation of rotation, linear interpolation of translation."""
    key = Rotation.from_matrix(np.stack([a.rotation, b.rotation]))
    from scipy.spatial.transform import Slerp

    rot = Slerp([0.0, 1.0], key)(np.clip(alpha, 0.0, 1.0)).as_matrix()
    t = (1.0 - alpha) * a.translation + alpha * b.translation
    return RigidPose(rot, t)


# ---------------------------------------------------------------------------
# Camera model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise GeometryError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise GeometryError("principal point outside image")


def project_points(points: np.ndarray, world_to_camera: RigidPose,
                   intrinsics: CameraIntrinsics):
    """Project (n, 3) world points into the image.

    Returns (uv, z, valid): pixel coordinates, camera-frame depth in meters,
    and a mask that is False when z <= 0 or the pixel falls outside the image.
    """
    cam = world_to_camera.apply(np.atleast_2d(points))
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intrinsics.fx * cam[:, 0] / z + intrinsics.cx
        v = intrinsics.fy * cam[:, 1] / z + intrinsics.cy
    valid = (z > 0) & (u >= 0) & (u <= intrinsics.width - 1) \
        & (v >= 0) & (v <= intrinsics.height - 1)
    uv = np.stack([u, v], axis=1)
    return uv, z, valid


def project_point(point, world_to_camera: RigidPose, intrinsics: CameraIntrinsics):
    """Project one world point; returns (u, v, depth) or None when out of frame.

    Out-of-frame (including points behind the camera) is a value, not an error.
    """
    uv, z, valid = project_points(np.asarray(point, float)[None, :], world_to_camera, intrinsics)
    if not valid[0]:
        return None
    return float(uv[0, 0]), float(uv[0, 1]), float(z[0])


def backproject_pixels(uv: np.ndarray, depth: np.ndarray,
                       intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift pixels (n, 2) with depths (n,) to camera-frame 3D points."""
    uv = np.atleast_2d(uv)
    x = (uv[:, 0] - intrinsics.cx) / intrinsics.fx * depth
    y = (uv[:, 1] - intrinsics.cy) / intrinsics.fy * depth
    return np.stack([x, y, depth], axis=1)


# ---------------------------------------------------------------------------
# Polylines
# ---------------------------------------------------------------------------

MIN_VERTEX_SEPARATION = 1e-7


@dataclass(frozen=True)
class Polyline:
    """Ordered 3D vertex chain; at least two vertices, consecutive ones distinct."""

    vertices: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        if len(v) < 2:
            raise GeometryError("polyline needs at least two vertices")
        seg = np.linalg.norm(np.diff(v, axis=0), axis=1)
        if np.any(seg <= MIN_VERTEX_SEPARATION):
            raise GeometryError("consecutive polyline vertices coincide")
        v.flags.writeable = False
        object.__setattr__(self, "vertices", v)

    def __len__(self):
        return len(self.vertices)

    @property
    def segment_lengths(self) -> np.ndarray:
        return np.linalg.norm(np.diff(self.vertices, axis=0), axis=1)

    @property
    def arc_positions(self) -> np.ndarray:
        """Cumulative arc length at each vertex, starting at 0."""
        return np.concatenate([[0.0], np.cumsum(self.segment_lengths)])

    @property
    def length(self) -> float:
        return float(self.segment_lengths.sum())

    def is_closed(self, tol: float = 1e-9) -> bool:
        return bool(np.linalg.norm(self.vertices[0] - self.vertices[-1]) <= tol)

    def point_at(self, s) -> np.ndarray:
        """Point(s) at arc length s (clamped to [0, length])."""
        s = np.clip(np.atleast_1d(np.asarray(s, float)), 0.0, self.length)
        arcs = self.arc_positions
        idx = np.clip(np.searchsorted(arcs, s, side="right") - 1, 0, len(arcs) - 2)
        seg_len = arcs[idx + 1] - arcs[idx]
        frac = (s - arcs[idx]) / seg_len
        pts = self.vertices[idx] + frac[:, None] * (self.vertices[idx + 1] - self.vertices[idx])
        return pts

    def transformed(self, pose: RigidPose) -> "Polyline":
        return Polyline(pose.apply(self.vertices))

    def reversed(self) -> "Polyline":
        return Polyline(self.vertices[::-1].copy())


def resample_polyline(line: Polyline, spacing: float) -> Polyline:
    """Resample at uniform arc-length steps; endpoints preserved exactly.

    Consecutive gaps equal `spacing` except the last, which is <= spacing.
    A polyline shorter than `spacing` collapses to its two endpoints.
    """
    if spacing <= 0:
        raise GeometryError("spacing must be positive")
    total = line.length
    if total < spacing:
        if line.is_closed(MIN_VERTEX_SEPARATION):
            # a closed sliver cannot collapse to two coincident endpoints
            return Polyline(np.stack([line.vertices[0], line.point_at(total / 2.0)[0],
                                      line.vertices[-1]]))
        return Polyline(np.stack([line.vertices[0], line.vertices[-1]]))
    n_full = int(np.floor(total / spacing + 1e-12))
    stops = np.arange(n_full + 1) * spacing
    # keep the true endpoint; drop a final stop that would coincide with it
    if total - stops[-1] <= MIN_VERTEX_SEPARATION:
        stops = stops[:-1]
    pts = line.point_at(stops)
    pts = np.vstack([pts, line.vertices[-1]])
    pts[0] = line.vertices[0]
    return Polyline(pts)


# ---------------------------------------------------------------------------
# Labeled point clouds
# ---------------------------------------------------------------------------

NO_LABEL = -1


@dataclass(frozen=True)
class LabeledPointCloud:
    """3D points with per-point source frame index and optional cluster label.

    cluster_id uses -1 for "no label / noise".
    """

    points: np.ndarray
    frame_id: np.ndarray
    cluster_id: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        f = np.asarray(self.frame_id, dtype=np.int32).reshape(-1)
        c = np.asarray(self.cluster_id, dtype=np.int32).reshape(-1)
        if not (len(p) == len(f) == len(c)):
            raise GeometryError("point cloud arrays have mismatched lengths")
        for a in (p, f, c):
            a.flags.writeable = False
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "frame_id", f)
        object.__setattr__(self, "cluster_id", c)

    def __len__(self):
        return len(self.points)

    @staticmethod
    def empty() -> "LabeledPointCloud":
        return LabeledPointCloud(np.zeros((0, 3)), np.zeros(0, np.int32), np.zeros(0, np.int32))

    @staticmethod
    def from_points(points, frame_id=0) -> "LabeledPointCloud":
        points = np.atleast_2d(np.asarray(points, float))
        fid = np.broadcast_to(np.asarray(frame_id, np.int32), len(points)).copy()
        return LabeledPointCloud(points, fid, np.full(len(points), NO_LABEL, np.int32))

    @staticmethod
    def concatenate(clouds) -> "LabeledPointCloud":
        clouds = list(clouds)
        if not clouds:
            return LabeledPointCloud.empty()
        return LabeledPointCloud(
            np.concatenate([c.points for c in clouds]),
            np.concatenate([c.frame_id for c in clouds]),
            np.concatenate([c.cluster_id for c in clouds]),
        )

    def with_cluster_id(self, cluster_id) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points, self.frame_id, cluster_id)

    def select(self, mask) -> "LabeledPointCloud":
        return LabeledPointCloud(self.points[mask], self.frame_id[mask], self.cluster_id[mask])


def transform_points(cloud: LabeledPointCloud, pose: RigidPose) -> LabeledPointCloud:
    """Apply p' = R p + t to every point; labels preserved."""
    return LabeledPointCloud(pose.apply(cloud.points), cloud.frame_id, cloud.cluster_id)


# ---------------------------------------------------------------------------
# Voxel grids
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VoxelGrid:
    """Regular grid of cubic cells; payload arrays are owned by users."""

    origin: np.ndarray
    cell_size: float
    dims: tuple

    def __post_init__(self):
        if self.cell_size <= 0:
            raise GeometryError("cell_size must be positive")
        o = np.asarray(self.origin, dtype=float).reshape(3)
        o.flags.writeable = False
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))

    @property
    def n_cells(self) -> int:
        return int(np.prod(self.dims))

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        """Integer cell index of each point (may fall outside the grid)."""
        p = np.atleast_2d(np.asarray(points, float))
        return np.floor((p - self.origin) / self.cell_size).astype(np.int64)

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        """Cell center positions."""
        idx = np.atleast_2d(np.asarray(idx))
        return self.origin + (idx + 0.5) * self.cell_size

    def contains_index(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        return np.all((idx >= 0) & (idx < np.asarray(self.dims)), axis=1)

    def flat_index(self, idx: np.ndarray) -> np.ndarray:
        idx = np.atleast_2d(idx)
        return (idx[:, 0] * self.dims[1] + idx[:, 1]) * self.dims[2] + idx[:, 2]


def grid_from_bounds(lo, hi, cell_size: float) -> VoxelGrid:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    dims = np.maximum(np.ceil((hi - lo) / cell_size - 1e-9).astype(int), 1)
    return VoxelGrid(lo, cell_size, tuple(dims))


# ---------------------------------------------------------------------------
# Skeleton graphs
# ---------------------------------------------------------------------------

JUNCTION_MERGE_DISTANCE = 0.01   # minimum junction separation after merging
ATTACHMENT_TOL = 1e-9


@dataclass(frozen=True)
class SkeletonSegment:
    """One curve of a skeleton graph with optional junction attachment per end."""

    polyline: Polyline
    start_junction: Optional[int] = None
    end_junction: Optional[int] = None

    def junction_of_end(self, end: int) -> Optional[int]:
        return self.start_junction if end == 0 else self.end_junction


@dataclass(frozen=True)
class SkeletonGraph:
    """Network of 3D curves joined at shared junction nodes.

    Junction positions are stored once and referenced by segment endpoints; an
    attached endpoint vertex coincides with its junction position. Junctions
    flagged provisional may have valence < 3 (they appear mid-fusion); final
    outputs must not have any.
    """

    junctions: np.ndarray
    segments: tuple
    provisional: np.ndarray = field(default=None)

    def __post_init__(self):
        j = np.asarray(self.junctions, dtype=float).reshape(-1, 3)
        prov = self.provisional
        if prov is None:
            prov = np.zeros(len(j), dtype=bool)
        prov = np.asarray(prov, dtype=bool).reshape(-1)
        if len(prov) != len(j):
            raise GeometryError("provisional flags length mismatch")
        j.flags.writeable = False
        prov.flags.writeable = False
        object.__setattr__(self, "junctions", j)
        object.__setattr__(self, "provisional", prov)
        object.__setattr__(self, "segments", tuple(self.segments))

    @property
    def n_junctions(self) -> int:
        return len(self.junctions)

    def is_empty(self) -> bool:
        return len(self.segments) == 0

    def total_length(self) -> float:
        return float(sum(s.polyline.length for s in self.segments))

    def junction_valences(self) -> np.ndarray:
        val = np.zeros(self.n_junctions, dtype=int)
        for seg in self.segments:
            for jid in (seg.start_junction, seg.end_junction):
                if jid is not None:
                    val[jid] += 1
        return val

    def transformed(self, pose: RigidPose) -> "SkeletonGraph":
        segs = [SkeletonSegment(s.polyline.transformed(pose), s.start_junction, s.end_junction)
                for s in self.segments]
        return SkeletonGraph(pose.apply(self.junctions) if self.n_junctions else self.junctions,
                             segs, self.provisional)

    def resampled(self, spacing: float) -> "SkeletonGraph":
        segs = [SkeletonSegment(resample_polyline(s.polyline, spacing),
                                s.start_junction, s.end_junction)
                for s in self.segments]
        return SkeletonGraph(self.junctions, segs, self.provisional)

    def dense_points(self, spacing: float) -> np.ndarray:
        """All curve samples at the given spacing, concatenated."""
        if self.is_empty():
            return np.zeros((0, 3))
        return np.concatenate(
            [resample_polyline(s.polyline, spacing).vertices for s in self.segments])


def validate_skeleton_graph(graph: SkeletonGraph, final: bool = False,
                            junction_min_separation: float = JUNCTION_MERGE_DISTANCE) -> None:
    """Shared invariant check, raises GeometryError on violation.

    With final=True also requires every junction to have valence >= 3 and
    pairwise junction separation above the merge threshold.
    """
    for k, seg in enumerate(graph.segments):
        for end, jid in ((0, seg.start_junction), (-1, seg.end_junction)):
            if jid is None:
                continue
            if not (0 <= jid < graph.n_junctions):
                raise GeometryError(f"segment {k} references junction {jid} out of range")
            d = np.linalg.norm(seg.polyline.vertices[end] - graph.junctions[jid])
            if d > 1e-9 + ATTACHMENT_TOL:
                raise GeometryError(
                    f"segment {k} endpoint is {d:.3e} m away from junction {jid}")
    val = graph.junction_valences()
    if final:
        if np.any(val < 3):
            raise GeometryError("final graph has junctions with valence < 3")
        if np.any(graph.provisional):
            raise GeometryError("final graph has provisional junctions")
        if graph.n_junctions >= 2:
            from scipy.spatial.distance import pdist

            if pdist(graph.junctions).min() < junction_min_separation:
                raise GeometryError("junctions closer than the merge threshold")
    else:
        bad = (val < 3) & ~graph.provisional
        if np.any(bad):
            raise GeometryError("non-provisional junction with valence < 3")
