"""Per-bundle identification of thin-structure points.

The chain per bundle: subtract large surfaces from each raw depth frame by
comparing against an eroded/dilated raycast rendering of the fused volume,
merge the per-frame difference sets into the bundle's reference frame,
grid-resample, cluster with DBSCAN, drop small/isolated ghost clusters, and
keep only clusters supported by lifted image-space edges.

Only estimated poses are consumed here; ground truth never enters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import distance_transform_edt
from scipy.spatial import cKDTree

from .geometry import (CameraIntrinsics, GeometryError, LabeledPointCloud,
                       RigidPose, backproject_pixels, NO_LABEL)
from .simulate import RgbdFrame


@dataclass(frozen=True)
class Bundle:
    """A group of consecutive frames; its reference frame is the first
    frame's estimated camera pose."""

    frames: tuple
    bundle_id: int

    def __post_init__(self):
        object.__setattr__(self, "frames", tuple(self.frames))
        if not self.frames:
            raise GeometryError("bundle needs at least one frame")
        ids = [f.frame_id for f in self.frames]
        if ids != list(range(ids[0], ids[0] + len(ids))):
            raise GeometryError("bundle frames must be consecutive")

    @property
    def reference_pose(self) -> RigidPose:
        return self.frames[0].pose_estimated


@dataclass(frozen=True)
class MorphologyParams:
    structuring_distance: float = 0.02
    depth_discontinuity_threshold: float = 0.01

    def __post_init__(self):
        if self.structuring_distance <= 0:
            raise GeometryError("structuring_distance must be positive")


@dataclass(frozen=True)
class GhostFilterParams:
    min_cluster_points: int = 10
    isolation_distance: float = 0.10
    dbscan_eps: float = 0.01
    dbscan_min_pts: int = 4
    verify_support_fraction: float = 0.20
    verify_voxel_size: float = 0.005

    def __post_init__(self):
        if min(self.min_cluster_points, self.isolation_distance, self.dbscan_eps,
               self.dbscan_min_pts, self.verify_support_fraction,
               self.verify_voxel_size) <= 0:
            raise GeometryError("ghost filter parameters must be positive")
        if self.verify_support_fraction > 1:
            raise GeometryError("verify_support_fraction must be in (0, 1]")


def partition_bundles(frames, k: int):
    """Consecutive non-overlapping groups of k frames. A trailing remainder of
    at least k/2 frames forms its own bundle, otherwise it joins the last one."""
    if k < 1:
        raise GeometryError("bundle size must be >= 1")
    frames = list(frames)
    if not frames:
        return []
    groups = [frames[i:i + k] for i in range(0, len(frames), k)]
    if len(groups) > 1 and len(groups[-1]) < k / 2:
        groups[-2].extend(groups[-1])
        groups.pop()
    return [Bundle(g, i) for i, g in enumerate(groups)]


# ---------------------------------------------------------------------------
# Large-surface subtraction
# ---------------------------------------------------------------------------

def _discontinuity_edges(depth: np.ndarray, threshold: float) -> np.ndarray:
    """Pixels adjacent (4-conn) to a depth jump or a valid/invalid transition.

    The image border itself does not count as a transition.
    """
    valid = depth > 0
    edges = np.zeros_like(valid)
    for axis, shift in ((0, 1), (0, -1), (1, 1), (1, -1)):
        nb_depth = np.roll(depth, shift, axis=axis)
        nb_valid = np.roll(valid, shift, axis=axis)
        # mask the wrapped row/column
        sl = [slice(None)] * 2
        sl[axis] = 0 if shift == 1 else -1
        nb_valid = nb_valid.copy()
        nb_valid[tuple(sl)] = valid[tuple(sl)]
        nb_depth = nb_depth.copy()
        nb_depth[tuple(sl)] = depth[tuple(sl)]
        jump = valid & nb_valid & (np.abs(depth - nb_depth) > threshold)
        transition = valid & ~nb_valid
        edges |= jump | transition
    return edges


def thin_part_removed_rendering(rendered_depth: np.ndarray, params: MorphologyParams,
                                intrinsics: CameraIntrinsics) -> np.ndarray:
    """Remove thin ribbons from a raycast depth rendering.

    Erodes the valid mask by a metric disk (pixel radius fx * d / z at each
    pixel's own depth) measured from discontinuity edges and invalid pixels,
    then dilates by the same metric radius. Ribbons narrower than twice the
    structuring distance vanish; large surfaces are restored.
    """
    depth = np.asarray(rendered_depth, float)
    valid = depth > 0
    if not valid.any():
        return np.zeros_like(depth)
    edges = _discontinuity_edges(depth, params.depth_discontinuity_threshold)
    obstacle = edges | ~valid
    with np.errstate(divide="ignore"):
        r_px = np.where(valid, intrinsics.fx * params.structuring_distance
                        / np.maximum(depth, 1e-9), 0.0)
    # pad so the image border is not an obstacle
    pad = 2
    free = np.pad(~obstacle, pad, constant_values=True)
    d_obstacle = distance_transform_edt(free)[pad:-pad, pad:-pad]
    eroded = valid & (d_obstacle > r_px)
    if not eroded.any():
        return np.zeros_like(depth)
    d_core = distance_transform_edt(np.pad(~eroded, pad, constant_values=True))[pad:-pad, pad:-pad]
    restored = valid & (d_core <= r_px)
    return np.where(restored, depth, 0.0)


def image_difference_set(frame: RgbdFrame, cleaned_rendering: np.ndarray,
                         margin: float = 0.015, neighborhood: int = 1,
                         volume=None, surface_band: float = 0.2) -> LabeledPointCloud:
    """Raw-depth pixels unexplained by the cleaned rendering, lifted to world.

    A pixel survives when the rendering has no surface there or disagrees with
    the raw depth by more than `margin`. The comparison tolerates a pixel of
    misalignment: a raw pixel is explained when any rendering pixel within the
    (2*neighborhood+1)^2 window matches it (neighborhood=0 compares strictly
    per pixel). Points are back-projected with the frame intrinsics and mapped
    to world by the estimated pose.

    When the fused `volume` is given, surviving points that lie on the fused
    surface (interpolated |tsdf| < surface_band at an observed cell) or
    outside the scan volume are dropped as well: the eroded rendering blanks
    a corridor around thin parts, and raw large-surface pixels inside that
    corridor are still explained by the fusion result itself.
    """
    from scipy.ndimage import maximum_filter, minimum_filter

    raw = frame.depth
    rendered = np.asarray(cleaned_rendering, float)
    if neighborhood > 0:
        size = 2 * neighborhood + 1
        lo = minimum_filter(np.where(rendered > 0, rendered, np.inf), size=size)
        hi = maximum_filter(np.where(rendered > 0, rendered, -np.inf), size=size)
        explained = (raw >= lo - margin) & (raw <= hi + margin)
    else:
        explained = (rendered > 0) & (np.abs(raw - rendered) <= margin)
    keep = (raw > 0) & ~explained
    vs, us = np.nonzero(keep)
    if len(vs) == 0:
        return LabeledPointCloud.empty()
    cam = backproject_pixels(np.stack([us, vs], 1).astype(float), raw[vs, us],
                             frame.intrinsics)
    world = frame.pose_estimated.apply(cam)
    if volume is not None:
        from scipy.ndimage import map_coordinates

        grid = volume.grid
        inside = np.all((world >= grid.origin)
                        & (world <= grid.origin + np.asarray(grid.dims) * grid.cell_size),
                        axis=1)
        coords = ((world - grid.origin) / grid.cell_size - 0.5).T
        tval = map_coordinates(volume.tsdf, coords, order=1, mode="nearest")
        wval = map_coordinates(volume.weight, coords, order=1, mode="constant", cval=0.0)
        on_surface = (wval > 0.5) & (np.abs(tval) < surface_band)
        world = world[inside & ~on_surface]
        if len(world) == 0:
            return LabeledPointCloud.empty()
    return LabeledPointCloud.from_points(world, frame.frame_id)


# ---------------------------------------------------------------------------
# Bundle merge and resampling
# ---------------------------------------------------------------------------

def grid_resample(cloud: LabeledPointCloud, cell: float) -> LabeledPointCloud:
    """One representative point (cell centroid) per occupied grid cell.

    The representative keeps the smallest frame_id among the cell's points.
    """
    if len(cloud) == 0 or cell <= 0:
        return cloud
    idx = np.floor((cloud.points - cloud.points.min(axis=0)) / cell).astype(np.int64)
    dims = idx.max(axis=0) + 1
    flat = (idx[:, 0] * dims[1] + idx[:, 1]) * dims[2] + idx[:, 2]
    order = np.argsort(flat, kind="stable")
    flat_sorted = flat[order]
    uniq, starts = np.unique(flat_sorted, return_index=True)
    counts = np.diff(np.append(starts, len(flat_sorted)))
    pts_sorted = cloud.points[order]
    sums = np.add.reduceat(pts_sorted, starts, axis=0)
    centroids = sums / counts[:, None]
    fids = np.minimum.reduceat(cloud.frame_id[order], starts)
    return LabeledPointCloud(centroids, fids, np.full(len(uniq), NO_LABEL, np.int32))


def bundle_difference_set(bundle: Bundle, per_frame_sets,
                          resample_cell: float = 0.0025) -> LabeledPointCloud:
    """Merge per-frame difference sets into the bundle reference frame and
    grid-resample for even density."""
    to_ref = bundle.reference_pose.inverse()
    merged = LabeledPointCloud.concatenate(
        [LabeledPointCloud(to_ref.apply(s.points), s.frame_id, s.cluster_id)
         for s in per_frame_sets if len(s)])
    return grid_resample(merged, resample_cell)


# ---------------------------------------------------------------------------
# Clustering and ghost removal
# ---------------------------------------------------------------------------

def dbscan(cloud: LabeledPointCloud, eps: float, min_pts: int) -> LabeledPointCloud:
    """Density clustering; noise points get label -1.

    A point is core when it has at least min_pts neighbors within eps
    (counting itself). Cluster ids are assigned in order of the first core
    point index, so the labeling is deterministic.
    """
    if eps <= 0 or min_pts < 1:
        raise GeometryError("dbscan needs eps > 0 and min_pts >= 1")
    n = len(cloud)
    if n == 0:
        return cloud
    tree = cKDTree(cloud.points)
    neighbors = tree.query_ball_point(cloud.points, eps, workers=-1)
    core = np.asarray([len(nb) >= min_pts for nb in neighbors])
    labels = np.full(n, NO_LABEL, np.int32)
    cluster = 0
    for i in range(n):
        if labels[i] != NO_LABEL or not core[i]:
            continue
        labels[i] = cluster
        queue = [i]
        while queue:
            j = queue.pop()
            if not core[j]:
                continue
            for nb in neighbors[j]:
                if labels[nb] == NO_LABEL:
                    labels[nb] = cluster
                    if core[nb]:
                        queue.append(nb)
        cluster += 1
    return cloud.with_cluster_id(labels)


def _cluster_indices(cloud: LabeledPointCloud):
    ids = np.unique(cloud.cluster_id)
    return [c for c in ids if c != NO_LABEL]


def remove_ghosts(cloud: LabeledPointCloud, params: GhostFilterParams) -> LabeledPointCloud:
    """Drop small clusters, then clusters isolated from every survivor.

    Isolation uses the closest-point distance between clusters. A cluster is
    isolated when no other surviving cluster lies within isolation_distance;
    isolated clusters are dropped unless they are the only cluster or belong
    to the largest connected group (by point count), which always survives.
    """
    ids = _cluster_indices(cloud)
    sizes = {c: int((cloud.cluster_id == c).sum()) for c in ids}
    big = [c for c in ids if sizes[c] >= params.min_cluster_points]
    if not big:
        return cloud.select(np.zeros(len(cloud), bool))
    if len(big) == 1:
        return cloud.select(cloud.cluster_id == big[0])
    trees = {c: cKDTree(cloud.points[cloud.cluster_id == c]) for c in big}
    adj = {c: set() for c in big}
    for i, a in enumerate(big):
        for b in big[i + 1:]:
            d = trees[a].query(cloud.points[cloud.cluster_id == b])[0].min()
            if d <= params.isolation_distance:
                adj[a].add(b)
                adj[b].add(a)
    # connected components of the proximity graph
    components = []
    seen = set()
    for c in big:
        if c in seen:
            continue
        comp = set()
        stack = [c]
        while stack:
            x = stack.pop()
            if x in comp:
                continue
            comp.add(x)
            stack.extend(adj[x] - comp)
        seen |= comp
        components.append(comp)
    largest = max(components, key=lambda comp: sum(sizes[c] for c in comp))
    keep = set(largest)
    keep |= {c for c in big if adj[c]}
    mask = np.isin(cloud.cluster_id, list(keep))
    return cloud.select(mask)


def rgb_verify(cloud: LabeledPointCloud, bundle: Bundle,
               params: GhostFilterParams) -> LabeledPointCloud:
    """Keep clusters supported by image-space curve edges.

    Every edge pixel of every frame in the bundle is lifted with the raw depth
    at (or next to) the pixel, mapped into the bundle reference frame, and
    binned into each cluster's voxelization; a cluster survives when at least
    verify_support_fraction of its voxels received a lifted sample.
    """
    ids = _cluster_indices(cloud)
    if not ids or len(cloud) == 0:
        return cloud.select(np.zeros(len(cloud), bool))
    cell = params.verify_voxel_size
    origin = cloud.points.min(axis=0) - cell
    lifted = []
    to_ref = bundle.reference_pose.inverse()
    for frame in bundle.frames:
        vs, us = np.nonzero(frame.edges)
        if len(vs) == 0:
            continue
        depth = frame.depth[vs, us]
        # fall back to the nearest (smallest) valid depth within 1 px; an edge
        # pixel sits on the thin structure, so the closest return is the wire
        missing = depth <= 0
        if missing.any():
            h, w = frame.depth.shape
            best = np.full(missing.sum(), np.inf)
            for du, dv in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
                uu = np.clip(us[missing] + du, 0, w - 1)
                vv = np.clip(vs[missing] + dv, 0, h - 1)
                cand = frame.depth[vv, uu]
                best = np.where((cand > 0) & (cand < best), cand, best)
            depth = depth.copy()
            depth[missing] = np.where(np.isfinite(best), best, 0.0)
        ok = depth > 0
        if not ok.any():
            continue
        cam = backproject_pixels(np.stack([us[ok], vs[ok]], 1).astype(float),
                                 depth[ok], frame.intrinsics)
        lifted.append(to_ref.apply(frame.pose_estimated.apply(cam)))
    lifted_idx = set()
    if lifted:
        pts = np.concatenate(lifted)
        idx = np.floor((pts - origin) / cell).astype(np.int64)
        lifted_idx = set(map(tuple, idx))
    keep = []
    for c in ids:
        vox = np.floor((cloud.points[cloud.cluster_id == c] - origin) / cell).astype(np.int64)
        occupied = set(map(tuple, vox))
        support = sum(1 for v in occupied if v in lifted_idx)
        if support >= params.verify_support_fraction * len(occupied):
            keep.append(c)
    mask = np.isin(cloud.cluster_id, keep)
    return cloud.select(mask)
