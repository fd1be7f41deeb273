"""Synthetic RGBD scanner: ground-truth scenes, drifting camera trajectories,
and noisy depth frames with edge maps.

This stands in for a handheld depth camera plus a SLAM front end: render_frame
produces exact ray-cast depth against the wire tube and background boxes, then
corrupts it (Gaussian noise, quantization, correlated thin-pixel dropout,
ghost blobs); generate_trajectory produces true poses plus drifted estimates.
Everything is deterministic per seed; frames may be rendered concurrently.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import _kernels
from .geometry import (CameraIntrinsics, GeometryError, RigidPose,
                       interpolate_pose, resample_polyline)
from .wiremodels import WireModel

# pixel identity labels used by the simulator
LABEL_EMPTY = 0
LABEL_WIRE = 1
LABEL_BACKGROUND = 2
LABEL_GHOST = 3


@dataclass(frozen=True)
class Box:
    """Axis-aligned box; thin slabs model walls and table tops."""

    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, float).reshape(3)
        hi = np.asarray(self.hi, float).reshape(3)
        if np.any(hi <= lo):
            raise GeometryError("box needs hi > lo on every axis")
        lo.flags.writeable = False
        hi.flags.writeable = False
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)


@dataclass(frozen=True)
class SceneSpec:
    """A wire model plus background geometry."""

    wire: WireModel
    background: tuple = ()
    wire_clearance: float = 0.02

    def __post_init__(self):
        object.__setattr__(self, "background", tuple(self.background))
        if self.wire_clearance < 0.02:
            raise GeometryError("wire_clearance must be at least 2 cm")

    def bounds(self, margin: float = 0.05):
        pts = self.wire.skeleton.dense_points(0.01)
        lo = pts.min(axis=0) - self.wire.radius
        hi = pts.max(axis=0) + self.wire.radius
        for box in self.background:
            lo = np.minimum(lo, box.lo)
            hi = np.maximum(hi, box.hi)
        return lo - margin, hi + margin


@dataclass(frozen=True)
class ScanNoiseModel:
    """Depth corruption model.

    depth_sigma: per-pixel Gaussian depth noise (m). dropout_prob_thin:
    marginal probability that a wire pixel returns no depth (applied as
    spatially correlated blotches). ghost_rate: expected spurious blobs per
    frame. quantization_step: depth rounding step (m). clutter_edge_rate:
    expected spurious edge segments per frame on background texture.
    """

    depth_sigma: float = 0.0025
    dropout_prob_thin: float = 0.35
    ghost_rate: float = 3.0
    quantization_step: float = 0.001
    clutter_edge_rate: float = 8.0

    def __post_init__(self):
        if not 0.0 <= self.dropout_prob_thin <= 1.0:
            raise GeometryError("dropout_prob_thin must be a probability")
        if self.depth_sigma < 0 or self.ghost_rate < 0 or self.quantization_step < 0 \
                or self.clutter_edge_rate < 0:
            raise GeometryError("noise parameters must be non-negative")

    @staticmethod
    def noiseless() -> "ScanNoiseModel":
        return ScanNoiseModel(0.0, 0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class TrajectorySpec:
    """Keypoint path (camera-to-world poses) plus per-frame drift sigmas.

    Sigmas are the expected per-frame increment norms of the pose random walk
    (rotation in radians, translation in meters).
    """

    n_frames: int
    keypoints: tuple
    drift_rot_sigma: float = 0.0
    drift_trans_sigma: float = 0.0

    def __post_init__(self):
        if self.n_frames < 1:
            raise GeometryError("n_frames must be >= 1")
        if len(self.keypoints) < 1:
            raise GeometryError("need at least one keypoint")
        object.__setattr__(self, "keypoints", tuple(self.keypoints))


@dataclass(frozen=True)
class RgbdFrame:
    """One synthetic frame: depth (m, 0 = no return), binary edge map, true
    and estimated camera-to-world poses. render_seed/noise record simulator
    provenance (None for frames loaded from disk)."""

    depth: np.ndarray
    edges: np.ndarray
    pose_true: RigidPose
    pose_estimated: RigidPose
    intrinsics: CameraIntrinsics
    frame_id: int
    render_seed: Optional[int] = None
    noise: Optional[ScanNoiseModel] = None

    def __post_init__(self):
        shape = (self.intrinsics.height, self.intrinsics.width)
        if self.depth.shape != shape or self.edges.shape != shape:
            raise GeometryError("frame image dimensions do not match intrinsics")


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def orbit_keypoints(center, radius: float, elevation_deg: float,
                    start_deg: float, end_deg: float, n_keypoints: int):
    """Camera poses on a circular arc around `center`, looking at it (z up)."""
    center = np.asarray(center, float)
    up = np.array([0.0, 0.0, 1.0])
    poses = []
    el = np.deg2rad(elevation_deg)
    for az_deg in np.linspace(start_deg, end_deg, max(n_keypoints, 1)):
        az = np.deg2rad(az_deg)
        eye = center + radius * np.array([np.cos(az) * np.cos(el),
                                          np.sin(az) * np.cos(el),
                                          np.sin(el)])
        fwd = center - eye
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, up)
        nr = np.linalg.norm(right)
        if nr < 1e-9:  # looking straight up/down
            right = np.array([1.0, 0.0, 0.0])
        else:
            right /= nr
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd], axis=1)
        poses.append(RigidPose(rot, eye))
    return poses


def generate_trajectory(spec: TrajectorySpec, seed: int):
    """Returns [(pose_true, pose_estimated)] for every frame.

    True poses interpolate the keypoints (slerp rotation, linear translation);
    estimates right-compose an accumulated seeded SE(3) random walk, so frame 0
    is drift-free and increments are i.i.d. per frame.
    """
    n = spec.n_frames
    keys = list(spec.keypoints)
    if len(keys) == 1:
        true_poses = [keys[0]] * n
    else:
        key_t = np.linspace(0.0, 1.0, len(keys))
        frame_t = np.linspace(0.0, 1.0, n) if n > 1 else np.array([0.0])
        true_poses = []
        for t in frame_t:
            k = min(np.searchsorted(key_t, t, side="right") - 1, len(keys) - 2)
            k = max(k, 0)
            alpha = (t - key_t[k]) / (key_t[k + 1] - key_t[k])
            true_poses.append(interpolate_pose(keys[k], keys[k + 1], alpha))
    rng = np.random.default_rng(seed)
    walk = RigidPose.identity()
    out = [(true_poses[0], true_poses[0])]
    sig_r = spec.drift_rot_sigma / np.sqrt(3.0)
    sig_t = spec.drift_trans_sigma / np.sqrt(3.0)
    for i in range(1, n):
        rotvec = rng.normal(0.0, 1.0, 3) * sig_r
        tinc = rng.normal(0.0, 1.0, 3) * sig_t
        walk = walk.compose(RigidPose.from_rotvec(rotvec, tinc))
        out.append((true_poses[i], true_poses[i].compose(walk)))
    return out


# ---------------------------------------------------------------------------
# Rendering
# ---------------------------------------------------------------------------

RENDER_SUBDIV = 0.025  # capsule subdivision for tight pixel windows


def _pixel_rays(pose_c2w: RigidPose, K: CameraIntrinsics):
    """Unit world-space ray directions per pixel plus the t -> camera-depth factor."""
    us = np.arange(K.width)
    vs = np.arange(K.height)
    uu, vv = np.meshgrid(us, vs)
    x = (uu - K.cx) / K.fx
    y = (vv - K.cy) / K.fy
    d_cam = np.stack([x, y, np.ones_like(x)], axis=-1)
    norm = np.linalg.norm(d_cam, axis=-1, keepdims=True)
    d_cam /= norm
    dirs = d_cam @ pose_c2w.rotation.T
    znorm = d_cam[..., 2].copy()  # camera depth = t * znorm
    return np.ascontiguousarray(dirs), np.ascontiguousarray(znorm)


def _wire_capsules(wire: WireModel):
    caps = []
    for seg in wire.skeleton.segments:
        dense = resample_polyline(seg.polyline, RENDER_SUBDIV)
        v = dense.vertices
        for a, b in zip(v[:-1], v[1:]):
            caps.append([*a, *b, wire.radius])
    return np.asarray(caps, float).reshape(-1, 7)


def _capsule_bboxes(caps: np.ndarray, pose_c2w: RigidPose, K: CameraIntrinsics):
    """Conservative inclusive pixel windows per capsule."""
    n = len(caps)
    bboxes = np.zeros((n, 4), np.int64)
    w2c = pose_c2w.inverse()
    ends = np.concatenate([caps[:, 0:3], caps[:, 3:6]])
    cam = w2c.apply(ends)
    z = cam[:, 2]
    full = np.array([0, K.width - 1, 0, K.height - 1], np.int64)
    for i in range(n):
        za, zb = z[i], z[n + i]
        if za < 0.05 or zb < 0.05:
            bboxes[i] = full  # endpoint near/behind camera: no safe window
            continue
        ua = K.fx * cam[i, 0] / za + K.cx
        va = K.fy * cam[i, 1] / za + K.cy
        ub = K.fx * cam[n + i, 0] / zb + K.cx
        vb = K.fy * cam[n + i, 1] / zb + K.cy
        m = K.fx * caps[i, 6] / min(za, zb) + 2.0
        u0 = int(np.floor(min(ua, ub) - m))
        u1 = int(np.ceil(max(ua, ub) + m))
        v0 = int(np.floor(min(va, vb) - m))
        v1 = int(np.ceil(max(va, vb) + m))
        if u1 < 0 or u0 > K.width - 1 or v1 < 0 or v0 > K.height - 1:
            bboxes[i] = (0, -1, 0, -1)  # fully off-frame
            continue
        bboxes[i] = (max(u0, 0), min(u1, K.width - 1), max(v0, 0), min(v1, K.height - 1))
    return bboxes


def render_clean(scene: SceneSpec, pose_c2w: RigidPose, K: CameraIntrinsics):
    """Exact nearest-hit depth and per-pixel identity labels (no noise)."""
    dirs, znorm = _pixel_rays(pose_c2w, K)
    t_img = np.full((K.height, K.width), np.inf)
    id_img = np.zeros((K.height, K.width), np.int32)
    caps = _wire_capsules(scene.wire)
    if len(caps):
        bboxes = _capsule_bboxes(caps, pose_c2w, K)
        _kernels.render_capsules(dirs, pose_c2w.translation, caps, bboxes,
                                 t_img, id_img, LABEL_WIRE)
    if scene.background:
        boxes = np.asarray([[*b.lo, *b.hi] for b in scene.background], float)
        _kernels.render_boxes(dirs, pose_c2w.translation, boxes, t_img, id_img,
                              LABEL_BACKGROUND)
    depth = np.where(np.isfinite(t_img), t_img * znorm, 0.0)
    return depth, id_img


def _silhouette_edges(wire_mask: np.ndarray) -> np.ndarray:
    pad = np.pad(wire_mask, 1, constant_values=False)
    interior = pad[:-2, 1:-1] & pad[2:, 1:-1] & pad[1:-1, :-2] & pad[1:-1, 2:]
    return wire_mask & ~interior


def _clutter_edges(labels: np.ndarray, rate: float, rng) -> np.ndarray:
    h, w = labels.shape
    out = np.zeros((h, w), bool)
    for _ in range(rng.poisson(rate)):
        u0 = rng.uniform(0, w - 1)
        v0 = rng.uniform(0, h - 1)
        ang = rng.uniform(0, 2 * np.pi)
        length = rng.uniform(8, 40)
        n = int(length) + 1
        us = np.clip(np.round(u0 + np.cos(ang) * np.arange(n)), 0, w - 1).astype(int)
        vs = np.clip(np.round(v0 + np.sin(ang) * np.arange(n)), 0, h - 1).astype(int)
        out[vs, us] = True
    return out & (labels == LABEL_BACKGROUND)


def _correlated_dropout_mask(wire_mask: np.ndarray, prob: float, rng) -> np.ndarray:
    """Blotchy mask over wire pixels with the given marginal probability."""
    if prob <= 0 or not wire_mask.any():
        return np.zeros_like(wire_mask)
    if prob >= 1.0:
        return wire_mask.copy()
    fld = gaussian_filter(rng.normal(size=wire_mask.shape), sigma=3.0)
    vals = fld[wire_mask]
    thresh = np.quantile(vals, 1.0 - prob)
    return wire_mask & (fld > thresh)


def render_frame(scene: SceneSpec, pose_true: RigidPose, K: CameraIntrinsics,
                 noise: ScanNoiseModel, seed: int,
                 pose_estimated: Optional[RigidPose] = None,
                 frame_id: int = 0) -> RgbdFrame:
    """Render one noisy frame; deterministic per (scene, pose, K, noise, seed)."""
    depth, _, edges = _render_noisy(scene, pose_true, K, noise, seed)
    return RgbdFrame(depth, edges, pose_true,
                     pose_estimated if pose_estimated is not None else pose_true,
                     K, frame_id, render_seed=seed, noise=noise)


def _render_noisy(scene, pose_true, K, noise, seed):
    """Shared implementation: returns (depth, labels, edges)."""
    rng = np.random.default_rng(seed)
    depth, labels = render_clean(scene, pose_true, K)
    labels = labels.copy()
    valid = depth > 0
    wire_mask = labels == LABEL_WIRE
    # corruption order: noise, quantization, dropout, ghosts
    if noise.depth_sigma > 0:
        depth = np.where(valid, depth + rng.normal(0, noise.depth_sigma, depth.shape), 0.0)
        depth = np.maximum(depth, 0.0)
    if noise.quantization_step > 0:
        depth = np.round(depth / noise.quantization_step) * noise.quantization_step
    drop = _correlated_dropout_mask(wire_mask, noise.dropout_prob_thin, rng)
    depth = np.where(drop, 0.0, depth)
    h, w = depth.shape
    for _ in range(rng.poisson(noise.ghost_rate)):
        cu = rng.integers(0, w)
        cv = rng.integers(0, h)
        npix = rng.integers(3, 10)
        gdepth = rng.uniform(0.25, 1.2)
        offs = rng.integers(-2, 3, size=(npix, 2))
        us = np.clip(cu + offs[:, 0], 0, w - 1)
        vs = np.clip(cv + offs[:, 1], 0, h - 1)
        depth[vs, us] = gdepth
        labels[vs, us] = LABEL_GHOST
    # the edge channel comes from image-space appearance, not measured depth:
    # the wire silhouette boundary plus clutter on background texture
    edges = _silhouette_edges(wire_mask) | _clutter_edges(labels, noise.clutter_edge_rate, rng)
    return depth, labels, edges


def ghost_free_reference(frame: RgbdFrame, scene: SceneSpec) -> np.ndarray:
    """Per-pixel ground-truth labels {empty, wire, background, ghost} for a
    simulator-produced frame. Errors when the frame does not match the scene."""
    if frame.render_seed is None or frame.noise is None:
        raise GeometryError("frame has no simulator provenance")
    depth, labels, edges = _render_noisy(scene, frame.pose_true, frame.intrinsics,
                                         frame.noise, frame.render_seed)
    if depth.shape != frame.depth.shape or not np.array_equal(depth, frame.depth) \
            or not np.array_equal(edges, frame.edges):
        raise GeometryError("frame does not match the given scene")
    return labels


def simulate_sequence(scene: SceneSpec, K: CameraIntrinsics, noise: ScanNoiseModel,
                      traj: TrajectorySpec, seed: int):
    """Full scan: trajectory plus one rendered frame per pose."""
    poses = generate_trajectory(traj, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
    frame_seeds = rng.integers(0, 2 ** 62, size=len(poses))
    frames = []
    for i, (pt, pe) in enumerate(poses):
        frames.append(render_frame(scene, pt, K, noise, int(frame_seeds[i]),
                                   pose_estimated=pe, frame_id=i))
    return frames
