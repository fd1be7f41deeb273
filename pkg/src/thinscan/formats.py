"""File formats for pipeline artifacts.

- Skeleton graphs: JSON with coordinates at 9 significant digits.
- Point clouds: ASCII PLY with x y z floats and optional cluster_id / frame_id.
- Depth frames: 16-bit binary PGM in 0.1 mm units; edge maps: 1-bit PBM.
- Camera poses: one line per frame `frame_id tx ty tz qx qy qz qw`
  (meters, unit quaternion, camera-to-world).
- Meshes: ASCII OBJ. TSDF volumes: little-endian float32 dump with a header.

All writers are deterministic: identical inputs give byte-identical files.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .geometry import (LabeledPointCloud, Polyline, RigidPose, SkeletonGraph,
                       SkeletonSegment, VoxelGrid, NO_LABEL)


class FormatError(ValueError):
    """Malformed artifact file."""


def _fmt9(x: float) -> float:
    # round-trips through repr at 9 significant digits
    return float(f"{float(x):.9g}")


# ---------------------------------------------------------------------------
# Skeleton graph interchange (JSON)
# ---------------------------------------------------------------------------

def skeleton_to_dict(graph: SkeletonGraph) -> dict:
    return {
        "junctions": [[_fmt9(c) for c in j] for j in graph.junctions],
        "segments": [
            {
                "vertices": [[_fmt9(c) for c in v] for v in seg.polyline.vertices],
                "start_junction": seg.start_junction,
                "end_junction": seg.end_junction,
            }
            for seg in graph.segments
        ],
    }


def skeleton_from_dict(doc: dict) -> SkeletonGraph:
    try:
        junctions = np.asarray(doc["junctions"], dtype=float).reshape(-1, 3)
        segments = []
        for k, s in enumerate(doc["segments"]):
            for key in ("start_junction", "end_junction"):
                if key not in s:
                    raise FormatError(f"segment {k}: missing field '{key}'")
                if s[key] is not None and not isinstance(s[key], int):
                    raise FormatError(f"segment {k}: field '{key}' must be int or null")
            segments.append(SkeletonSegment(Polyline(np.asarray(s["vertices"], dtype=float)),
                                            s["start_junction"], s["end_junction"]))
    except KeyError as e:
        raise FormatError(f"missing field {e.args[0]!r}") from e
    except (TypeError, ValueError) as e:
        raise FormatError(str(e)) from e
    # interchange graphs may carry low-valence junctions from mid-pipeline dumps
    prov = np.ones(len(junctions), dtype=bool)
    return SkeletonGraph(junctions, segments, prov)


def save_skeleton(path, graph: SkeletonGraph) -> None:
    Path(path).write_text(json.dumps(skeleton_to_dict(graph), indent=1) + "\n")


def load_skeleton(path) -> SkeletonGraph:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise FormatError(f"invalid JSON: {e}") from e
    return skeleton_from_dict(doc)


# ---------------------------------------------------------------------------
# ASCII PLY point clouds
# ---------------------------------------------------------------------------

def save_ply(path, cloud: LabeledPointCloud, with_cluster_id: bool = True,
             with_frame_id: bool = False) -> None:
    lines = ["ply", "format ascii 1.0", f"element vertex {len(cloud)}",
             "property float x", "property float y", "property float z"]
    if with_cluster_id:
        lines.append("property int cluster_id")
    if with_frame_id:
        lines.append("property int frame_id")
    lines.append("end_header")
    for i in range(len(cloud)):
        row = " ".join(f"{c:.9g}" for c in cloud.points[i])
        if with_cluster_id:
            row += f" {int(cloud.cluster_id[i])}"
        if with_frame_id:
            row += f" {int(cloud.frame_id[i])}"
        lines.append(row)
    Path(path).write_text("\n".join(lines) + "\n")


def load_ply(path) -> LabeledPointCloud:
    text = Path(path).read_text().splitlines()
    if not text or text[0].strip() != "ply":
        raise FormatError("not a PLY file")
    n = None
    props = []
    i = 1
    while i < len(text):
        tok = text[i].split()
        if tok[:2] == ["element", "vertex"]:
            n = int(tok[2])
        elif tok and tok[0] == "property":
            props.append(tok[2])
        elif tok == ["end_header"]:
            i += 1
            break
        i += 1
    if n is None:
        raise FormatError("missing vertex element")
    for axis in ("x", "y", "z"):
        if axis not in props:
            raise FormatError(f"missing property '{axis}'")
    rows = [line.split() for line in text[i:i + n]]
    if len(rows) != n:
        raise FormatError("vertex count mismatch")
    data = np.asarray(rows, dtype=float) if n else np.zeros((0, len(props)))
    cols = {p: data[:, k] for k, p in enumerate(props)} if n else {}
    pts = np.stack([cols[a] for a in "xyz"], axis=1) if n else np.zeros((0, 3))
    cid = cols.get("cluster_id", np.full(n, NO_LABEL)).astype(np.int32)
    fid = cols.get("frame_id", np.zeros(n)).astype(np.int32)
    return LabeledPointCloud(pts, fid, cid)


# ---------------------------------------------------------------------------
# Depth / edge images
# ---------------------------------------------------------------------------

DEPTH_UNIT = 1e-4  # PGM stores depth in 0.1 mm steps


def save_depth_pgm(path, depth_m: np.ndarray) -> None:
    img = np.clip(np.round(depth_m / DEPTH_UNIT), 0, 65535).astype(">u2")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n65535\n".encode())
        f.write(img.tobytes())


def load_depth_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P5":
            raise FormatError("not a binary PGM")
        dims = f.readline().split()
        maxval = int(f.readline())
        if maxval != 65535:
            raise FormatError("expected 16-bit PGM")
        w, h = int(dims[0]), int(dims[1])
        raw = np.frombuffer(f.read(w * h * 2), dtype=">u2").reshape(h, w)
    return raw.astype(float) * DEPTH_UNIT


def save_edges_pbm(path, edges: np.ndarray) -> None:
    mask = np.asarray(edges).astype(bool)
    h, w = mask.shape
    packed = np.packbits(mask, axis=1)
    with open(path, "wb") as f:
        f.write(f"P4\n{w} {h}\n".encode())
        f.write(packed.tobytes())


def load_edges_pbm(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"P4":
            raise FormatError("not a binary PBM")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        row_bytes = (w + 7) // 8
        raw = np.frombuffer(f.read(row_bytes * h), dtype=np.uint8).reshape(h, row_bytes)
    return np.unpackbits(raw, axis=1)[:, :w].astype(bool)


# ---------------------------------------------------------------------------
# Pose files
# ---------------------------------------------------------------------------

def save_poses(path, poses) -> None:
    """poses: iterable of (frame_id, RigidPose), camera-to-world."""
    lines = []
    for fid, pose in poses:
        q = pose.to_quaternion()
        t = pose.translation
        lines.append(f"{fid} " + " ".join(f"{v:.9g}" for v in (*t, *q)))
    Path(path).write_text("\n".join(lines) + "\n")


def load_poses(path) -> dict:
    out = {}
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if len(tok) != 8:
            raise FormatError(f"pose line needs 8 fields, got {len(tok)}")
        fid = int(tok[0])
        t = np.asarray(tok[1:4], dtype=float)
        q = np.asarray(tok[4:8], dtype=float)
        out[fid] = RigidPose.from_quaternion(q, t)
    return out


# ---------------------------------------------------------------------------
# OBJ meshes
# ---------------------------------------------------------------------------

def save_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}" for v in np.atleast_2d(vertices)]
    lines += [f"f {f[0] + 1} {f[1] + 1} {f[2] + 1}" for f in np.atleast_2d(faces)] if len(faces) else []
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def load_obj(path):
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "v":
            verts.append([float(x) for x in tok[1:4]])
        elif tok[0] == "f":
            faces.append([int(x.split("/")[0]) - 1 for x in tok[1:4]])
    return np.asarray(verts, float).reshape(-1, 3), np.asarray(faces, int).reshape(-1, 3)


# ---------------------------------------------------------------------------
# TSDF volume dump (debugging)
# ---------------------------------------------------------------------------

VOLUME_MAGIC = b"TSDFVOL1"


def save_volume(path, grid: VoxelGrid, tsdf: np.ndarray, weight: np.ndarray) -> None:
    with open(path, "wb") as f:
        f.write(VOLUME_MAGIC)
        f.write(struct.pack("<3i", *grid.dims))
        f.write(struct.pack("<3d", *grid.origin))
        f.write(struct.pack("<d", grid.cell_size))
        f.write(tsdf.astype("<f4").tobytes())
        f.write(weight.astype("<f4").tobytes())


def load_volume(path):
    with open(path, "rb") as f:
        if f.read(8) != VOLUME_MAGIC:
            raise FormatError("not a volume dump")
        dims = struct.unpack("<3i", f.read(12))
        origin = struct.unpack("<3d", f.read(24))
        cell = struct.unpack("<d", f.read(8))[0]
        n = int(np.prod(dims))
        tsdf = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
        weight = np.frombuffer(f.read(4 * n), dtype="<f4").reshape(dims)
    return VoxelGrid(origin, cell, dims), tsdf.copy(), weight.copy()
