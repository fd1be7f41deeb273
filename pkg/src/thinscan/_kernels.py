"""Numba-compiled inner loops: analytic depth rendering, TSDF integration,
and TSDF raycasting. Everything here is pure array math; the public modules
own the types and contracts."""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def _ray_capsule(ox, oy, oz, dx, dy, dz, ax, ay, az, bx, by, bz, r):
    """Smallest positive ray parameter hitting the capsule, or -1."""
    bax = bx - ax
    bay = by - ay
    baz = bz - az
    oax = ox - ax
    oay = oy - ay
    oaz = oz - az
    baba = bax * bax + bay * bay + baz * baz
    bard = bax * dx + bay * dy + baz * dz
    baoa = bax * oax + bay * oay + baz * oaz
    rdoa = dx * oax + dy * oay + dz * oaz
    oaoa = oax * oax + oay * oay + oaz * oaz
    k2 = baba - bard * bard
    k1 = baba * rdoa - baoa * bard
    k0 = baba * oaoa - baoa * baoa - r * r * baba
    if abs(k2) > 1e-12:
        h = k1 * k1 - k2 * k0
        if h >= 0.0:
            t = (-k1 - np.sqrt(h)) / k2
            y = baoa + t * bard
            if 0.0 <= y <= baba and t > 0.0:
                return t
    # end-cap spheres
    best = -1.0
    for cx, cy, cz in ((ax, ay, az), (bx, by, bz)):
        ocx = ox - cx
        ocy = oy - cy
        ocz = oz - cz
        b = ocx * dx + ocy * dy + ocz * dz
        c = ocx * ocx + ocy * ocy + ocz * ocz - r * r
        h = b * b - c
        if h >= 0.0:
            t = -b - np.sqrt(h)
            if t > 0.0 and (best < 0.0 or t < best):
                best = t
    return best


@njit(cache=True, fastmath=True)
def render_capsules(dirs, origin, caps, bboxes, t_img, id_img, label):
    """Nearest-hit test of pixel rays against capsules.

    dirs: (h, w, 3) unit world-space ray directions; origin: camera center;
    caps: (n, 7) rows ax ay az bx by bz r; bboxes: (n, 4) inclusive pixel
    windows u0 u1 v0 v1. Updates t_img (ray parameter) and id_img in place.
    """
    ox, oy, oz = origin[0], origin[1], origin[2]
    for c in range(caps.shape[0]):
        ax, ay, az = caps[c, 0], caps[c, 1], caps[c, 2]
        bx, by, bz = caps[c, 3], caps[c, 4], caps[c, 5]
        r = caps[c, 6]
        u0, u1, v0, v1 = bboxes[c, 0], bboxes[c, 1], bboxes[c, 2], bboxes[c, 3]
        for v in range(v0, v1 + 1):
            for u in range(u0, u1 + 1):
                t = _ray_capsule(ox, oy, oz,
                                 dirs[v, u, 0], dirs[v, u, 1], dirs[v, u, 2],
                                 ax, ay, az, bx, by, bz, r)
                if t > 0.0 and t < t_img[v, u]:
                    t_img[v, u] = t
                    id_img[v, u] = label


@njit(cache=True, fastmath=True)
def render_boxes(dirs, origin, boxes, t_img, id_img, label):
    """Nearest-hit slab test of pixel rays against axis-aligned boxes.

    boxes: (n, 6) rows lox loy loz hix hiy hiz. Updates t_img/id_img in place.
    """
    h, w = t_img.shape
    for v in range(h):
        for u in range(w):
            dx, dy, dz = dirs[v, u, 0], dirs[v, u, 1], dirs[v, u, 2]
            for b in range(boxes.shape[0]):
                tmin = -1e30
                tmax = 1e30
                ok = True
                for axis in range(3):
                    o = origin[axis]
                    d = dirs[v, u, axis]
                    lo = boxes[b, axis]
                    hi = boxes[b, axis + 3]
                    if abs(d) < 1e-12:
                        if o < lo or o > hi:
                            ok = False
                            break
                    else:
                        t0 = (lo - o) / d
                        t1 = (hi - o) / d
                        if t0 > t1:
                            t0, t1 = t1, t0
                        if t0 > tmin:
                            tmin = t0
                        if t1 < tmax:
                            tmax = t1
                if not ok or tmax < tmin:
                    continue
                t = tmin if tmin > 1e-9 else tmax
                if t > 1e-9 and t < t_img[v, u]:
                    t_img[v, u] = t
                    id_img[v, u] = label


@njit(cache=True, fastmath=True)
def tsdf_integrate(tsdf, weight, origin, csize, rot_wc, t_wc, depth,
                   fx, fy, cx, cy, trunc, w_max):
    """One-frame TSDF update: every in-frustum voxel whose pixel has a valid
    depth gets the clamped, normalized signed distance folded into its
    running average. Operates in place on tsdf/weight (3D arrays)."""
    ni, nj, nk = tsdf.shape
    h, w = depth.shape
    for i in range(ni):
        px = origin[0] + (i + 0.5) * csize
        for j in range(nj):
            py = origin[1] + (j + 0.5) * csize
            for k in range(nk):
                pz = origin[2] + (k + 0.5) * csize
                x = rot_wc[0, 0] * px + rot_wc[0, 1] * py + rot_wc[0, 2] * pz + t_wc[0]
                y = rot_wc[1, 0] * px + rot_wc[1, 1] * py + rot_wc[1, 2] * pz + t_wc[1]
                z = rot_wc[2, 0] * px + rot_wc[2, 1] * py + rot_wc[2, 2] * pz + t_wc[2]
                if z <= 1e-6:
                    continue
                u = int(np.floor(fx * x / z + cx + 0.5))
                v = int(np.floor(fy * y / z + cy + 0.5))
                if u < 0 or u >= w or v < 0 or v >= h:
                    continue
                dpix = depth[v, u]
                if dpix <= 0.0:
                    continue
                sdf = dpix - z
                if sdf > trunc:
                    sdf = trunc
                elif sdf < -trunc:
                    sdf = -trunc
                val = sdf / trunc
                wgt = weight[i, j, k]
                tsdf[i, j, k] = (tsdf[i, j, k] * wgt + val) / (wgt + 1.0)
                if wgt + 1.0 < w_max:
                    weight[i, j, k] = wgt + 1.0
                else:
                    weight[i, j, k] = w_max


@njit(cache=True, fastmath=True)
def tsdf_raycast(tsdf, weight, origin, csize, cam_origin, dirs, znorm,
                 step, near, depth_out):
    """March each pixel ray through the grid; report the camera depth of the
    first positive-to-negative crossing between consecutive observed samples,
    refined by linear interpolation; 0 where no crossing."""
    ni, nj, nk = tsdf.shape
    h, w = depth_out.shape
    gx0, gy0, gz0 = origin[0], origin[1], origin[2]
    gx1 = gx0 + ni * csize
    gy1 = gy0 + nj * csize
    gz1 = gz0 + nk * csize
    ox, oy, oz = cam_origin[0], cam_origin[1], cam_origin[2]
    for v in range(h):
        for u in range(w):
            dx, dy, dz = dirs[v, u, 0], dirs[v, u, 1], dirs[v, u, 2]
            # clip ray to grid AABB
            tmin = near
            tmax = 1e30
            ok = True
            for axis in range(3):
                if axis == 0:
                    o, d, lo, hi = ox, dx, gx0, gx1
                elif axis == 1:
                    o, d, lo, hi = oy, dy, gy0, gy1
                else:
                    o, d, lo, hi = oz, dz, gz0, gz1
                if abs(d) < 1e-12:
                    if o < lo or o > hi:
                        ok = False
                        break
                else:
                    t0 = (lo - o) / d
                    t1 = (hi - o) / d
                    if t0 > t1:
                        t0, t1 = t1, t0
                    if t0 > tmin:
                        tmin = t0
                    if t1 < tmax:
                        tmax = t1
            depth_out[v, u] = 0.0
            if not ok or tmax < tmin:
                continue
            t = tmin
            prev_ok = False
            prev_val = 0.0
            prev_t = 0.0
            while t <= tmax:
                x = ox + t * dx
                y = oy + t * dy
                z = oz + t * dz
                i = int((x - gx0) / csize)
                j = int((y - gy0) / csize)
                k = int((z - gz0) / csize)
                if 0 <= i < ni and 0 <= j < nj and 0 <= k < nk and weight[i, j, k] > 0.0:
                    val = tsdf[i, j, k]
                    if prev_ok and prev_val > 0.0 and val <= 0.0:
                        thit = prev_t + (t - prev_t) * prev_val / (prev_val - val)
                        depth_out[v, u] = thit * znorm[v, u]
                        break
                    prev_ok = True
                    prev_val = val
                    prev_t = t
                else:
                    prev_ok = False
                t += step
