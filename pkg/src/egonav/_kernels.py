"""Compiled inner loops: voxel ray marching and depth-ray integration.

Ray directions are expressed so that the ray parameter ``t`` equals camera
z-depth (camera-frame direction ``((u-cx)/fx, (v-cy)/fy, 1)`` rotated to
world).
"""
import math

import numpy as np
from numba import njit

FLOOR_EPS = 1e-3
EDGE_EPS = 1e-6


@njit(cache=True, nogil=True)
def _axis_setup(o, d, i, res):
    if d > 0.0:
        return 1, ((i + 1) * res - o) / d, res / d
    if d < 0.0:
        return -1, (i * res - o) / d, -res / d
    return 0, math.inf, math.inf


@njit(cache=True, nogil=True)
def raymarch(occ, res, origin, dirs, max_t, depth_out, sem_out):
    """Exact voxel traversal; depth is reported at the hit voxel's entry face."""
    nx, ny, nz = occ.shape
    for r in range(dirs.shape[0]):
        depth_out[r] = max_t
        sem_out[r] = 0
        ix = int(math.floor(origin[0] / res))
        iy = int(math.floor(origin[1] / res))
        iz = int(math.floor(origin[2] / res))
        if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
            continue
        sx, tx, dx = _axis_setup(origin[0], dirs[r, 0], ix, res)
        sy, ty, dy = _axis_setup(origin[1], dirs[r, 1], iy, res)
        sz, tz, dz = _axis_setup(origin[2], dirs[r, 2], iz, res)
        while True:
            if tx <= ty and tx <= tz:
                t = tx
                ix += sx
                tx += dx
            elif ty <= tz:
                t = ty
                iy += sy
                ty += dy
            else:
                t = tz
                iz += sz
                tz += dz
            if t > max_t:
                break
            if ix < 0 or iy < 0 or iz < 0 or ix >= nx or iy >= ny or iz >= nz:
                break
            v = occ[ix, iy, iz]
            if v != 0:
                depth_out[r] = max(t, 1e-9)
                sem_out[r] = v
                break


@njit(cache=True, nogil=True)
def integrate_rays(depth, dirs, origin, res, map_origin, free_out, obst_out, floor_h, agent_top, max_range):
    """Mark traversed cells FREE and hit columns OBSTACLE for one depth image."""
    nx, ny = free_out.shape
    ox = origin[0] - map_origin[0]
    oy = origin[1] - map_origin[1]
    for r in range(dirs.shape[0]):
        t_end = depth[r]
        hit = t_end < max_range - 1e-9
        ix = int(math.floor(ox / res))
        iy = int(math.floor(oy / res))
        if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
            continue
        hx = -1
        hy = -1
        is_obst = False
        is_floor = False
        if hit:
            pz = origin[2] + dirs[r, 2] * t_end
            # a hit on a voxel edge has no well-defined column; leave it unmarked
            on_grid = 0
            for q in (ox + dirs[r, 0] * t_end, oy + dirs[r, 1] * t_end, pz):
                if abs(q / res - round(q / res)) < EDGE_EPS:
                    on_grid += 1
            if on_grid < 2:
                te = t_end + 1e-6
                hx = int(math.floor((ox + dirs[r, 0] * te) / res))
                hy = int(math.floor((oy + dirs[r, 1] * te) / res))
                is_obst = pz > floor_h + FLOOR_EPS and pz <= agent_top
                is_floor = pz <= floor_h + FLOOR_EPS
        sx, tx, dx = _axis_setup(ox, dirs[r, 0], ix, res)
        sy, ty, dy = _axis_setup(oy, dirs[r, 1], iy, res)
        t0 = 0.0
        while True:
            if hit and ix == hx and iy == hy:
                break
            t1 = min(tx, ty, t_end)
            zmid = origin[2] + dirs[r, 2] * 0.5 * (t0 + t1)
            if zmid > floor_h and zmid <= agent_top:
                free_out[ix, iy] = True
            if t1 >= t_end:
                break
            if tx <= ty:
                ix += sx
                tx += dx
            else:
                iy += sy
                ty += dy
            t0 = t1
            if ix < 0 or iy < 0 or ix >= nx or iy >= ny:
                break
        if hit and 0 <= hx < nx and 0 <= hy < ny:
            if is_obst:
                obst_out[hx, hy] = True
            elif is_floor:
                free_out[hx, hy] = True


def pixel_rays(width, height, fx, fy, cx, cy):
    """Camera-frame ray directions with unit z, shape (H*W, 3), row-major."""
    u, v = np.meshgrid(np.arange(width, dtype=float), np.arange(height, dtype=float))
    d = np.empty((height * width, 3))
    d[:, 0] = ((u - cx) / fx).ravel()
    d[:, 1] = ((v - cy) / fy).ravel()
    d[:, 2] = 1.0
    return d
