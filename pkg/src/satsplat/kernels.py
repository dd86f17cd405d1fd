"""Hot numeric kernels: numba-compiled loops with pure-numpy fallbacks.

Backend selection: set SATSPLAT_BACKEND=numpy to force the fallback path,
SATSPLAT_BACKEND=numba to require numba (ImportError if missing). Default is
numba when importable, numpy otherwise. The fallbacks perform the same
per-element arithmetic in the same order as the compiled loops, so the two
backends produce identical results.

Kernels:
  composite_scan / composite_scan_bwd   front-to-back alpha compositing
  splat_forward                         fused footprint + compositing raster
  grid_march                            sign-change bracket search on a grid
"""

from __future__ import annotations

import os

import numpy as np

_requested = os.environ.get("SATSPLAT_BACKEND", "").strip().lower()

if _requested == "numpy":
    _HAVE_NUMBA = False
else:
    try:
        from numba import njit
        _HAVE_NUMBA = True
    except ImportError:
        if _requested == "numba":
            raise
        _HAVE_NUMBA = False

BACKEND = "numba" if _HAVE_NUMBA else "numpy"

_FOOTPRINT_CUTOFF = 30.0  # exponent threshold below which a splat is skipped


# -- front-to-back compositing -------------------------------------------------
#
# Given per-slot, per-pixel opacities ag[k, p] (each in [0, 1)), already in
# depth order (front first):
#   w[k, p] = ag[k, p] * prod_{m<k} (1 - ag[m, p])
#   T[p]    = prod_k (1 - ag[k, p])


def composite_scan_numpy(ag):
    K, P = ag.shape
    w = np.empty_like(ag)
    t = np.ones(P, dtype=np.float64)
    for k in range(K):
        w[k] = ag[k] * t
        t = t * (1.0 - ag[k])
    return w, t


def composite_scan_bwd_numpy(ag, w, t, dw, dt):
    # d_ag[j] = dw[j]*T_j - A_j/(1-ag[j]),  A_j = sum_{k>j} dw[k]*w[k] + dt*T
    K, P = ag.shape
    d_ag = np.empty_like(ag)
    acc = dt * t
    t_before = np.empty_like(ag)
    tb = np.ones(P, dtype=np.float64)
    for k in range(K):
        t_before[k] = tb
        tb = tb * (1.0 - ag[k])
    for j in range(K - 1, -1, -1):
        d_ag[j] = dw[j] * t_before[j] - acc / (1.0 - ag[j])
        acc = acc + dw[j] * w[j]
    return d_ag


# -- fused splat rasterizer (forward only, used where no gradient is needed) ----
#
# Slots arrive depth-sorted. invcov rows are (a, b, c) for [[a, b], [b, c]].
# Footprints are evaluated inside a per-slot bounding box of `radii` pixels.


def splat_forward_numpy(means2d, invcov, alpha, feats, radii, H, W):
    K = means2d.shape[0]
    C = feats.shape[1]
    img = np.zeros((H, W, C), dtype=np.float64)
    t = np.ones((H, W), dtype=np.float64)
    for k in range(K):
        r0 = max(int(np.floor(means2d[k, 0] - radii[k])), 0)
        r1 = min(int(np.ceil(means2d[k, 0] + radii[k])) + 1, H)
        c0 = max(int(np.floor(means2d[k, 1] - radii[k])), 0)
        c1 = min(int(np.ceil(means2d[k, 1] + radii[k])) + 1, W)
        if r0 >= r1 or c0 >= c1:
            continue
        a, b, c = invcov[k]
        dr = np.arange(r0, r1, dtype=np.float64)[:, None] - means2d[k, 0]
        dc = np.arange(c0, c1, dtype=np.float64)[None, :] - means2d[k, 1]
        q = a * dr * dr + 2.0 * b * dr * dc + c * dc * dc
        keep = q <= _FOOTPRINT_CUTOFF
        if not keep.any():
            continue
        ag = np.where(keep, alpha[k] * np.exp(-0.5 * np.where(keep, q, 0.0)), 0.0)
        wkp = ag * t[r0:r1, c0:c1]
        img[r0:r1, c0:c1] += feats[k][None, None, :] * wkp[:, :, None]
        t[r0:r1, c0:c1] *= 1.0 - ag
    return img, t


def _splat_forward_loops(means2d, invcov, alpha, feats, radii, H, W):
    K = means2d.shape[0]
    C = feats.shape[1]
    img = np.zeros((H, W, C), dtype=np.float64)
    t = np.ones((H, W), dtype=np.float64)
    for k in range(K):
        r0 = max(int(np.floor(means2d[k, 0] - radii[k])), 0)
        r1 = min(int(np.ceil(means2d[k, 0] + radii[k])) + 1, H)
        c0 = max(int(np.floor(means2d[k, 1] - radii[k])), 0)
        c1 = min(int(np.ceil(means2d[k, 1] + radii[k])) + 1, W)
        if r0 >= r1 or c0 >= c1:
            continue
        a = invcov[k, 0]
        b = invcov[k, 1]
        c = invcov[k, 2]
        for r in range(r0, r1):
            dr = r - means2d[k, 0]
            for col in range(c0, c1):
                dc = col - means2d[k, 1]
                q = a * dr * dr + 2.0 * b * dr * dc + c * dc * dc
                if q > _FOOTPRINT_CUTOFF:
                    continue
                ag = alpha[k] * np.exp(-0.5 * q)
                wkp = ag * t[r, col]
                for ch in range(C):
                    img[r, col, ch] += feats[k, ch] * wkp
                t[r, col] *= 1.0 - ag
    return img, t


# -- grid ray march -------------------------------------------------------------
#
# field: (Nx, Ny, Nz) samples of a scalar field over the normalized box
# [-1, 1]^3. For each ray origin + s*dir (s in (0, smax], n_steps equal
# steps), find the first step i where the trilinearly interpolated field goes
# from positive to non-positive. Returns i - 1 (crossing bracketed between
# steps i-1 and i) or -1 when the sign never flips.


def trilinear_numpy(field, x, y, z):
    nx, ny, nz = field.shape
    fx = np.clip((x + 1.0) * 0.5 * (nx - 1), 0.0, nx - 1.0)
    fy = np.clip((y + 1.0) * 0.5 * (ny - 1), 0.0, ny - 1.0)
    fz = np.clip((z + 1.0) * 0.5 * (nz - 1), 0.0, nz - 1.0)
    i0 = np.minimum(fx.astype(np.int64), nx - 2)
    j0 = np.minimum(fy.astype(np.int64), ny - 2)
    k0 = np.minimum(fz.astype(np.int64), nz - 2)
    tx = fx - i0
    ty = fy - j0
    tz = fz - k0
    c00 = field[i0, j0, k0] * (1 - tx) + field[i0 + 1, j0, k0] * tx
    c10 = field[i0, j0 + 1, k0] * (1 - tx) + field[i0 + 1, j0 + 1, k0] * tx
    c01 = field[i0, j0, k0 + 1] * (1 - tx) + field[i0 + 1, j0, k0 + 1] * tx
    c11 = field[i0, j0 + 1, k0 + 1] * (1 - tx) + field[i0 + 1, j0 + 1, k0 + 1] * tx
    c0 = c00 * (1 - ty) + c10 * ty
    c1 = c01 * (1 - ty) + c11 * ty
    return c0 * (1 - tz) + c1 * tz


def grid_march_numpy(field, origins, dirs, smax, n_steps):
    P = origins.shape[0]
    brackets = np.full(P, -1, dtype=np.int64)
    found = np.zeros(P, dtype=bool)
    ds = smax / n_steps
    prev = trilinear_numpy(field, origins[:, 0], origins[:, 1], origins[:, 2])
    for i in range(1, n_steps + 1):
        s = i * ds
        pts = origins + s * dirs
        cur = trilinear_numpy(field, pts[:, 0], pts[:, 1], pts[:, 2])
        cross = (~found) & (prev > 0.0) & (cur <= 0.0)
        brackets[cross] = i - 1
        found |= cross
        prev = cur
    return brackets


if _HAVE_NUMBA:
    composite_scan = njit(cache=True)(composite_scan_numpy)
    composite_scan_bwd = njit(cache=True)(composite_scan_bwd_numpy)
    splat_forward = njit(cache=True)(_splat_forward_loops)

    @njit(cache=True, inline="always")
    def _trilinear_scalar(field, x, y, z):
        nx, ny, nz = field.shape
        fx = (x + 1.0) * 0.5 * (nx - 1)
        fy = (y + 1.0) * 0.5 * (ny - 1)
        fz = (z + 1.0) * 0.5 * (nz - 1)
        fx = min(max(fx, 0.0), nx - 1.0)
        fy = min(max(fy, 0.0), ny - 1.0)
        fz = min(max(fz, 0.0), nz - 1.0)
        i0 = min(int(fx), nx - 2)
        j0 = min(int(fy), ny - 2)
        k0 = min(int(fz), nz - 2)
        tx = fx - i0
        ty = fy - j0
        tz = fz - k0
        c00 = field[i0, j0, k0] * (1 - tx) + field[i0 + 1, j0, k0] * tx
        c10 = field[i0, j0 + 1, k0] * (1 - tx) + field[i0 + 1, j0 + 1, k0] * tx
        c01 = field[i0, j0, k0 + 1] * (1 - tx) + field[i0 + 1, j0, k0 + 1] * tx
        c11 = field[i0, j0 + 1, k0 + 1] * (1 - tx) + field[i0 + 1, j0 + 1, k0 + 1] * tx
        c0 = c00 * (1 - ty) + c10 * ty
        c1 = c01 * (1 - ty) + c11 * ty
        return c0 * (1 - tz) + c1 * tz

    @njit(cache=True)
    def grid_march(field, origins, dirs, smax, n_steps):
        P = origins.shape[0]
        brackets = np.full(P, -1, dtype=np.int64)
        ds = smax / n_steps
        for p in range(P):
            prev = _trilinear_scalar(field, origins[p, 0], origins[p, 1], origins[p, 2])
            for i in range(1, n_steps + 1):
                s = i * ds
                x = origins[p, 0] + s * dirs[p, 0]
                y = origins[p, 1] + s * dirs[p, 1]
                z = origins[p, 2] + s * dirs[p, 2]
                cur = _trilinear_scalar(field, x, y, z)
                if prev > 0.0 and cur <= 0.0:
                    brackets[p] = i - 1
                    break
                prev = cur
        return brackets
else:
    composite_scan = composite_scan_numpy
    composite_scan_bwd = composite_scan_bwd_numpy
    splat_forward = splat_forward_numpy
    grid_march = grid_march_numpy
