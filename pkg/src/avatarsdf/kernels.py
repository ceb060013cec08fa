"""Hot numeric kernels, each with a numba @njit variant and a pure-numpy twin.

The njit path is selected by default (see backend.py); AVATARSDF_BACKEND=numpy
forces the vectorized numpy fallbacks. Both variants are kept semantically
identical; benchmarks/bench_kernels.py times them side by side.

Bodies and poses arrive packed as plain arrays:
  seg_a (B,3)  capsule start points       seg_d (B,3)  axis vectors (end-start)
  len2  (B,)   squared axis lengths       radii (B,)   capsule radii
  coeffs (B,)  pose-gated wrinkle coefficients (amplitude folded in)
  dirs  (B,3)  wrinkle directions          phases (B,)  wrinkle phases
  mats  (B,4,4) bone matrices              tau, smooth_k  softmax/smooth-min scales
"""

from __future__ import annotations

import numpy as np

from .backend import USE_NUMBA
from .mc_tables import (
    EDGE_GLOBAL_NP,
    EDGE_TABLE_NP,
    TRI_COUNT_NP,
    TRI_TABLE_NP,
)

TWO_PI = 2.0 * np.pi
SINGULAR_SDF = 1.0e3  # returned when a per-point blend degenerates mid-trace


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def capsule_distances_np(points, seg_a, seg_d, len2, radii):
    """Signed distance of each point to each capsule, shape (N, B)."""
    points = np.asarray(points, dtype=np.float64)
    rel = points[:, None, :] - seg_a[None, :, :]
    t = np.einsum("nbd,bd->nb", rel, seg_d)
    safe = np.where(len2 > 0.0, len2, 1.0)
    t = np.clip(t / safe[None, :], 0.0, 1.0)
    t[:, len2 <= 0.0] = 0.0
    closest = seg_a[None, :, :] + t[..., None] * seg_d[None, :, :]
    return np.linalg.norm(points[:, None, :] - closest, axis=2) - radii[None, :]


def smooth_min_np(dists, smooth_k):
    """Exponential smooth minimum over the capsule axis (axis=1)."""
    dmin = dists.min(axis=1)
    s = np.exp(-(dists - dmin[:, None]) / smooth_k).sum(axis=1)
    return dmin - smooth_k * np.log(s)


def displacement_np(points, coeffs, freq, dirs, phases):
    if coeffs.size == 0 or not np.any(coeffs):
        return np.zeros(len(points))
    arg = TWO_PI * freq * (np.asarray(points, dtype=np.float64) @ dirs.T) + phases[None, :]
    return np.sin(arg) @ coeffs


def canonical_sdf_np(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases):
    d = capsule_distances_np(points, seg_a, seg_d, len2, radii)
    return smooth_min_np(d, smooth_k) - displacement_np(points, coeffs, freq, dirs, phases)


def canonical_grad_np(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases):
    """Analytic gradient of the displaced smooth-min field, shape (N, 3)."""
    points = np.asarray(points, dtype=np.float64)
    rel = points[:, None, :] - seg_a[None, :, :]
    t = np.einsum("nbd,bd->nb", rel, seg_d)
    safe = np.where(len2 > 0.0, len2, 1.0)
    t = np.clip(t / safe[None, :], 0.0, 1.0)
    t[:, len2 <= 0.0] = 0.0
    diff = points[:, None, :] - (seg_a[None, :, :] + t[..., None] * seg_d[None, :, :])
    dist = np.linalg.norm(diff, axis=2)
    unit = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 1e-300)
    d = dist - radii[None, :]
    dmin = d.min(axis=1, keepdims=True)
    w = np.exp(-(d - dmin) / smooth_k)
    w /= w.sum(axis=1, keepdims=True)
    grad = np.einsum("nb,nbd->nd", w, unit)
    if coeffs.size and np.any(coeffs):
        arg = TWO_PI * freq * (points @ dirs.T) + phases[None, :]
        grad -= (np.cos(arg) * coeffs[None, :]) @ (TWO_PI * freq * dirs)
    return grad


def softmax_weights_np(dists, tau):
    """Row-wise softmax of -d/tau; a valid simplex per row."""
    z = -(dists - dists.min(axis=1, keepdims=True)) / tau
    w = np.exp(z)
    return w / w.sum(axis=1, keepdims=True)


def inverse_lbs_estimate_np(points, pseg_a, pseg_d, plen2, radii, tau, mats):
    """Canonical estimates for posed points via posed-capsule softmax weights.

    Returns (canonical points, singular mask); singular rows pass through.
    """
    points = np.asarray(points, dtype=np.float64)
    d = capsule_distances_np(points, pseg_a, pseg_d, plen2, radii)
    w = softmax_weights_np(d, tau)
    blend = np.einsum("nb,bij->nij", w, mats)
    lin = blend[:, :3, :3]
    det = np.linalg.det(lin)
    bad = np.abs(det) < 1e-12
    rhs = points - blend[:, :3, 3]
    if np.any(bad):
        lin = lin.copy()
        lin[bad] = np.eye(3)
    xhat = np.linalg.solve(lin, rhs[..., None])[..., 0]
    xhat[bad] = points[bad]
    return xhat, bad


def posed_sdf_np(points, packed):
    """Posed-space field by inverse-LBS sampling with ground-truth weights."""
    (seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases, pseg_a, pseg_d, tau, mats) = packed
    xhat, bad = inverse_lbs_estimate_np(points, pseg_a, pseg_d, len2, radii, tau, mats)
    f = canonical_sdf_np(xhat, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases)
    f[bad] = SINGULAR_SDF
    return f


def sphere_trace_np(origins, direction, packed, tol=1e-4, max_steps=256, step_scale=0.9, bound=1.1):
    """March rays through the posed field; returns (ray param t, hit mask)."""
    origins = np.asarray(origins, dtype=np.float64)
    direction = np.asarray(direction, dtype=np.float64)
    n = len(origins)
    t_enter, t_exit = _ray_box_np(origins, direction, bound)
    t = np.maximum(t_enter, 0.0)
    hit = np.zeros(n, dtype=bool)
    alive = t_exit >= t
    for _ in range(max_steps):
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        p = origins[idx] + t[idx, None] * direction[None, :]
        f = posed_sdf_np(p, packed)
        newly = f < tol
        hit[idx[newly]] = True
        alive[idx[newly]] = False
        t[idx] += np.maximum(f, 0.0) * step_scale
        alive[idx] &= t[idx] <= t_exit[idx]
    return t, hit


def _ray_box_np(origins, direction, bound):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / direction
        t0 = (-bound - origins) * inv[None, :]
        t1 = (bound - origins) * inv[None, :]
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # parallel axes: inside slab iff |origin| <= bound
    par = direction == 0.0
    if np.any(par):
        inside = np.abs(origins[:, par]) <= bound
        lo[:, par] = np.where(inside, -np.inf, np.inf)
        hi[:, par] = np.where(inside, np.inf, -np.inf)
    return lo.max(axis=1), hi.min(axis=1)


def marching_cubes_fill_np(values, active_cells, cube_index, total_tris):
    """Emit (edge-id triples, cell order) for active cells; python loop fallback."""
    g = values.shape[0]  # grid points per axis
    edge_ids = np.empty((total_tris, 3), dtype=np.int64)
    n = 0
    for ci, cj, ck in active_cells:
        row = TRI_TABLE_NP[cube_index[ci, cj, ck]]
        for s in range(0, 16, 3):
            if row[s] < 0:
                break
            for v in range(3):
                axis, di, dj, dk = EDGE_GLOBAL_NP[row[s + v]]
                edge_ids[n, v] = ((axis * g + (ci + di)) * g + (cj + dj)) * g + (ck + dk)
            n += 1
    return edge_ids


def point_triangle_np(points, tri_a, tri_b, tri_c, chunk=256, point_chunk=2048):
    """Exact point-to-triangle distances and closest face indices.

    Vectorized Ericson closest-point test, chunked on both axes to bound
    memory; returns (dist (N,), face index (N,)).
    """
    points = np.asarray(points, dtype=np.float64)
    n = len(points)
    best = np.full(n, np.inf)
    best_face = np.zeros(n, dtype=np.int64)
    for pstart in range(0, n, point_chunk):
        p = points[pstart : pstart + point_chunk]
        rows = np.arange(len(p))
        for start in range(0, len(tri_a), chunk):
            a = tri_a[start : start + chunk]
            d2 = _point_tri_sq_np(p, a, tri_b[start : start + chunk], tri_c[start : start + chunk])
            fidx = np.argmin(d2, axis=1)
            fmin = d2[rows, fidx]
            better = fmin < best[pstart : pstart + point_chunk]
            sel = pstart + rows[better]
            best[sel] = fmin[better]
            best_face[sel] = fidx[better] + start
    return np.sqrt(best), best_face


def _point_tri_sq_np(p, a, b, c):
    """Squared distances, shape (N, F)."""
    ab = b - a
    ac = c - a
    ap = p[:, None, :] - a[None, :, :]
    d1 = np.einsum("fd,nfd->nf", ab, ap)
    d2 = np.einsum("fd,nfd->nf", ac, ap)
    bp = p[:, None, :] - b[None, :, :]
    d3 = np.einsum("fd,nfd->nf", ab, bp)
    d4 = np.einsum("fd,nfd->nf", ac, bp)
    cp = p[:, None, :] - c[None, :, :]
    d5 = np.einsum("fd,nfd->nf", ab, cp)
    d6 = np.einsum("fd,nfd->nf", ac, cp)

    va = d3 * d6 - d5 * d4
    vb = d5 * d2 - d1 * d6
    vc = d1 * d4 - d3 * d2

    eps = 1e-300
    t_ab = d1 / np.where(np.abs(d1 - d3) > eps, d1 - d3, 1.0)
    t_ac = d2 / np.where(np.abs(d2 - d6) > eps, d2 - d6, 1.0)
    t_bc = (d4 - d3) / np.where(np.abs((d4 - d3) + (d5 - d6)) > eps, (d4 - d3) + (d5 - d6), 1.0)
    denom = va + vb + vc
    denom = np.where(np.abs(denom) > eps, denom, 1.0)
    v_in = vb / denom
    w_in = vc / denom

    # region cascade, later assignments win for earlier (higher-priority) regions
    cp_face = a[None] + v_in[..., None] * ab[None] + w_in[..., None] * ac[None]
    closest = cp_face
    on_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
    closest = np.where(on_bc[..., None], b[None] + np.clip(t_bc, 0, 1)[..., None] * (c - b)[None], closest)
    on_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
    closest = np.where(on_ac[..., None], a[None] + np.clip(t_ac, 0, 1)[..., None] * ac[None], closest)
    on_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
    closest = np.where(on_ab[..., None], a[None] + np.clip(t_ab, 0, 1)[..., None] * ab[None], closest)
    at_c = (d6 >= 0) & (d5 <= d6)
    closest = np.where(at_c[..., None], np.broadcast_to(c[None], closest.shape), closest)
    at_b = (d3 >= 0) & (d4 <= d3)
    closest = np.where(at_b[..., None], np.broadcast_to(b[None], closest.shape), closest)
    at_a = (d1 <= 0) & (d2 <= 0)
    closest = np.where(at_a[..., None], np.broadcast_to(a[None], closest.shape), closest)

    diff = p[:, None, :] - closest
    return np.einsum("nfd,nfd->nf", diff, diff)


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if USE_NUMBA:
    from numba import njit, prange

    @njit(cache=True, fastmath=False)
    def _capsule_min_and_lse(x, y, z, seg_a, seg_d, len2, radii, smooth_k):
        nb = seg_a.shape[0]
        dmin = 1e300
        for b in range(nb):
            rx = x - seg_a[b, 0]
            ry = y - seg_a[b, 1]
            rz = z - seg_a[b, 2]
            t = 0.0
            if len2[b] > 0.0:
                t = (rx * seg_d[b, 0] + ry * seg_d[b, 1] + rz * seg_d[b, 2]) / len2[b]
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = rx - t * seg_d[b, 0]
            dy = ry - t * seg_d[b, 1]
            dz = rz - t * seg_d[b, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[b]
            if d < dmin:
                dmin = d
        s = 0.0
        for b in range(nb):
            rx = x - seg_a[b, 0]
            ry = y - seg_a[b, 1]
            rz = z - seg_a[b, 2]
            t = 0.0
            if len2[b] > 0.0:
                t = (rx * seg_d[b, 0] + ry * seg_d[b, 1] + rz * seg_d[b, 2]) / len2[b]
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = rx - t * seg_d[b, 0]
            dy = ry - t * seg_d[b, 1]
            dz = rz - t * seg_d[b, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[b]
            s += np.exp(-(d - dmin) / smooth_k)
        return dmin - smooth_k * np.log(s)

    @njit(cache=True, fastmath=False)
    def _canonical_sdf_one(x, y, z, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases):
        f = _capsule_min_and_lse(x, y, z, seg_a, seg_d, len2, radii, smooth_k)
        disp = 0.0
        for b in range(coeffs.shape[0]):
            c = coeffs[b]
            if c != 0.0:
                arg = TWO_PI * freq * (x * dirs[b, 0] + y * dirs[b, 1] + z * dirs[b, 2]) + phases[b]
                disp += c * np.sin(arg)
        return f - disp

    @njit(cache=True, fastmath=False)
    def _canonical_sdf_batch_nb(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases):
        n = points.shape[0]
        out = np.empty(n)
        for i in range(n):
            out[i] = _canonical_sdf_one(
                points[i, 0], points[i, 1], points[i, 2],
                seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases,
            )
        return out

    @njit(cache=True, fastmath=False)
    def _posed_sdf_one(x, y, z, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases,
                       pseg_a, pseg_d, tau, mats, w_scratch):
        nb = pseg_a.shape[0]
        dmin = 1e300
        for b in range(nb):
            rx = x - pseg_a[b, 0]
            ry = y - pseg_a[b, 1]
            rz = z - pseg_a[b, 2]
            t = 0.0
            if len2[b] > 0.0:
                t = (rx * pseg_d[b, 0] + ry * pseg_d[b, 1] + rz * pseg_d[b, 2]) / len2[b]
                if t < 0.0:
                    t = 0.0
                elif t > 1.0:
                    t = 1.0
            dx = rx - t * pseg_d[b, 0]
            dy = ry - t * pseg_d[b, 1]
            dz = rz - t * pseg_d[b, 2]
            d = np.sqrt(dx * dx + dy * dy + dz * dz) - radii[b]
            w_scratch[b] = d
            if d < dmin:
                dmin = d
        s = 0.0
        for b in range(nb):
            w_scratch[b] = np.exp(-(w_scratch[b] - dmin) / tau)
            s += w_scratch[b]
        # blended linear part and translation
        m00 = m01 = m02 = m10 = m11 = m12 = m20 = m21 = m22 = 0.0
        t0 = t1 = t2 = 0.0
        for b in range(nb):
            w = w_scratch[b] / s
            m00 += w * mats[b, 0, 0]
            m01 += w * mats[b, 0, 1]
            m02 += w * mats[b, 0, 2]
            m10 += w * mats[b, 1, 0]
            m11 += w * mats[b, 1, 1]
            m12 += w * mats[b, 1, 2]
            m20 += w * mats[b, 2, 0]
            m21 += w * mats[b, 2, 1]
            m22 += w * mats[b, 2, 2]
            t0 += w * mats[b, 0, 3]
            t1 += w * mats[b, 1, 3]
            t2 += w * mats[b, 2, 3]
        det = (
            m00 * (m11 * m22 - m12 * m21)
            - m01 * (m10 * m22 - m12 * m20)
            + m02 * (m10 * m21 - m11 * m20)
        )
        if abs(det) < 1e-12:
            return SINGULAR_SDF
        bx = x - t0
        by = y - t1
        bz = z - t2
        inv = 1.0 / det
        cx = inv * ((m11 * m22 - m12 * m21) * bx + (m02 * m21 - m01 * m22) * by + (m01 * m12 - m02 * m11) * bz)
        cy = inv * ((m12 * m20 - m10 * m22) * bx + (m00 * m22 - m02 * m20) * by + (m02 * m10 - m00 * m12) * bz)
        cz = inv * ((m10 * m21 - m11 * m20) * bx + (m01 * m20 - m00 * m21) * by + (m00 * m11 - m01 * m10) * bz)
        return _canonical_sdf_one(cx, cy, cz, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases)

    @njit(cache=True, fastmath=False)
    def _posed_sdf_batch_nb(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases,
                            pseg_a, pseg_d, tau, mats):
        n = points.shape[0]
        out = np.empty(n)
        w = np.empty(seg_a.shape[0])
        for i in range(n):
            out[i] = _posed_sdf_one(
                points[i, 0], points[i, 1], points[i, 2],
                seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases,
                pseg_a, pseg_d, tau, mats, w,
            )
        return out

    @njit(cache=True, fastmath=False, parallel=True)
    def _sphere_trace_nb(origins, direction, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq,
                         dirs, phases, pseg_a, pseg_d, tau, mats, tol, max_steps, step_scale, bound):
        n = origins.shape[0]
        t_out = np.zeros(n)
        hit = np.zeros(n, dtype=np.bool_)
        for r in prange(n):
            w = np.empty(seg_a.shape[0])
            # slab test against the padded cube
            t_enter = -1e300
            t_exit = 1e300
            ok = True
            for axis in range(3):
                o = origins[r, axis]
                dv = direction[axis]
                if dv == 0.0:
                    if abs(o) > bound:
                        ok = False
                        break
                else:
                    ta = (-bound - o) / dv
                    tb = (bound - o) / dv
                    lo = min(ta, tb)
                    hi = max(ta, tb)
                    if lo > t_enter:
                        t_enter = lo
                    if hi < t_exit:
                        t_exit = hi
            if not ok or t_exit < t_enter:
                continue
            t = t_enter if t_enter > 0.0 else 0.0
            for _ in range(max_steps):
                if t > t_exit:
                    break
                px = origins[r, 0] + t * direction[0]
                py = origins[r, 1] + t * direction[1]
                pz = origins[r, 2] + t * direction[2]
                f = _posed_sdf_one(
                    px, py, pz, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases,
                    pseg_a, pseg_d, tau, mats, w,
                )
                if f < tol:
                    hit[r] = True
                    t_out[r] = t
                    break
                t += f * step_scale
        return t_out, hit

    @njit(cache=True, fastmath=False)
    def _mc_fill_nb(cube_index, active_cells, tri_table, edge_global, total_tris, g):
        edge_ids = np.empty((total_tris, 3), dtype=np.int64)
        n = 0
        for m in range(active_cells.shape[0]):
            ci = active_cells[m, 0]
            cj = active_cells[m, 1]
            ck = active_cells[m, 2]
            row = tri_table[cube_index[ci, cj, ck]]
            for s in range(0, 16, 3):
                if row[s] < 0:
                    break
                for v in range(3):
                    e = row[s + v]
                    axis = edge_global[e, 0]
                    ii = ci + edge_global[e, 1]
                    jj = cj + edge_global[e, 2]
                    kk = ck + edge_global[e, 3]
                    edge_ids[n, v] = ((axis * g + ii) * g + jj) * g + kk
                n += 1
        return edge_ids

    @njit(cache=True, fastmath=False, parallel=True)
    def _point_triangle_nb(points, tri_a, tri_b, tri_c):
        n = points.shape[0]
        nf = tri_a.shape[0]
        dist = np.empty(n)
        face = np.empty(n, dtype=np.int64)
        for i in prange(n):
            px = points[i, 0]
            py = points[i, 1]
            pz = points[i, 2]
            best = 1e300
            best_f = 0
            for f in range(nf):
                ax = tri_a[f, 0]
                ay = tri_a[f, 1]
                az = tri_a[f, 2]
                abx = tri_b[f, 0] - ax
                aby = tri_b[f, 1] - ay
                abz = tri_b[f, 2] - az
                acx = tri_c[f, 0] - ax
                acy = tri_c[f, 1] - ay
                acz = tri_c[f, 2] - az
                apx = px - ax
                apy = py - ay
                apz = pz - az
                d1 = abx * apx + aby * apy + abz * apz
                d2 = acx * apx + acy * apy + acz * apz
                if d1 <= 0.0 and d2 <= 0.0:
                    cx, cy, cz = ax, ay, az
                else:
                    bpx = px - tri_b[f, 0]
                    bpy = py - tri_b[f, 1]
                    bpz = pz - tri_b[f, 2]
                    d3 = abx * bpx + aby * bpy + abz * bpz
                    d4 = acx * bpx + acy * bpy + acz * bpz
                    if d3 >= 0.0 and d4 <= d3:
                        cx, cy, cz = tri_b[f, 0], tri_b[f, 1], tri_b[f, 2]
                    else:
                        vc = d1 * d4 - d3 * d2
                        if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
                            v = d1 / (d1 - d3)
                            cx = ax + v * abx
                            cy = ay + v * aby
                            cz = az + v * abz
                        else:
                            cpx = px - tri_c[f, 0]
                            cpy = py - tri_c[f, 1]
                            cpz = pz - tri_c[f, 2]
                            d5 = abx * cpx + aby * cpy + abz * cpz
                            d6 = acx * cpx + acy * cpy + acz * cpz
                            if d6 >= 0.0 and d5 <= d6:
                                cx, cy, cz = tri_c[f, 0], tri_c[f, 1], tri_c[f, 2]
                            else:
                                vb = d5 * d2 - d1 * d6
                                if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
                                    v = d2 / (d2 - d6)
                                    cx = ax + v * acx
                                    cy = ay + v * acy
                                    cz = az + v * acz
                                else:
                                    va = d3 * d6 - d5 * d4
                                    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
                                        v = (d4 - d3) / ((d4 - d3) + (d5 - d6))
                                        cx = tri_b[f, 0] + v * (tri_c[f, 0] - tri_b[f, 0])
                                        cy = tri_b[f, 1] + v * (tri_c[f, 1] - tri_b[f, 1])
                                        cz = tri_b[f, 2] + v * (tri_c[f, 2] - tri_b[f, 2])
                                    else:
                                        denom = 1.0 / (va + vb + vc)
                                        v = vb * denom
                                        w = vc * denom
                                        cx = ax + v * abx + w * acx
                                        cy = ay + v * aby + w * acy
                                        cz = az + v * abz + w * acz
                dx = px - cx
                dy = py - cy
                dz = pz - cz
                d2p = dx * dx + dy * dy + dz * dz
                if d2p < best:
                    best = d2p
                    best_f = f
            dist[i] = np.sqrt(best)
            face[i] = best_f
        return dist, face


# ---------------------------------------------------------------------------
# dispatching wrappers
# ---------------------------------------------------------------------------


def canonical_sdf_batch(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases):
    points = np.ascontiguousarray(points, dtype=np.float64)
    if USE_NUMBA and len(points) > 64:
        return _canonical_sdf_batch_nb(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases)
    return canonical_sdf_np(points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases)


def posed_sdf_batch(points, packed):
    points = np.ascontiguousarray(points, dtype=np.float64)
    if USE_NUMBA and len(points) > 64:
        (seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases, pseg_a, pseg_d, tau, mats) = packed
        return _posed_sdf_batch_nb(
            points, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases, pseg_a, pseg_d, tau, mats
        )
    return posed_sdf_np(points, packed)


def sphere_trace(origins, direction, packed, tol=1e-4, max_steps=256, step_scale=0.9, bound=1.1):
    origins = np.ascontiguousarray(origins, dtype=np.float64)
    direction = np.ascontiguousarray(direction, dtype=np.float64)
    if USE_NUMBA:
        (seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases, pseg_a, pseg_d, tau, mats) = packed
        return _sphere_trace_nb(
            origins, direction, seg_a, seg_d, len2, radii, smooth_k, coeffs, freq, dirs, phases,
            pseg_a, pseg_d, tau, mats, tol, max_steps, step_scale, bound,
        )
    return sphere_trace_np(origins, direction, packed, tol, max_steps, step_scale, bound)


def marching_cubes_edge_ids(values):
    """Classify cells and emit triangle edge-id triples for the zero level set.

    Returns (edge_ids (T, 3) int64) in deterministic cell order; the caller
    interpolates vertices per unique edge id.
    """
    values = np.asarray(values, dtype=np.float64)
    g = values.shape[0]
    r = g - 1
    inside = values < 0.0
    cube_index = np.zeros((r, r, r), dtype=np.int32)
    from .mc_tables import CORNER_OFFSETS

    for b, (dx, dy, dz) in enumerate(CORNER_OFFSETS):
        cube_index |= inside[dx : dx + r, dy : dy + r, dz : dz + r].astype(np.int32) << b
    active = EDGE_TABLE_NP[cube_index] != 0
    active_cells = np.argwhere(active)
    if active_cells.size == 0:
        return np.empty((0, 3), dtype=np.int64)
    total = int(TRI_COUNT_NP[cube_index[active]].sum())
    if USE_NUMBA:
        return _mc_fill_nb(cube_index, np.ascontiguousarray(active_cells), TRI_TABLE_NP, EDGE_GLOBAL_NP, total, g)
    return marching_cubes_fill_np(values, active_cells, cube_index, total)


def point_triangle_distances(points, tri_a, tri_b, tri_c):
    points = np.ascontiguousarray(points, dtype=np.float64)
    tri_a = np.ascontiguousarray(tri_a, dtype=np.float64)
    tri_b = np.ascontiguousarray(tri_b, dtype=np.float64)
    tri_c = np.ascontiguousarray(tri_c, dtype=np.float64)
    if USE_NUMBA:
        return _point_triangle_nb(points, tri_a, tri_b, tri_c)
    return point_triangle_np(points, tri_a, tri_b, tri_c)
