"""Compiled per-Gaussian and per-pixel kernels for the tile rasterizer.

Everything is float64. Per-pixel work is split by tile; every tile-list entry
owns its own gradient slot, so the backward pass never races and the final
per-Gaussian reduction runs in a fixed order.
"""

import math

import numba
import numpy as np

from .sh import sh_basis

# the bundled TBB is too old for numba and only produces a warning
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

TILE = 16
NEAR_PLANE = 0.01
COV2D_FLOOR = 0.3
ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.99
MIN_SCALE = 1e-8
MIN_QUAD_A = 1e-12


@numba.njit(cache=True)
def preprocess(means, quats, log_scales, opacity_logits, sh, R_wc, t_wc, campos,
               fx, fy, cx, cy, sigma_scale):
    n = means.shape[0]
    nsh = sh.shape[1]
    valid = np.zeros(n, dtype=np.bool_)
    depth = np.zeros(n)
    tcam = np.zeros((n, 3))
    mean2d = np.zeros((n, 2))
    cov2d = np.zeros((n, 3))
    conic = np.zeros((n, 3))
    radius = np.zeros(n)
    color = np.zeros((n, 3))
    clamped = np.zeros((n, 3), dtype=np.bool_)
    opacity = np.zeros(n)
    rot = np.zeros((n, 3, 3))
    scale = np.zeros((n, 3))
    qn = np.zeros((n, 4))
    vs = np.zeros((n, 3))
    inv_axes = np.zeros((n, 3))
    hit_ok = np.zeros(n, dtype=np.bool_)
    basis = np.zeros(16)
    dbasis = np.zeros((16, 3))
    for g in range(n):
        x = R_wc[0, 0] * means[g, 0] + R_wc[0, 1] * means[g, 1] + R_wc[0, 2] * means[g, 2] + t_wc[0]
        y = R_wc[1, 0] * means[g, 0] + R_wc[1, 1] * means[g, 1] + R_wc[1, 2] * means[g, 2] + t_wc[1]
        z = R_wc[2, 0] * means[g, 0] + R_wc[2, 1] * means[g, 1] + R_wc[2, 2] * means[g, 2] + t_wc[2]
        tcam[g, 0] = x
        tcam[g, 1] = y
        tcam[g, 2] = z
        depth[g] = z
        op = 1.0 / (1.0 + math.exp(-opacity_logits[g]))
        opacity[g] = op
        if not (z > NEAR_PLANE) or op * 255.0 <= 1.0:
            continue

        nq = math.sqrt(quats[g, 0] ** 2 + quats[g, 1] ** 2 + quats[g, 2] ** 2 + quats[g, 3] ** 2)
        w = quats[g, 0] / nq
        qx = quats[g, 1] / nq
        qy = quats[g, 2] / nq
        qz = quats[g, 3] / nq
        qn[g, 0] = w
        qn[g, 1] = qx
        qn[g, 2] = qy
        qn[g, 3] = qz
        R = rot[g]
        R[0, 0] = 1 - 2 * (qy * qy + qz * qz)
        R[0, 1] = 2 * (qx * qy - w * qz)
        R[0, 2] = 2 * (qx * qz + w * qy)
        R[1, 0] = 2 * (qx * qy + w * qz)
        R[1, 1] = 1 - 2 * (qx * qx + qz * qz)
        R[1, 2] = 2 * (qy * qz - w * qx)
        R[2, 0] = 2 * (qx * qz - w * qy)
        R[2, 1] = 2 * (qy * qz + w * qx)
        R[2, 2] = 1 - 2 * (qx * qx + qy * qy)
        s0 = math.exp(log_scales[g, 0])
        s1 = math.exp(log_scales[g, 1])
        s2 = math.exp(log_scales[g, 2])
        scale[g, 0] = s0
        scale[g, 1] = s1
        scale[g, 2] = s2

        # world covariance M M^T with M = R diag(s)
        S3 = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                S3[i, j] = (R[i, 0] * R[j, 0] * s0 * s0 + R[i, 1] * R[j, 1] * s1 * s1
                            + R[i, 2] * R[j, 2] * s2 * s2)
        # T = J R_wc
        Tm = np.empty((2, 3))
        j00 = fx / z
        j02 = -fx * x / (z * z)
        j11 = fy / z
        j12 = -fy * y / (z * z)
        for k in range(3):
            Tm[0, k] = j00 * R_wc[0, k] + j02 * R_wc[2, k]
            Tm[1, k] = j11 * R_wc[1, k] + j12 * R_wc[2, k]
        ca = 0.0
        cb = 0.0
        cc = 0.0
        for i in range(3):
            for j in range(3):
                ca += Tm[0, i] * S3[i, j] * Tm[0, j]
                cb += Tm[0, i] * S3[i, j] * Tm[1, j]
                cc += Tm[1, i] * S3[i, j] * Tm[1, j]
        ca += COV2D_FLOOR
        cc += COV2D_FLOOR
        det = ca * cc - cb * cb
        if not (det > 0.0):
            continue
        cov2d[g, 0] = ca
        cov2d[g, 1] = cb
        cov2d[g, 2] = cc
        conic[g, 0] = cc / det
        conic[g, 1] = -cb / det
        conic[g, 2] = ca / det
        mean2d[g, 0] = fx * x / z + cx
        mean2d[g, 1] = fy * y / z + cy
        mid = 0.5 * (ca + cc)
        lam = mid + math.sqrt(max(mid * mid - det, 0.0))
        radius[g] = math.sqrt(2.0 * math.log(255.0 * op)) * math.sqrt(lam) * (1.0 + 1e-9)

        # view-dependent color from the camera center to the mean
        dx = means[g, 0] - campos[0]
        dy = means[g, 1] - campos[1]
        dz = means[g, 2] - campos[2]
        nd = math.sqrt(dx * dx + dy * dy + dz * dz)
        sh_basis(dx / nd, dy / nd, dz / nd, nsh, basis, dbasis)
        for ch in range(3):
            acc = 0.5
            for k in range(nsh):
                acc += basis[k] * sh[g, k, ch]
            if acc < 0.0:
                clamped[g, ch] = True
                acc = 0.0
            color[g, ch] = acc

        # ray origin in the scaled local frame
        a0 = sigma_scale * s0
        a1 = sigma_scale * s1
        a2 = sigma_scale * s2
        if a0 >= MIN_SCALE and a1 >= MIN_SCALE and a2 >= MIN_SCALE:
            hit_ok[g] = True
            inv_axes[g, 0] = 1.0 / a0
            inv_axes[g, 1] = 1.0 / a1
            inv_axes[g, 2] = 1.0 / a2
            ox = campos[0] - means[g, 0]
            oy = campos[1] - means[g, 1]
            oz = campos[2] - means[g, 2]
            for k in range(3):
                vs[g, k] = (R[0, k] * ox + R[1, k] * oy + R[2, k] * oz) * inv_axes[g, k]
        valid[g] = True
    return (valid, depth, tcam, mean2d, cov2d, conic, radius, color, clamped, opacity,
            rot, scale, qn, vs, inv_axes, hit_ok)


@numba.njit(cache=True)
def tile_entries(valid, mean2d, radius, W, H):
    """Tile id / Gaussian id pairs for every tile a Gaussian's support touches."""
    ntx = (W + TILE - 1) // TILE
    nty = (H + TILE - 1) // TILE
    n = valid.shape[0]
    u0 = np.zeros(n, dtype=np.int64)
    u1 = np.full(n, -1, dtype=np.int64)
    v0 = np.zeros(n, dtype=np.int64)
    v1 = np.full(n, -1, dtype=np.int64)
    total = 0
    for g in range(n):
        if not valid[g]:
            continue
        r = radius[g]
        # pixel centers c + 0.5 within [m - r, m + r]
        lo_u = max(0, int(math.ceil(mean2d[g, 0] - r - 0.5)))
        hi_u = min(W - 1, int(math.floor(mean2d[g, 0] + r - 0.5)))
        lo_v = max(0, int(math.ceil(mean2d[g, 1] - r - 0.5)))
        hi_v = min(H - 1, int(math.floor(mean2d[g, 1] + r - 0.5)))
        if lo_u > hi_u or lo_v > hi_v:
            continue
        u0[g] = lo_u // TILE
        u1[g] = hi_u // TILE
        v0[g] = lo_v // TILE
        v1[g] = hi_v // TILE
        total += (u1[g] - u0[g] + 1) * (v1[g] - v0[g] + 1)
    tiles = np.empty(total, dtype=np.int64)
    gids = np.empty(total, dtype=np.int64)
    e = 0
    for g in range(n):
        for ty in range(v0[g], v1[g] + 1):
            for tx in range(u0[g], u1[g] + 1):
                tiles[e] = ty * ntx + tx
                gids[e] = g
                e += 1
    return tiles, gids, ntx, nty


@numba.njit(inline="always")
def _ray_depth(g, dw0, dw1, dw2, dz, rot, vs, inv_axes, hit_ok, depth):
    """Blended depth value of Gaussian ``g`` along a pixel ray.

    Returns (d, hit, a, b, ds0, ds1, ds2); a miss falls back to the center depth.
    """
    if not hit_ok[g]:
        return depth[g], False, 0.0, 0.0, 0.0, 0.0, 0.0
    ds0 = (rot[g, 0, 0] * dw0 + rot[g, 1, 0] * dw1 + rot[g, 2, 0] * dw2) * inv_axes[g, 0]
    ds1 = (rot[g, 0, 1] * dw0 + rot[g, 1, 1] * dw1 + rot[g, 2, 1] * dw2) * inv_axes[g, 1]
    ds2 = (rot[g, 0, 2] * dw0 + rot[g, 1, 2] * dw1 + rot[g, 2, 2] * dw2) * inv_axes[g, 2]
    a = ds0 * ds0 + ds1 * ds1 + ds2 * ds2
    if a < MIN_QUAD_A:
        return depth[g], False, 0.0, 0.0, 0.0, 0.0, 0.0
    b = 2.0 * (vs[g, 0] * ds0 + vs[g, 1] * ds1 + vs[g, 2] * ds2)
    c = vs[g, 0] ** 2 + vs[g, 1] ** 2 + vs[g, 2] ** 2 - 1.0
    if b * b - 4.0 * a * c < 0.0:
        return depth[g], False, 0.0, 0.0, 0.0, 0.0, 0.0
    t_mid = -b / (2.0 * a)
    if t_mid <= 0.0:
        return depth[g], False, 0.0, 0.0, 0.0, 0.0, 0.0
    return t_mid * dz, True, a, b, ds0, ds1, ds2


@numba.njit(parallel=True, cache=True)
def render_forward(ids, ranges, W, H, ntx, fx, fy, cx, cy, R_cw,
                   mean2d, conic, opacity, color, sem, kfac, depth, rot, vs, inv_axes, hit_ok, bg, t_min,
                   out_C, out_D, out_O, out_K, out_T, out_last, out_count, ent_w):
    ntiles = ranges.shape[0]
    nsem = sem.shape[1]
    for t in numba.prange(ntiles):
        ty = t // ntx
        tx = t - ty * ntx
        start = ranges[t, 0]
        end = ranges[t, 1]
        for py in range(ty * TILE, min(H, ty * TILE + TILE)):
            for px in range(tx * TILE, min(W, tx * TILE + TILE)):
                pu = px + 0.5
                pv = py + 0.5
                c0 = (pu - cx) / fx
                c1 = (pv - cy) / fy
                nrm = math.sqrt(c0 * c0 + c1 * c1 + 1.0)
                c0 /= nrm
                c1 /= nrm
                dz = 1.0 / nrm
                dw0 = R_cw[0, 0] * c0 + R_cw[0, 1] * c1 + R_cw[0, 2] * dz
                dw1 = R_cw[1, 0] * c0 + R_cw[1, 1] * c1 + R_cw[1, 2] * dz
                dw2 = R_cw[2, 0] * c0 + R_cw[2, 1] * c1 + R_cw[2, 2] * dz
                T = 1.0
                last = start
                count = 0
                for j in range(start, end):
                    g = ids[j]
                    ddx = pu - mean2d[g, 0]
                    ddy = pv - mean2d[g, 1]
                    power = 0.5 * (conic[g, 0] * ddx * ddx + conic[g, 2] * ddy * ddy) + conic[g, 1] * ddx * ddy
                    alpha = min(ALPHA_MAX, opacity[g] * math.exp(-power))
                    if alpha < ALPHA_MIN:
                        continue
                    d = _ray_depth(g, dw0, dw1, dw2, dz, rot, vs, inv_axes, hit_ok, depth)[0]
                    w = alpha * T
                    for ch in range(3):
                        out_C[py, px, ch] += color[g, ch] * w
                    for ch in range(nsem):
                        out_O[py, px, ch] += sem[g, ch] * w
                    out_D[py, px] += d * w
                    out_K[py, px] += kfac[g] * w
                    ent_w[j] += w
                    T *= 1.0 - alpha
                    last = j + 1
                    count += 1
                    if T < t_min:
                        break
                for ch in range(3):
                    out_C[py, px, ch] += bg[ch] * T
                out_T[py, px] = T
                out_last[py, px] = last
                out_count[py, px] = count


@numba.njit(parallel=True, cache=True)
def render_backward(ids, ranges, W, H, ntx, fx, fy, cx, cy, R_cw, campos, rz_wc,
                    mean2d, conic, opacity, color, sem, kfac, depth, rot, vs, inv_axes, hit_ok, bg,
                    sigma_scale, depth_to_alpha,
                    T_final, last_arr, dC, dD, dO, dK,
                    e_color, e_sem, e_k, e_op, e_mean2d, e_conic, e_mu, e_R, e_s):
    ntiles = ranges.shape[0]
    nsem = sem.shape[1]
    for t in numba.prange(ntiles):
        ty = t // ntx
        tx = t - ty * ntx
        start = ranges[t, 0]
        acc_o = np.zeros(nsem)
        for py in range(ty * TILE, min(H, ty * TILE + TILE)):
            for px in range(tx * TILE, min(W, tx * TILE + TILE)):
                pu = px + 0.5
                pv = py + 0.5
                c0 = (pu - cx) / fx
                c1 = (pv - cy) / fy
                nrm = math.sqrt(c0 * c0 + c1 * c1 + 1.0)
                c0 /= nrm
                c1 /= nrm
                dz = 1.0 / nrm
                dw0 = R_cw[0, 0] * c0 + R_cw[0, 1] * c1 + R_cw[0, 2] * dz
                dw1 = R_cw[1, 0] * c0 + R_cw[1, 1] * c1 + R_cw[1, 2] * dz
                dw2 = R_cw[2, 0] * c0 + R_cw[2, 1] * c1 + R_cw[2, 2] * dz
                Tf = T_final[py, px]
                T = Tf
                g_c0 = dC[py, px, 0]
                g_c1 = dC[py, px, 1]
                g_c2 = dC[py, px, 2]
                g_d = dD[py, px]
                g_k = dK[py, px]
                bg_dot = bg[0] * g_c0 + bg[1] * g_c1 + bg[2] * g_c2
                acc_c0 = 0.0
                acc_c1 = 0.0
                acc_c2 = 0.0
                acc_d = 0.0
                acc_k = 0.0
                for ch in range(nsem):
                    acc_o[ch] = 0.0
                for j in range(last_arr[py, px] - 1, start - 1, -1):
                    g = ids[j]
                    ddx = pu - mean2d[g, 0]
                    ddy = pv - mean2d[g, 1]
                    power = 0.5 * (conic[g, 0] * ddx * ddx + conic[g, 2] * ddy * ddy) + conic[g, 1] * ddx * ddy
                    G = math.exp(-power)
                    raw = opacity[g] * G
                    alpha = min(ALPHA_MAX, raw)
                    if alpha < ALPHA_MIN:
                        continue
                    T = T / (1.0 - alpha)
                    w = alpha * T

                    e_color[j, 0] += g_c0 * w
                    e_color[j, 1] += g_c1 * w
                    e_color[j, 2] += g_c2 * w
                    e_k[j] += g_k * w
                    dl_dalpha = ((color[g, 0] - acc_c0) * g_c0 + (color[g, 1] - acc_c1) * g_c1
                                 + (color[g, 2] - acc_c2) * g_c2 + (kfac[g] - acc_k) * g_k)
                    for ch in range(nsem):
                        go = dO[py, px, ch]
                        e_sem[j, ch] += go * w
                        dl_dalpha += (sem[g, ch] - acc_o[ch]) * go
                        acc_o[ch] = alpha * sem[g, ch] + (1.0 - alpha) * acc_o[ch]

                    d, hit, qa, qb, ds0, ds1, ds2 = _ray_depth(g, dw0, dw1, dw2, dz, rot, vs, inv_axes, hit_ok, depth)
                    if depth_to_alpha:
                        dl_dalpha += (d - acc_d) * g_d
                    dl_dalpha *= T
                    dl_dalpha -= Tf * bg_dot / (1.0 - alpha)

                    acc_c0 = alpha * color[g, 0] + (1.0 - alpha) * acc_c0
                    acc_c1 = alpha * color[g, 1] + (1.0 - alpha) * acc_c1
                    acc_c2 = alpha * color[g, 2] + (1.0 - alpha) * acc_c2
                    acc_k = alpha * kfac[g] + (1.0 - alpha) * acc_k
                    acc_d = alpha * d + (1.0 - alpha) * acc_d

                    if raw < ALPHA_MAX:
                        e_op[j] += dl_dalpha * G
                        g_pow = -alpha * dl_dalpha
                        e_mean2d[j, 0] -= g_pow * (conic[g, 0] * ddx + conic[g, 1] * ddy)
                        e_mean2d[j, 1] -= g_pow * (conic[g, 1] * ddx + conic[g, 2] * ddy)
                        e_conic[j, 0] += g_pow * 0.5 * ddx * ddx
                        e_conic[j, 1] += g_pow * 0.5 * ddx * ddy
                        e_conic[j, 2] += g_pow * 0.5 * ddy * ddy

                    gd = g_d * w
                    if gd == 0.0:
                        continue
                    if not hit:
                        for k in range(3):
                            e_mu[j, k] += gd * rz_wc[k]
                        continue
                    # back through d = t_mid * dz, t_mid = -b / 2a
                    g_t = gd * dz
                    vs0 = vs[g, 0]
                    vs1 = vs[g, 1]
                    vs2 = vs[g, 2]
                    ba2 = qb / (qa * qa)
                    gvs0 = -g_t * ds0 / qa
                    gvs1 = -g_t * ds1 / qa
                    gvs2 = -g_t * ds2 / qa
                    gds0 = g_t * (ba2 * ds0 - vs0 / qa)
                    gds1 = g_t * (ba2 * ds1 - vs1 / qa)
                    gds2 = g_t * (ba2 * ds2 - vs2 / qa)
                    ia0 = inv_axes[g, 0]
                    ia1 = inv_axes[g, 1]
                    ia2 = inv_axes[g, 2]
                    e_s[j, 0] -= sigma_scale * (gvs0 * vs0 + gds0 * ds0) * ia0
                    e_s[j, 1] -= sigma_scale * (gvs1 * vs1 + gds1 * ds1) * ia1
                    e_s[j, 2] -= sigma_scale * (gvs2 * vs2 + gds2 * ds2) * ia2
                    gvl0 = gvs0 * ia0
                    gvl1 = gvs1 * ia1
                    gvl2 = gvs2 * ia2
                    gdl0 = gds0 * ia0
                    gdl1 = gds1 * ia1
                    gdl2 = gds2 * ia2
                    # v_l = R^T (campos - mu), d_l = R^T dir
                    for i in range(3):
                        e_mu[j, i] -= rot[g, i, 0] * gvl0 + rot[g, i, 1] * gvl1 + rot[g, i, 2] * gvl2
                    ov0 = vs0 / ia0
                    ov1 = vs1 / ia1
                    ov2 = vs2 / ia2
                    # world offset campos - mu recovered from v_l = R^T v
                    for i in range(3):
                        v_i = rot[g, i, 0] * ov0 + rot[g, i, 1] * ov1 + rot[g, i, 2] * ov2
                        if i == 0:
                            d_i = dw0
                        elif i == 1:
                            d_i = dw1
                        else:
                            d_i = dw2
                        e_R[j, i, 0] += v_i * gvl0 + d_i * gdl0
                        e_R[j, i, 1] += v_i * gvl1 + d_i * gdl1
                        e_R[j, i, 2] += v_i * gvl2 + d_i * gdl2


@numba.njit(cache=True)
def reduce_entries(ids, ent, out):
    for j in range(ids.shape[0]):
        out[ids[j]] += ent[j]


@numba.njit(cache=True)
def gaussian_backward(valid, means, campos, sh, qn, rot, scale, tcam, cov2d, conic, clamped,
                      R_wc, fx, fy,
                      g_color, g_mean2d, g_conic, g_mu, g_R, g_s,
                      out_sh, out_q):
    """Per-Gaussian part of the backward pass (activated-space gradients).

    ``g_mu``, ``g_R`` and ``g_s`` arrive holding the depth-path terms and are
    completed in place with the color, projection and covariance terms.
    """
    n = means.shape[0]
    nsh = sh.shape[1]
    basis = np.zeros(16)
    dbasis = np.zeros((16, 3))
    for g in range(n):
        if not valid[g]:
            continue
        # color -> SH coefficients and view direction
        gc = np.zeros(3)
        for ch in range(3):
            if not clamped[g, ch]:
                gc[ch] = g_color[g, ch]
        dx = means[g, 0] - campos[0]
        dy = means[g, 1] - campos[1]
        dz = means[g, 2] - campos[2]
        nd = math.sqrt(dx * dx + dy * dy + dz * dz)
        ux = dx / nd
        uy = dy / nd
        uz = dz / nd
        sh_basis(ux, uy, uz, nsh, basis, dbasis)
        gu0 = 0.0
        gu1 = 0.0
        gu2 = 0.0
        for k in range(nsh):
            s_k = 0.0
            for ch in range(3):
                out_sh[g, k, ch] = basis[k] * gc[ch]
                s_k += sh[g, k, ch] * gc[ch]
            gu0 += s_k * dbasis[k, 0]
            gu1 += s_k * dbasis[k, 1]
            gu2 += s_k * dbasis[k, 2]
        radial = gu0 * ux + gu1 * uy + gu2 * uz
        g_mu[g, 0] += (gu0 - radial * ux) / nd
        g_mu[g, 1] += (gu1 - radial * uy) / nd
        g_mu[g, 2] += (gu2 - radial * uz) / nd

        # conic -> 2D covariance: dL/dSigma = -Q G Q
        Q = np.empty((2, 2))
        Q[0, 0] = conic[g, 0]
        Q[0, 1] = conic[g, 1]
        Q[1, 0] = conic[g, 1]
        Q[1, 1] = conic[g, 2]
        Gq = np.empty((2, 2))
        Gq[0, 0] = g_conic[g, 0]
        Gq[0, 1] = g_conic[g, 1]
        Gq[1, 0] = g_conic[g, 1]
        Gq[1, 1] = g_conic[g, 2]
        G2 = -(Q @ Gq @ Q)

        x = tcam[g, 0]
        y = tcam[g, 1]
        z = tcam[g, 2]
        J = np.zeros((2, 3))
        J[0, 0] = fx / z
        J[0, 2] = -fx * x / (z * z)
        J[1, 1] = fy / z
        J[1, 2] = -fy * y / (z * z)
        Tm = J @ R_wc
        M = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                M[i, j] = rot[g, i, j] * scale[g, j]
        S3 = M @ M.T
        G3 = Tm.T @ G2 @ Tm
        gT = 2.0 * (G2 @ Tm @ S3)
        gJ = gT @ R_wc.T

        gx = g_mean2d[g, 0] * fx / z
        gy = g_mean2d[g, 1] * fy / z
        gz = -g_mean2d[g, 0] * fx * x / (z * z) - g_mean2d[g, 1] * fy * y / (z * z)
        gx += -gJ[0, 2] * fx / (z * z)
        gy += -gJ[1, 2] * fy / (z * z)
        gz += (-gJ[0, 0] * fx / (z * z) + gJ[0, 2] * 2.0 * fx * x / (z * z * z)
               - gJ[1, 1] * fy / (z * z) + gJ[1, 2] * 2.0 * fy * y / (z * z * z))
        for i in range(3):
            g_mu[g, i] += R_wc[0, i] * gx + R_wc[1, i] * gy + R_wc[2, i] * gz

        gM = 2.0 * (G3 @ M)
        for j in range(3):
            acc = 0.0
            for i in range(3):
                acc += gM[i, j] * rot[g, i, j]
                g_R[g, i, j] += gM[i, j] * scale[g, j]
            g_s[g, j] += acc

        w = qn[g, 0]
        qx = qn[g, 1]
        qy = qn[g, 2]
        qz = qn[g, 3]
        Gr = g_R[g]
        out_q[g, 0] = 2 * (-qz * Gr[0, 1] + qy * Gr[0, 2] + qz * Gr[1, 0] - qx * Gr[1, 2]
                           - qy * Gr[2, 0] + qx * Gr[2, 1])
        out_q[g, 1] = 2 * (qy * Gr[0, 1] + qz * Gr[0, 2] + qy * Gr[1, 0] - 2 * qx * Gr[1, 1]
                           - w * Gr[1, 2] + qz * Gr[2, 0] + w * Gr[2, 1] - 2 * qx * Gr[2, 2])
        out_q[g, 2] = 2 * (-2 * qy * Gr[0, 0] + qx * Gr[0, 1] + w * Gr[0, 2] + qx * Gr[1, 0]
                           + qz * Gr[1, 2] - w * Gr[2, 0] + qz * Gr[2, 1] - 2 * qy * Gr[2, 2])
        out_q[g, 3] = 2 * (-2 * qz * Gr[0, 0] - w * Gr[0, 1] + qx * Gr[0, 2] + w * Gr[1, 0]
                           - 2 * qz * Gr[1, 1] + qy * Gr[1, 2] + qx * Gr[2, 0] + qy * Gr[2, 1])
