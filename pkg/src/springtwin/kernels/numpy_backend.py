"""Pure-numpy fallback kernels, semantically equivalent to the numba backend.

Vectorized where it pays (forces, integration, backward spring pass); the
short sequential collision-event loops stay in Python. Candidate collision
pairs come from an exact k-d query instead of the numba spatial hash; both
enumerate exactly the pairs closer than the collision distance and apply
impulses in the same (i, j) order, so the two backends agree.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree


def forces_into(F, x, v, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                gamma, node_mass, gx, gy, gz):
    degenerate = 0
    F[:] = node_mass * np.array([gx, gy, gz])
    if si.shape[0]:
        d = x[sj] - x[si]
        L = np.sqrt(np.einsum("ij,ij->i", d, d))
        ok = L > 1e-9
        degenerate = int(np.count_nonzero(~ok))
        Ls = np.where(ok, L, 1.0)
        coef = np.where(ok, stiff * (L - rest) / Ls, 0.0)
        fs = coef[:, None] * d
        np.add.at(F, si, fs)
        np.subtract.at(F, sj, fs)
        dv = v[si] - v[sj]
        np.subtract.at(F, si, gamma * dv)
        np.add.at(F, sj, gamma * dv)
    if aci.shape[0]:
        d = ctrl[aci] - x[ani]
        L = np.sqrt(np.einsum("ij,ij->i", d, d))
        ok = L > 1e-9
        Ls = np.where(ok, L, 1.0)
        coef = np.where(ok, ak * (L - arest) / Ls, 0.0)
        np.add.at(F, ani, coef[:, None] * d)
    return degenerate


def _candidate_pairs(x, d_coll):
    pairs = cKDTree(x).query_pairs(d_coll, output_type="ndarray")
    if len(pairs) == 0:
        return pairs.reshape(0, 2)
    d = x[pairs[:, 0]] - x[pairs[:, 1]]
    strict = np.einsum("ij,ij->i", d, d) < d_coll * d_coll
    pairs = pairs[strict]
    order = np.lexsort((pairs[:, 1], pairs[:, 0]))
    return pairs[order]


def collide_inplace(x, v, d_coll, e, mu, ground, rest_thresh,
                    ppi, ppj, ppn, ppv, pp_start,
                    gnode, gvpre, gflag, g_start):
    n = x.shape[0]
    pp_cnt = 0
    g_cnt = 0
    pp_cap = ppi.shape[0]
    g_cap = gnode.shape[0]

    if d_coll > 0.0 and n >= 2:
        for i, j in _candidate_pairs(x, d_coll):
            d = x[i] - x[j]
            L = float(np.sqrt(d @ d))
            if L < 1e-12:
                continue
            nrm = d / L
            rv = v[i] - v[j]
            vn = float(rv @ nrm)
            if vn >= 0.0:
                continue
            w = pp_start + pp_cnt
            if w < pp_cap:
                ppi[w] = i
                ppj[w] = j
                ppn[w] = nrm
                ppv[w] = rv
            pp_cnt += 1
            dv = 0.5 * (1.0 + e) * vn * nrm + 0.5 * mu * (rv - vn * nrm)
            v[i] -= dv
            v[j] += dv

    hit = np.flatnonzero((x[:, 2] <= ground) & (v[:, 2] < 0.0))
    flags = (-v[hit, 2] > rest_thresh).astype(np.float64)
    for k, i in enumerate(hit):
        w = g_start + g_cnt
        if w < g_cap:
            gnode[w] = i
            gvpre[w] = v[i]
            gflag[w] = flags[k]
        g_cnt += 1
    if hit.size:
        v[hit, 0] *= 1.0 - mu
        v[hit, 1] *= 1.0 - mu
        v[hit, 2] *= -flags * e
        x[hit, 2] = ground
    return pp_cnt, g_cnt, pp_start + pp_cnt, g_start + g_cnt


def _substep(x, v, F, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
             gamma, delta, node_mass, gx, gy, gz, h,
             d_coll, e, mu, ground,
             ppi, ppj, ppn, ppv, pp_start, gnode, gvpre, gflag, g_start):
    forces_into(F, x, v, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                gamma, node_mass, gx, gy, gz)
    v += h * F / node_mass
    v *= delta
    rest_thresh = 3.0 * h * float(np.sqrt(gx * gx + gy * gy + gz * gz))
    _, _, pp_end, g_end = collide_inplace(
        x, v, d_coll, e, mu, ground, rest_thresh,
        ppi, ppj, ppn, ppv, pp_start, gnode, gvpre, gflag, g_start
    )
    x += h * v
    return pp_end, g_end


_NO_I = np.empty(0, np.int64)
_NO_V = np.empty((0, 3), np.float64)
_NO_F = np.empty(0, np.float64)


def run_frame(x, v, si, sj, rest, stiff, aci, ani, arest, ak, ctrl0, ctrl1,
              substeps, gamma, delta, node_mass, gx, gy, gz, h,
              d_coll, e, mu, ground):
    F = np.empty_like(x)
    for s in range(substeps):
        xp = x.copy()
        vp = v.copy()
        a = (s + 1) / substeps
        ctrl = ctrl0 + a * (ctrl1 - ctrl0)
        _substep(x, v, F, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                 gamma, delta, node_mass, gx, gy, gz, h,
                 d_coll, e, mu, ground,
                 _NO_I, _NO_I, _NO_V, _NO_V, 0, _NO_I, _NO_V, _NO_F, 0)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            x[:] = xp
            v[:] = vp
            return s
    return -1


def run_frame_record(x, v, si, sj, rest, stiff, aci, ani, arest, ak,
                     ctrl0, ctrl1, substeps,
                     gamma, delta, node_mass, gx, gy, gz, h,
                     d_coll, e, mu, ground,
                     tx, tv, tc, s0,
                     ppi, ppj, ppn, ppv, pp_off, gnode, gvpre, gflag, g_off):
    F = np.empty_like(x)
    pp_start = int(pp_off[s0])
    g_start = int(g_off[s0])
    pp_cap = ppi.shape[0]
    g_cap = gnode.shape[0]
    for s in range(substeps):
        g = s0 + s
        tx[g] = x
        tv[g] = v
        a = (s + 1) / substeps
        ctrl = ctrl0 + a * (ctrl1 - ctrl0)
        tc[g] = ctrl
        pp_start, g_start = _substep(
            x, v, F, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
            gamma, delta, node_mass, gx, gy, gz, h,
            d_coll, e, mu, ground,
            ppi, ppj, ppn, ppv, pp_start, gnode, gvpre, gflag, g_start,
        )
        pp_off[g + 1] = pp_start
        g_off[g + 1] = g_start
        if pp_start > pp_cap or g_start > g_cap:
            need = pp_start if pp_start > pp_cap else g_start
            return 2, need, pp_start, g_start
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            x[:] = tx[g]
            v[:] = tv[g]
            return 1, s, pp_start, g_start
    return 0, -1, pp_start, g_start


def backward_frame(xbar, vbar, dlogk, dscal,
                   tx, tv, tc, s_lo, s_hi,
                   ppi, ppj, ppn, ppv, pp_off, gnode, gvpre, gflag, g_off,
                   si, sj, rest, stiff, aci, ani, arest, ak,
                   gamma, delta, node_mass, e, mu, gx, gy, gz, h):
    n = xbar.shape[0]
    F = np.empty((n, 3), np.float64)
    for s in range(s_hi - 1, s_lo - 1, -1):
        x0 = tx[s]
        v0 = tv[s]
        ctrl = tc[s]

        vbar += h * xbar

        for w in range(int(g_off[s + 1]) - 1, int(g_off[s]) - 1, -1):
            nd = gnode[w]
            fl = gflag[w]  # 0 for resting contact: no restitution was applied
            dscal[3] -= gvpre[w, 0] * vbar[nd, 0] + gvpre[w, 1] * vbar[nd, 1]
            dscal[2] -= fl * gvpre[w, 2] * vbar[nd, 2]
            vbar[nd, 0] *= 1.0 - mu
            vbar[nd, 1] *= 1.0 - mu
            vbar[nd, 2] *= -fl * e
            xbar[nd, 2] = 0.0

        for w in range(int(pp_off[s + 1]) - 1, int(pp_off[s]) - 1, -1):
            i = ppi[w]
            j = ppj[w]
            nrm = ppn[w]
            rv = ppv[w]
            W = vbar[j] - vbar[i]
            vn = float(rv @ nrm)
            Wn = float(W @ nrm)
            t_rel = rv - vn * nrm
            dscal[2] += 0.5 * vn * Wn
            dscal[3] += 0.5 * float(W @ t_rel)
            mw = 0.5 * (1.0 + e) * Wn * nrm + 0.5 * mu * (W - Wn * nrm)
            vbar[i] += mw
            vbar[j] -= mw

        forces_into(F, x0, v0, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                    gamma, node_mass, gx, gy, gz)
        hm = h / node_mass
        dscal[1] += float(np.sum(vbar * (v0 + hm * F)))
        Fbar = delta * hm * vbar
        vbar *= delta

        if si.shape[0]:
            W = Fbar[si] - Fbar[sj]
            d = x0[sj] - x0[si]
            L = np.sqrt(np.einsum("ij,ij->i", d, d))
            ok = L > 1e-9
            Ls = np.where(ok, L, 1.0)
            u = d / Ls[:, None]
            uW = np.einsum("ij,ij->i", u, W)
            dlogk += np.where(ok, stiff * (L - rest) * uW, 0.0)
            ca = stiff * (1.0 - rest / Ls)
            cb = stiff * rest / Ls * uW
            jw = np.where(ok, 1.0, 0.0)[:, None] * (ca[:, None] * W + cb[:, None] * u)
            np.add.at(xbar, sj, jw)
            np.subtract.at(xbar, si, jw)
            dscal[0] -= float(np.einsum("ij,ij->", v0[si] - v0[sj], W))
            np.subtract.at(vbar, si, gamma * W)
            np.add.at(vbar, sj, gamma * W)

        if aci.shape[0]:
            W = Fbar[ani]
            d = ctrl[aci] - x0[ani]
            L = np.sqrt(np.einsum("ij,ij->i", d, d))
            ok = L > 1e-9
            Ls = np.where(ok, L, 1.0)
            u = d / Ls[:, None]
            uW = np.einsum("ij,ij->i", u, W)
            ca = ak * (1.0 - arest / Ls)
            cb = ak * arest / Ls * uW
            jw = np.where(ok, 1.0, 0.0)[:, None] * (ca[:, None] * W + cb[:, None] * u)
            np.subtract.at(xbar, ani, jw)
