"""Numba loop kernels for the spring-mass substep, its tape recorder, and the
hand-written reverse pass.

All kernels are single-threaded (deterministic summation order) and compiled
with ``nogil`` so independent simulator instances can run on worker threads.
The integration scheme per substep: accumulate forces at the current state,
apply the damped velocity update, resolve impulse collisions, then advance
positions with the updated velocities.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_JIT = dict(cache=True, nogil=True)

_CELL_OFF = 1 << 20  # spatial-hash cell coordinates clipped to 21-bit fields


@njit(**_JIT)
def forces_into(F, x, v, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                gamma, node_mass, gx, gy, gz):
    """Accumulate spring + dashpot + control + gravity forces into F.

    Coincident endpoints (length < 1e-9) contribute no spring force but the
    dashpot still applies; the count of such springs is returned.
    """
    n = x.shape[0]
    degenerate = 0
    for i in range(n):
        F[i, 0] = node_mass * gx
        F[i, 1] = node_mass * gy
        F[i, 2] = node_mass * gz
    for e in range(si.shape[0]):
        i = si[e]
        j = sj[e]
        dx = x[j, 0] - x[i, 0]
        dy = x[j, 1] - x[i, 1]
        dz = x[j, 2] - x[i, 2]
        L = math.sqrt(dx * dx + dy * dy + dz * dz)
        if L > 1e-9:
            c = stiff[e] * (L - rest[e]) / L
            F[i, 0] += c * dx
            F[i, 1] += c * dy
            F[i, 2] += c * dz
            F[j, 0] -= c * dx
            F[j, 1] -= c * dy
            F[j, 2] -= c * dz
        else:
            degenerate += 1
        dvx = v[i, 0] - v[j, 0]
        dvy = v[i, 1] - v[j, 1]
        dvz = v[i, 2] - v[j, 2]
        F[i, 0] -= gamma * dvx
        F[i, 1] -= gamma * dvy
        F[i, 2] -= gamma * dvz
        F[j, 0] += gamma * dvx
        F[j, 1] += gamma * dvy
        F[j, 2] += gamma * dvz
    for a in range(aci.shape[0]):
        c_ = aci[a]
        nd = ani[a]
        dx = ctrl[c_, 0] - x[nd, 0]
        dy = ctrl[c_, 1] - x[nd, 1]
        dz = ctrl[c_, 2] - x[nd, 2]
        L = math.sqrt(dx * dx + dy * dy + dz * dz)
        if L > 1e-9:
            c = ak[a] * (L - arest[a]) / L
            F[nd, 0] += c * dx
            F[nd, 1] += c * dy
            F[nd, 2] += c * dz
    return degenerate


_MAX_DENSE_CELLS = 1 << 22


@njit(**_JIT)
def _cell_coords(x, d_coll):
    n = x.shape[0]
    inv = 1.0 / d_coll
    cx = np.empty(n, np.int64)
    cy = np.empty(n, np.int64)
    cz = np.empty(n, np.int64)
    for i in range(n):
        a = np.int64(math.floor(x[i, 0] * inv))
        b = np.int64(math.floor(x[i, 1] * inv))
        c = np.int64(math.floor(x[i, 2] * inv))
        if a < -_CELL_OFF:
            a = -_CELL_OFF
        if a > _CELL_OFF - 2:
            a = _CELL_OFF - 2
        if b < -_CELL_OFF:
            b = -_CELL_OFF
        if b > _CELL_OFF - 2:
            b = _CELL_OFF - 2
        if c < -_CELL_OFF:
            c = -_CELL_OFF
        if c > _CELL_OFF - 2:
            c = _CELL_OFF - 2
        cx[i] = a
        cy[i] = b
        cz[i] = c
    return cx, cy, cz


@njit(**_JIT)
def _pairs_sorted_into(x, d_coll, cx, cy, cz, pi, pj):
    """Sorted-key cell lookup; slower than the dense grid but immune to huge
    coordinate extents (e.g. mid-divergence states during a parameter search).
    Writes while capacity lasts, always returns the full pair count."""
    n = x.shape[0]
    keys = np.empty(n, np.int64)
    for i in range(n):
        keys[i] = ((cx[i] + _CELL_OFF) << 42) | ((cy[i] + _CELL_OFF) << 21) | (cz[i] + _CELL_OFF)
    order = np.argsort(keys)
    skeys = keys[order]

    cap = pi.shape[0]
    cnt = 0
    r2 = d_coll * d_coll
    for i in range(n):
        for oa in range(-1, 2):
            for ob in range(-1, 2):
                for oc in range(-1, 2):
                    key = (
                        ((cx[i] + oa + _CELL_OFF) << 42)
                        | ((cy[i] + ob + _CELL_OFF) << 21)
                        | (cz[i] + oc + _CELL_OFF)
                    )
                    lo = np.searchsorted(skeys, key, side="left")
                    hi = np.searchsorted(skeys, key, side="right")
                    for t in range(lo, hi):
                        j = order[t]
                        if j <= i:
                            continue
                        dx = x[i, 0] - x[j, 0]
                        dy = x[i, 1] - x[j, 1]
                        dz = x[i, 2] - x[j, 2]
                        if dx * dx + dy * dy + dz * dz < r2:
                            if cnt < cap:
                                pi[cnt] = i
                                pj[cnt] = j
                            cnt += 1
    return cnt


@njit(**_JIT)
def _pairs_dense_into(x, d_coll, cx, cy, cz, gx, gy, gz, minx, miny, minz, pi, pj):
    """Direct-addressed grid over the occupied bounding box: O(1) neighbor
    cell lookup. The pair buffers are never reallocated here (that would
    defeat pointer hoisting in the hot loop); overflow is only counted."""
    n = x.shape[0]
    head = np.full(gx * gy * gz, -1, np.int64)
    nxt = np.empty(n, np.int64)
    for i in range(n):
        cid = (cx[i] - minx) + gx * ((cy[i] - miny) + gy * (cz[i] - minz))
        nxt[i] = head[cid]
        head[cid] = i

    cap = pi.shape[0]
    cnt = 0
    r2 = d_coll * d_coll
    for i in range(n):
        for oa in range(-1, 2):
            a = cx[i] + oa - minx
            if a < 0 or a >= gx:
                continue
            for ob in range(-1, 2):
                b = cy[i] + ob - miny
                if b < 0 or b >= gy:
                    continue
                for oc in range(-1, 2):
                    c = cz[i] + oc - minz
                    if c < 0 or c >= gz:
                        continue
                    j = head[a + gx * (b + gy * c)]
                    while j != -1:
                        if j > i:
                            dx = x[i, 0] - x[j, 0]
                            dy = x[i, 1] - x[j, 1]
                            dz = x[i, 2] - x[j, 2]
                            if dx * dx + dy * dy + dz * dz < r2:
                                if cnt < cap:
                                    pi[cnt] = i
                                    pj[cnt] = j
                                cnt += 1
                        j = nxt[j]
    return cnt


@njit(**_JIT)
def _hash_pairs(x, d_coll):
    """Candidate point pairs closer than d_coll via a uniform grid of cell
    size d_coll. Returns (pi, pj, count); pairs are unordered-unique with
    i < j, unsorted."""
    n = x.shape[0]
    cx, cy, cz = _cell_coords(x, d_coll)
    minx, maxx = cx[0], cx[0]
    miny, maxy = cy[0], cy[0]
    minz, maxz = cz[0], cz[0]
    for i in range(1, n):
        minx = min(minx, cx[i])
        maxx = max(maxx, cx[i])
        miny = min(miny, cy[i])
        maxy = max(maxy, cy[i])
        minz = min(minz, cz[i])
        maxz = max(maxz, cz[i])
    gx = maxx - minx + 1
    gy = maxy - miny + 1
    gz = maxz - minz + 1
    dense = gx * gy * gz <= _MAX_DENSE_CELLS

    cap = 64 + 8 * n
    while True:
        pi = np.empty(cap, np.int64)
        pj = np.empty(cap, np.int64)
        if dense:
            cnt = _pairs_dense_into(x, d_coll, cx, cy, cz, gx, gy, gz,
                                    minx, miny, minz, pi, pj)
        else:
            cnt = _pairs_sorted_into(x, d_coll, cx, cy, cz, pi, pj)
        if cnt <= cap:
            return pi, pj, cnt
        cap = 2 * cnt


@njit(**_JIT)
def collide_inplace(x, v, d_coll, e, mu, ground, rest_thresh,
                    ppi, ppj, ppn, ppv, pp_start,
                    gnode, gvpre, gflag, g_start):
    """Impulse collision resolution, in place.

    Point-point pairs are applied sequentially in (i, j) order: approaching
    pairs get an equal-and-opposite impulse that flips the normal relative
    velocity by -e and scales the tangential relative velocity by (1 - mu).
    Nodes at or below the ground moving downward bounce and are clamped onto
    the plane; impacts slower than ``rest_thresh`` get no restitution
    (resting contact, recorded via gflag = 0 so the reverse pass stays
    exact). Events are recorded into the provided buffers from pp_start /
    g_start while capacity lasts; the needed end offsets are always returned
    so callers can grow buffers and retry.
    """
    n = x.shape[0]
    pp_cnt = 0
    g_cnt = 0
    pp_cap = ppi.shape[0]
    g_cap = gnode.shape[0]

    if d_coll > 0.0 and n >= 2:
        pi, pj, cnt = _hash_pairs(x, d_coll)
        if cnt > 1:
            pk = np.empty(cnt, np.int64)
            for t in range(cnt):
                pk[t] = pi[t] * n + pj[t]
            porder = np.argsort(pk)
        else:
            porder = np.arange(cnt)
        for t in range(cnt):
            p = porder[t]
            i = pi[p]
            j = pj[p]
            dx = x[i, 0] - x[j, 0]
            dy = x[i, 1] - x[j, 1]
            dz = x[i, 2] - x[j, 2]
            L = math.sqrt(dx * dx + dy * dy + dz * dz)
            if L < 1e-12:
                continue  # coincident points: no defined normal
            nx = dx / L
            ny = dy / L
            nz = dz / L
            rvx = v[i, 0] - v[j, 0]
            rvy = v[i, 1] - v[j, 1]
            rvz = v[i, 2] - v[j, 2]
            vn = rvx * nx + rvy * ny + rvz * nz
            if vn >= 0.0:
                continue  # separating
            w = pp_start + pp_cnt
            if w < pp_cap:
                ppi[w] = i
                ppj[w] = j
                ppn[w, 0] = nx
                ppn[w, 1] = ny
                ppn[w, 2] = nz
                ppv[w, 0] = rvx
                ppv[w, 1] = rvy
                ppv[w, 2] = rvz
            pp_cnt += 1
            tx = rvx - vn * nx
            ty = rvy - vn * ny
            tz = rvz - vn * nz
            cn = 0.5 * (1.0 + e) * vn
            cm = 0.5 * mu
            dvx = cn * nx + cm * tx
            dvy = cn * ny + cm * ty
            dvz = cn * nz + cm * tz
            v[i, 0] -= dvx
            v[i, 1] -= dvy
            v[i, 2] -= dvz
            v[j, 0] += dvx
            v[j, 1] += dvy
            v[j, 2] += dvz

    for i in range(n):
        if x[i, 2] <= ground and v[i, 2] < 0.0:
            flag = 1.0 if -v[i, 2] > rest_thresh else 0.0
            w = g_start + g_cnt
            if w < g_cap:
                gnode[w] = i
                gvpre[w, 0] = v[i, 0]
                gvpre[w, 1] = v[i, 1]
                gvpre[w, 2] = v[i, 2]
                gflag[w] = flag
            g_cnt += 1
            v[i, 0] *= 1.0 - mu
            v[i, 1] *= 1.0 - mu
            v[i, 2] = -flag * e * v[i, 2]
            x[i, 2] = ground
    return pp_cnt, g_cnt, pp_start + pp_cnt, g_start + g_cnt


@njit(**_JIT)
def _substep(x, v, F, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
             gamma, delta, node_mass, gx, gy, gz, h,
             d_coll, e, mu, ground,
             ppi, ppj, ppn, ppv, pp_start, gnode, gvpre, gflag, g_start):
    n = x.shape[0]
    rest_thresh = 3.0 * h * math.sqrt(gx * gx + gy * gy + gz * gz)
    forces_into(F, x, v, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                gamma, node_mass, gx, gy, gz)
    for i in range(n):
        v[i, 0] = delta * (v[i, 0] + h * F[i, 0] / node_mass)
        v[i, 1] = delta * (v[i, 1] + h * F[i, 1] / node_mass)
        v[i, 2] = delta * (v[i, 2] + h * F[i, 2] / node_mass)
    _, _, pp_end, g_end = collide_inplace(
        x, v, d_coll, e, mu, ground, rest_thresh,
        ppi, ppj, ppn, ppv, pp_start, gnode, gvpre, gflag, g_start
    )
    for i in range(n):
        x[i, 0] += h * v[i, 0]
        x[i, 1] += h * v[i, 1]
        x[i, 2] += h * v[i, 2]
    return pp_end, g_end


@njit(**_JIT)
def _all_finite(x, v):
    for i in range(x.shape[0]):
        for c in range(3):
            if not (math.isfinite(x[i, c]) and math.isfinite(v[i, c])):
                return False
    return True


@njit(**_JIT)
def run_frame(x, v, si, sj, rest, stiff, aci, ani, arest, ak, ctrl0, ctrl1,
              substeps, gamma, delta, node_mass, gx, gy, gz, h,
              d_coll, e, mu, ground):
    """Advance one frame (``substeps`` substeps) in place, interpolating the
    control positions from ctrl0 to ctrl1. Returns -1, or the substep index at
    which a non-finite value appeared (state is left at the last finite one).
    """
    n = x.shape[0]
    nc = ctrl0.shape[0]
    F = np.empty((n, 3), np.float64)
    ctrl = np.empty((nc, 3), np.float64)
    xp = np.empty((n, 3), np.float64)
    vp = np.empty((n, 3), np.float64)
    dpi = np.empty(0, np.int64)
    dpn = np.empty((0, 3), np.float64)
    dpf = np.empty(0, np.float64)
    for s in range(substeps):
        xp[:] = x
        vp[:] = v
        a = (s + 1) / substeps
        for c_ in range(nc):
            ctrl[c_, 0] = ctrl0[c_, 0] + a * (ctrl1[c_, 0] - ctrl0[c_, 0])
            ctrl[c_, 1] = ctrl0[c_, 1] + a * (ctrl1[c_, 1] - ctrl0[c_, 1])
            ctrl[c_, 2] = ctrl0[c_, 2] + a * (ctrl1[c_, 2] - ctrl0[c_, 2])
        _substep(x, v, F, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                 gamma, delta, node_mass, gx, gy, gz, h,
                 d_coll, e, mu, ground,
                 dpi, dpi, dpn, dpn, 0, dpi, dpn, dpf, 0)
        if not _all_finite(x, v):
            x[:] = xp
            v[:] = vp
            return s
    return -1


@njit(**_JIT)
def run_frame_record(x, v, si, sj, rest, stiff, aci, ani, arest, ak,
                     ctrl0, ctrl1, substeps,
                     gamma, delta, node_mass, gx, gy, gz, h,
                     d_coll, e, mu, ground,
                     tx, tv, tc, s0,
                     ppi, ppj, ppn, ppv, pp_off, gnode, gvpre, gflag, g_off):
    """run_frame with tape recording.

    Per substep s0+s, stores the pre-substep state into tx/tv, the control
    used into tc, and appends collision events; pp_off/g_off get the end
    offsets. Returns (status, info, pp_end, g_end) per the package protocol.
    """
    n = x.shape[0]
    nc = ctrl0.shape[0]
    F = np.empty((n, 3), np.float64)
    ctrl = np.empty((nc, 3), np.float64)
    pp_start = pp_off[s0]
    g_start = g_off[s0]
    pp_cap = ppi.shape[0]
    g_cap = gnode.shape[0]
    for s in range(substeps):
        g = s0 + s
        tx[g] = x
        tv[g] = v
        a = (s + 1) / substeps
        for c_ in range(nc):
            ctrl[c_, 0] = ctrl0[c_, 0] + a * (ctrl1[c_, 0] - ctrl0[c_, 0])
            ctrl[c_, 1] = ctrl0[c_, 1] + a * (ctrl1[c_, 1] - ctrl0[c_, 1])
            ctrl[c_, 2] = ctrl0[c_, 2] + a * (ctrl1[c_, 2] - ctrl0[c_, 2])
            tc[g, c_, 0] = ctrl[c_, 0]
            tc[g, c_, 1] = ctrl[c_, 1]
            tc[g, c_, 2] = ctrl[c_, 2]
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
        if not _all_finite(x, v):
            x[:] = tx[g]
            v[:] = tv[g]
            return 1, s, pp_start, g_start
    return 0, -1, pp_start, g_start


@njit(**_JIT)
def backward_frame(xbar, vbar, dlogk, dscal,
                   tx, tv, tc, s_lo, s_hi,
                   ppi, ppj, ppn, ppv, pp_off, gnode, gvpre, gflag, g_off,
                   si, sj, rest, stiff, aci, ani, arest, ak,
                   gamma, delta, node_mass, e, mu, gx, gy, gz, h):
    """Reverse one frame's substeps, transforming (xbar, vbar) from adjoints
    of the frame-end state into adjoints of the frame-start state.

    Accumulates into dlogk (per-spring, log-stiffness space) and
    dscal = [d_gamma, d_delta, d_e, d_mu]. Collision activations and the
    recorded normals/relative velocities are taken from the tape (branch-
    frozen surrogate); impulse magnitudes are differentiated through.
    """
    n = xbar.shape[0]
    F = np.empty((n, 3), np.float64)
    for s in range(s_hi - 1, s_lo - 1, -1):
        x0 = tx[s]
        v0 = tv[s]
        ctrl = tc[s]

        # x2 = x1 + h * v2
        for i in range(n):
            vbar[i, 0] += h * xbar[i, 0]
            vbar[i, 1] += h * xbar[i, 1]
            vbar[i, 2] += h * xbar[i, 2]

        # ground impulses (reverse order; independent per node)
        for w in range(g_off[s + 1] - 1, g_off[s] - 1, -1):
            nd = gnode[w]
            fl = gflag[w]  # 0 for resting contact: no restitution was applied
            dscal[3] -= gvpre[w, 0] * vbar[nd, 0] + gvpre[w, 1] * vbar[nd, 1]
            dscal[2] -= fl * gvpre[w, 2] * vbar[nd, 2]
            vbar[nd, 0] *= 1.0 - mu
            vbar[nd, 1] *= 1.0 - mu
            vbar[nd, 2] *= -fl * e
            xbar[nd, 2] = 0.0  # position was clamped to the plane

        # point-point impulses (reverse application order)
        for w in range(pp_off[s + 1] - 1, pp_off[s] - 1, -1):
            i = ppi[w]
            j = ppj[w]
            nx = ppn[w, 0]
            ny = ppn[w, 1]
            nz = ppn[w, 2]
            rvx = ppv[w, 0]
            rvy = ppv[w, 1]
            rvz = ppv[w, 2]
            Wx = vbar[j, 0] - vbar[i, 0]
            Wy = vbar[j, 1] - vbar[i, 1]
            Wz = vbar[j, 2] - vbar[i, 2]
            vn = rvx * nx + rvy * ny + rvz * nz
            Wn = Wx * nx + Wy * ny + Wz * nz
            tx_ = rvx - vn * nx
            ty_ = rvy - vn * ny
            tz_ = rvz - vn * nz
            dscal[2] += 0.5 * vn * Wn
            dscal[3] += 0.5 * (Wx * tx_ + Wy * ty_ + Wz * tz_)
            mwx = 0.5 * (1.0 + e) * Wn * nx + 0.5 * mu * (Wx - Wn * nx)
            mwy = 0.5 * (1.0 + e) * Wn * ny + 0.5 * mu * (Wy - Wn * ny)
            mwz = 0.5 * (1.0 + e) * Wn * nz + 0.5 * mu * (Wz - Wn * nz)
            vbar[i, 0] += mwx
            vbar[i, 1] += mwy
            vbar[i, 2] += mwz
            vbar[j, 0] -= mwx
            vbar[j, 1] -= mwy
            vbar[j, 2] -= mwz

        # v1 = delta * (v0 + h * F(x0, v0) / m)
        forces_into(F, x0, v0, si, sj, rest, stiff, aci, ani, arest, ak, ctrl,
                    gamma, node_mass, gx, gy, gz)
        hm = h / node_mass
        for i in range(n):
            dscal[1] += (
                vbar[i, 0] * (v0[i, 0] + hm * F[i, 0])
                + vbar[i, 1] * (v0[i, 1] + hm * F[i, 1])
                + vbar[i, 2] * (v0[i, 2] + hm * F[i, 2])
            )
            f0 = delta * hm * vbar[i, 0]
            f1 = delta * hm * vbar[i, 1]
            f2 = delta * hm * vbar[i, 2]
            vbar[i, 0] *= delta
            vbar[i, 1] *= delta
            vbar[i, 2] *= delta
            F[i, 0] = f0  # F reused as the force adjoint below
            F[i, 1] = f1
            F[i, 2] = f2

        for e_ in range(si.shape[0]):
            i = si[e_]
            j = sj[e_]
            Wx = F[i, 0] - F[j, 0]
            Wy = F[i, 1] - F[j, 1]
            Wz = F[i, 2] - F[j, 2]
            dx = x0[j, 0] - x0[i, 0]
            dy = x0[j, 1] - x0[i, 1]
            dz = x0[j, 2] - x0[i, 2]
            L = math.sqrt(dx * dx + dy * dy + dz * dz)
            if L > 1e-9:
                ux = dx / L
                uy = dy / L
                uz = dz / L
                uW = ux * Wx + uy * Wy + uz * Wz
                dlogk[e_] += stiff[e_] * (L - rest[e_]) * uW
                ca = stiff[e_] * (1.0 - rest[e_] / L)
                cb = stiff[e_] * rest[e_] / L * uW
                jwx = ca * Wx + cb * ux
                jwy = ca * Wy + cb * uy
                jwz = ca * Wz + cb * uz
                xbar[j, 0] += jwx
                xbar[j, 1] += jwy
                xbar[j, 2] += jwz
                xbar[i, 0] -= jwx
                xbar[i, 1] -= jwy
                xbar[i, 2] -= jwz
            dscal[0] -= (
                (v0[i, 0] - v0[j, 0]) * Wx
                + (v0[i, 1] - v0[j, 1]) * Wy
                + (v0[i, 2] - v0[j, 2]) * Wz
            )
            vbar[i, 0] -= gamma * Wx
            vbar[i, 1] -= gamma * Wy
            vbar[i, 2] -= gamma * Wz
            vbar[j, 0] += gamma * Wx
            vbar[j, 1] += gamma * Wy
            vbar[j, 2] += gamma * Wz

        for a in range(aci.shape[0]):
            c_ = aci[a]
            nd = ani[a]
            dx = ctrl[c_, 0] - x0[nd, 0]
            dy = ctrl[c_, 1] - x0[nd, 1]
            dz = ctrl[c_, 2] - x0[nd, 2]
            L = math.sqrt(dx * dx + dy * dy + dz * dz)
            if L > 1e-9:
                ux = dx / L
                uy = dy / L
                uz = dz / L
                uW = ux * F[nd, 0] + uy * F[nd, 1] + uz * F[nd, 2]
                ca = ak[a] * (1.0 - arest[a] / L)
                cb = ak[a] * arest[a] / L * uW
                xbar[nd, 0] -= ca * F[nd, 0] + cb * ux
                xbar[nd, 1] -= ca * F[nd, 1] + cb * uy
                xbar[nd, 2] -= ca * F[nd, 2] + cb * uz
