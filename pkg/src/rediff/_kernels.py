"""Compiled inner loops: coefficient fields, region geometry, path simulation.

Everything here works on plain arrays so it can be cached by numba and run
without the GIL.  The Python-facing wrappers live in ``environment`` and
``sde``.
"""
import numpy as np
from numba import njit

from .rng import TAG_CELL, TAG_OFFSET, combine, derive, normal_pair, polar_pair, uniform

# environment families
DET = 0
BUMP = 1
DIVFREE = 2
GRAD = 3
AUX = 4

# deterministic profiles
CONST = 0
WAVE = 1
STEP = 2

# fenv layout
F_R = 0
F_R0 = 1
F_AMAT = 2
F_ADRIFT = 3
F_ASTREAM = 4
F_APOT = 5
F_LAM = 6
F_VEC = 7  # ell[d] then v[d]

# region kinds
SLAB = 0
BOX = 1
BALL = 2
FREE = 3

# face labels
FRONT = 0
BACK = 1
LATERAL = 2
TIMEOUT = 3
BOUNDARY = 4

# mark counter blocks
_C_DIR = 0
_C_RAD = 20
_C_S = 24
_C_SSCALE = 90
_C_MDIR = 100
_C_MRAD = 120
_C_A = 124
_C_ASCALE = 190
_C_PHI = 200


@njit(cache=True, nogil=True, inline="always")
def bump(rho2):
    """psi(r) = (1 - r^2)^3 inside the unit ball; returns (psi, (1-r^2)^2)."""
    if rho2 >= 1.0:
        return 0.0, 0.0
    w = 1.0 - rho2
    return w * w * w, w * w


@njit(cache=True, nogil=True)
def marks_size(d):
    return d + d * d + d + d * d + 1


@njit(cache=True, nogil=True)
def cell_key(env_key, cell):
    k = env_key
    for c in cell:
        k = combine(k, c)
    return combine(k, TAG_CELL)


@njit(cache=True, nogil=True)
def global_offset(env_key, d, R, out):
    okey = derive(env_key, 0, TAG_OFFSET)
    for k in range(d):
        out[k] = R * uniform(okey, k)


@njit(cache=True, nogil=True)
def cell_center(offset, cell, R, out):
    for k in range(offset.shape[0]):
        out[k] = offset[k] + (cell[k] + 0.5) * R


@njit(cache=True, nogil=True)
def gen_marks(ckey, center, d, fenv, family, out):
    """Marks of one lattice cell as a pure function of its key.

    Layout of ``out``: jittered point [d], symmetric matrix S [d*d],
    drift vector m [d], skew matrix A [d*d], scalar potential mark [1].
    """
    out[:] = 0.0
    r0 = fenv[F_R0]
    # jittered point, uniform in the ball of radius r0 around the center
    nrm = 0.0
    for k in range(d):
        g, _ = normal_pair(ckey, _C_DIR // 2 + k)
        out[k] = g
        nrm += g * g
    nrm = np.sqrt(nrm)
    rad = r0 * uniform(ckey, _C_RAD) ** (1.0 / d)
    for k in range(d):
        out[k] = center[k] + (rad * out[k] / nrm if nrm > 0.0 else 0.0)
    o = d
    if family == BUMP:
        cap = fenv[F_AMAT]
        if cap > 0.0:
            fro = 0.0
            c = 0
            for i in range(d):
                for j in range(i, d):
                    g = 2.0 * uniform(ckey, _C_S + c) - 1.0
                    c += 1
                    out[o + i * d + j] = g
                    out[o + j * d + i] = g
                    fro += g * g if i == j else 2.0 * g * g
            fro = np.sqrt(fro)
            s = cap * uniform(ckey, _C_SSCALE) / fro if fro > 0.0 else 0.0
            for i in range(d * d):
                out[o + i] *= s
        o += d * d
        cap = fenv[F_ADRIFT]
        if cap > 0.0:
            nrm = 0.0
            for k in range(d):
                g, _ = normal_pair(ckey, _C_MDIR // 2 + k)
                out[o + k] = g
                nrm += g * g
            nrm = np.sqrt(nrm)
            rad = cap * uniform(ckey, _C_MRAD) ** (1.0 / d)
            for k in range(d):
                out[o + k] = rad * out[o + k] / nrm if nrm > 0.0 else 0.0
    elif family == DIVFREE:
        o += d * d + d
        cap = fenv[F_ASTREAM]
        if cap > 0.0 and d > 1:
            fro = 0.0
            c = 0
            for i in range(d):
                for j in range(i + 1, d):
                    g = 2.0 * uniform(ckey, _C_A + c) - 1.0
                    c += 1
                    out[o + i * d + j] = g
                    out[o + j * d + i] = -g
                    fro += 2.0 * g * g
            fro = np.sqrt(fro)
            s = cap * uniform(ckey, _C_ASCALE) / fro if fro > 0.0 else 0.0
            for i in range(d * d):
                out[o + i] *= s
    elif family == GRAD:
        o += d * d + d + d * d
        out[o] = fenv[F_APOT] * (2.0 * uniform(ckey, _C_PHI) - 1.0)


@njit(cache=True, nogil=True, inline="always")
def bump_contrib(family, d, fenv, mk, x, da, db):
    """Add one cell's bump contribution at ``x``.

    generic bump: da += psi*S, db += psi*m
    divergence-free: db += A^T grad(psi)   (row divergence of psi*A)
    gradient: db += phi_mark*grad(psi); returns the potential contribution.
    Returns (psi, potential contribution).
    """
    r0 = fenv[F_R0]
    rho2 = 0.0
    for k in range(d):
        y = (x[k] - mk[k]) / r0
        rho2 += y * y
    psi, w2 = bump(rho2)
    if psi == 0.0:
        return 0.0, 0.0
    if family == BUMP:
        o = d
        for i in range(d):
            for j in range(d):
                da[i, j] += psi * mk[o + i * d + j]
        o += d * d
        for k in range(d):
            db[k] += psi * mk[o + k]
        return psi, 0.0
    # gradient of psi((x - p)/r0) with respect to x
    if family == DIVFREE:
        o = d + d * d + d
        for j in range(d):
            acc = 0.0
            for k in range(d):
                gk = -6.0 * w2 * ((x[k] - mk[k]) / r0) / r0
                acc += mk[o + k * d + j] * gk
            db[j] += acc
        return psi, 0.0
    if family == GRAD:
        m = mk[d + d * d + d + d * d]
        for k in range(d):
            gk = -6.0 * w2 * ((x[k] - mk[k]) / r0) / r0
            db[k] += m * gk
        return psi, m * psi
    return psi, 0.0


@njit(cache=True, nogil=True, inline="always")
def cholesky_into(a, out):
    """Lower Cholesky factor; returns -1 on success or the failing pivot index."""
    d = a.shape[0]
    for i in range(d):
        for j in range(d):
            out[i, j] = 0.0
    for j in range(d):
        s = a[j, j]
        for k in range(j):
            s -= out[j, k] * out[j, k]
        if not (s > 0.0):
            return j
        out[j, j] = np.sqrt(s)
        for i in range(j + 1, d):
            s = a[i, j]
            for k in range(j):
                s -= out[i, k] * out[j, k]
            out[i, j] = s / out[j, j]
    return -1


@njit(cache=True, nogil=True, inline="always")
def det_coeffs(ienv, fenv, amat, x, a, b):
    d = ienv[1]
    prof = ienv[2]
    R = fenv[F_R]
    for i in range(d):
        for j in range(d):
            a[i, j] = amat[i, j]
    for k in range(d):
        vk = fenv[F_VEC + d + k]
        if prof == WAVE:
            b[k] = vk + fenv[F_ADRIFT] * np.sin(2.0 * np.pi * x[k] / R)
        elif prof == STEP:
            b[k] = vk if x[0] < 0.0 else -vk
        else:
            b[k] = vk


@njit(cache=True, nogil=True, inline="always")
def field_at(ienv, fenv, amat, asig, offset, env_key, x, cur_cell, have, mk,
             cell, center, a, sig, b, da, db):
    """Coefficients at ``x`` for the analytic families (fast single-cell path).

    ``cur_cell``/``have``/``mk`` cache the marks of the last visited cell.
    Returns (have flag, potential value for the gradient family).
    """
    family = ienv[0]
    d = ienv[1]
    if family == DET:
        det_coeffs(ienv, fenv, amat, x, a, b)
        for i in range(d):
            for j in range(d):
                sig[i, j] = asig[i, j]
        return have, 0.0
    R = fenv[F_R]
    same = have
    for k in range(d):
        cell[k] = np.int64(np.floor((x[k] - offset[k]) / R))
        if same and cell[k] != cur_cell[k]:
            same = False
    if not same:
        for k in range(d):
            cur_cell[k] = cell[k]
        cell_center(offset, cell, R, center)
        gen_marks(cell_key(env_key, cell), center, d, fenv, family, mk)
        have = True
    da[:, :] = 0.0
    db[:] = 0.0
    psi, pot = bump_contrib(family, d, fenv, mk, x, da, db)
    lam = fenv[F_LAM]
    for i in range(d):
        for j in range(d):
            a[i, j] = (1.0 if i == j else 0.0) + da[i, j]
    if family == BUMP:
        for k in range(d):
            b[k] = fenv[F_VEC + d + k] + db[k]
        if psi > 0.0:
            cholesky_into(a, sig)
        else:
            for i in range(d):
                for j in range(d):
                    sig[i, j] = 1.0 if i == j else 0.0
        return have, 0.0
    for i in range(d):
        for j in range(d):
            sig[i, j] = 1.0 if i == j else 0.0
    if family == DIVFREE:
        for k in range(d):
            b[k] = fenv[F_VEC + d + k] + db[k]
        return have, 0.0
    # gradient family
    lx = 0.0
    for k in range(d):
        b[k] = lam * fenv[F_VEC + k] + db[k]
        lx += fenv[F_VEC + k] * x[k]
    return have, pot + lam * lx


@njit(cache=True, nogil=True, inline="always")
def aux_cell(aux_lo, aux_h, aux_shape, x):
    d = aux_lo.shape[0]
    lin = 0
    for k in range(d):
        i = np.int64(np.floor((x[k] - aux_lo[k]) / aux_h))
        if i < 0:
            i = 0
        elif i >= aux_shape[k]:
            i = aux_shape[k] - 1
        lin = lin * aux_shape[k] + i
    return lin


# ---------------------------------------------------------------- regions


@njit(cache=True, nogil=True)
def n_faces(rkind, d, rfp):
    if rkind == SLAB:
        return 3 if (rfp[d + 2] > 0.0 and d > 1) else 2
    if rkind == BOX:
        return 2 * d
    if rkind == BALL:
        return 1
    return 0


@njit(cache=True, nogil=True, inline="always")
def face_dist(rkind, d, rfp, f, x, nrm):
    """Signed distance of ``x`` to face ``f`` (positive inside) and its outward normal."""
    if rkind == SLAB:
        s = 0.0
        for k in range(d):
            s += x[k] * rfp[k]
        if f == 0:
            for k in range(d):
                nrm[k] = rfp[k]
            return rfp[d + 1] - s, FRONT
        if f == 1:
            for k in range(d):
                nrm[k] = -rfp[k]
            return s + rfp[d], BACK
        pn = 0.0
        for k in range(d):
            nrm[k] = x[k] - s * rfp[k]
            pn += nrm[k] * nrm[k]
        pn = np.sqrt(pn)
        if pn > 0.0:
            for k in range(d):
                nrm[k] /= pn
        else:
            for k in range(d):
                nrm[k] = 0.0
        return rfp[d + 2] - pn, LATERAL
    if rkind == BOX:
        k = f // 2
        for j in range(d):
            nrm[j] = 0.0
        if f % 2 == 0:
            nrm[k] = -1.0
            return x[k] - rfp[k], BOUNDARY
        nrm[k] = 1.0
        return rfp[d + k] - x[k], BOUNDARY
    # ball
    r = 0.0
    for k in range(d):
        nrm[k] = x[k] - rfp[k]
        r += nrm[k] * nrm[k]
    r = np.sqrt(r)
    if r > 0.0:
        for k in range(d):
            nrm[k] /= r
    return rfp[d] - r, BOUNDARY


@njit(cache=True, nogil=True)
def place_on_face(rkind, d, rfp, f, x, nrm):
    """Project ``x`` onto face ``f`` and clamp it into the closed region."""
    dist, _ = face_dist(rkind, d, rfp, f, x, nrm)
    if rkind == SLAB:
        if f == 0:
            for k in range(d):
                x[k] += dist * rfp[k]
        elif f == 1:
            for k in range(d):
                x[k] -= dist * rfp[k]
        s = 0.0
        for k in range(d):
            s += x[k] * rfp[k]
        lat = rfp[d + 2]
        if lat > 0.0 and d > 1:
            pn = 0.0
            for k in range(d):
                pn += (x[k] - s * rfp[k]) ** 2
            pn = np.sqrt(pn)
            if f == 2 or pn > lat:
                sc = lat / pn
                for k in range(d):
                    p = x[k] - s * rfp[k]
                    x[k] = s * rfp[k] + sc * p
        if f == 2:
            lo = -rfp[d]
            hi = rfp[d + 1]
            sc = s
            if sc < lo:
                sc = lo
            elif sc > hi:
                sc = hi
            if sc != s:
                for k in range(d):
                    x[k] += (sc - s) * rfp[k]
        return
    if rkind == BOX:
        for k in range(d):
            if x[k] < rfp[k]:
                x[k] = rfp[k]
            elif x[k] > rfp[d + k]:
                x[k] = rfp[d + k]
        k = f // 2
        x[k] = rfp[k] if f % 2 == 0 else rfp[d + k]
        return
    if rkind == BALL:
        r = 0.0
        for k in range(d):
            r += (x[k] - rfp[k]) ** 2
        r = np.sqrt(r)
        if r > 0.0:
            for k in range(d):
                x[k] = rfp[k] + rfp[d] * (x[k] - rfp[k]) / r


@njit(cache=True, nogil=True)
def region_inside(rkind, d, rfp, x, nrm):
    nf = n_faces(rkind, d, rfp)
    for f in range(nf):
        dist, _ = face_dist(rkind, d, rfp, f, x, nrm)
        if not (dist > 0.0):
            return False
    return True


# ---------------------------------------------------------------- paths


@njit(cache=True, nogil=True)
def run_paths(ienv, fenv, amat, asig, env_seeds, path_seeds,
              aux_lo, aux_h, aux_shape, aux_a, aux_sig, aux_b, aux_map,
              rkind, rfp, x0, dt, tmax, bridge, noiseless,
              occ_on, occ_lo, occ_h, occ_shape, occ_time, occ_a, occ_b, occ_visits,
              snap_steps, snap_pos, snap_z, zbridge,
              out_pos, out_time, out_face, out_steps, out_fallback):
    family = ienv[0]
    d = ienv[1]
    npaths = env_seeds.shape[0]
    nsnap = snap_steps.shape[0]
    nf = n_faces(rkind, d, rfp)
    nmax = np.int64(np.ceil(tmax / dt - 1e-9))
    if nmax < 1:
        nmax = 1
    last_dt = tmax - (nmax - 1) * dt
    sq_dt = np.sqrt(dt)
    sq_last = np.sqrt(last_dt)
    track_sup = nsnap > 0 or zbridge
    x = np.empty(d)
    xn = np.empty(d)
    xi = np.empty(d)
    nrm = np.empty(d)
    nrm2 = np.empty(d)
    a = np.empty((d, d))
    sig = np.empty((d, d))
    b = np.empty(d)
    offset = np.zeros(d)
    cur_cell = np.zeros(d, dtype=np.int64)
    cell = np.zeros(d, dtype=np.int64)
    center = np.empty(d)
    mk = np.zeros(marks_size(d))
    dists = np.empty(max(nf, 1))
    dprev = np.empty(max(nf, 1))
    prof = ienv[2]
    R = fenv[F_R]
    r0 = fenv[F_R0]
    wave_amp = fenv[F_ADRIFT]
    wave_k = 2.0 * np.pi / R if R > 0.0 else 0.0
    so = d
    mo = d + d * d
    ao = mo + d
    po = ao + d * d
    # drift away from all bumps and the constant parts of a, sigma
    b0 = np.empty(d)
    for k in range(d):
        b0[k] = fenv[F_VEC + k] * fenv[F_LAM] if family == GRAD else fenv[F_VEC + d + k]
    occ_strides = np.ones(d, dtype=np.int64)
    for k in range(d - 2, -1, -1):
        occ_strides[k] = occ_strides[k + 1] * occ_shape[k + 1]

    for p in range(npaths):
        env_key = env_seeds[p]
        pkey = path_seeds[p]
        ukey = combine(pkey, 1)
        ucount = 0
        if family != DET and family != AUX:
            global_offset(env_key, d, fenv[F_R], offset)
        have = False
        in_bump = False
        if family != AUX:
            for i in range(d):
                b[i] = b0[i]
                for j in range(d):
                    if family == DET:
                        a[i, j] = amat[i, j]
                        sig[i, j] = asig[i, j]
                    else:
                        a[i, j] = 1.0 if i == j else 0.0
                        sig[i, j] = a[i, j]
        for k in range(d):
            x[k] = x0[k]
        for f in range(nf):
            dprev[f], _ = face_dist(rkind, d, rfp, f, x, nrm)
        zmax = 0.0
        npair = 0
        spare = 0.0
        has_spare = False
        fallback = 0
        face = TIMEOUT
        t_exit = tmax
        si = 0
        step = 0
        while True:
            while si < nsnap and snap_steps[si] <= step:
                for k in range(d):
                    snap_pos[p, si, k] = x[k]
                snap_z[p, si] = zmax
                si += 1
            if step >= nmax:
                break
            h = dt if step < nmax - 1 else last_dt
            if family == AUX:
                c = aux_cell(aux_lo, aux_h, aux_shape, x)
                cm = aux_map[c]
                if cm != c:
                    fallback += 1
                for i in range(d):
                    b[i] = aux_b[cm, i]
                    for j in range(d):
                        a[i, j] = aux_a[cm, i, j]
                        sig[i, j] = aux_sig[cm, i, j]
            else:
                # field evaluation written out in place: calls with many array
                # arguments cost far more than the arithmetic in this loop
                if family == DET:
                    if prof == WAVE:
                        for k in range(d):
                            b[k] = fenv[F_VEC + d + k] + wave_amp * np.sin(wave_k * x[k])
                    elif prof == STEP:
                        for k in range(d):
                            b[k] = fenv[F_VEC + d + k] if x[0] < 0.0 else -fenv[F_VEC + d + k]
                else:
                    same = have
                    for k in range(d):
                        ck = np.int64(np.floor((x[k] - offset[k]) / R))
                        if ck != cur_cell[k]:
                            same = False
                        cell[k] = ck
                    if not same:
                        for k in range(d):
                            cur_cell[k] = cell[k]
                            center[k] = offset[k] + (cell[k] + 0.5) * R
                        gen_marks(cell_key(env_key, cell), center, d, fenv, family, mk)
                        have = True
                    rho2 = 0.0
                    for k in range(d):
                        yk = (x[k] - mk[k]) / r0
                        rho2 += yk * yk
                    if rho2 >= 1.0:
                        if in_bump:
                            for i in range(d):
                                b[i] = b0[i]
                                for j in range(d):
                                    a[i, j] = 1.0 if i == j else 0.0
                                    sig[i, j] = a[i, j]
                            in_bump = False
                    else:
                        in_bump = True
                        w = 1.0 - rho2
                        psi = w * w * w
                        w2 = w * w
                        if family == BUMP:
                            for i in range(d):
                                b[i] = b0[i] + psi * mk[mo + i]
                                for j in range(d):
                                    a[i, j] = (1.0 if i == j else 0.0) + psi * mk[so + i * d + j]
                            cholesky_into(a, sig)
                        elif family == DIVFREE:
                            for j in range(d):
                                acc = 0.0
                                for k in range(d):
                                    acc += mk[ao + k * d + j] * (-6.0 * w2 * ((x[k] - mk[k]) / r0) / r0)
                                b[j] = b0[j] + acc
                        else:
                            for k in range(d):
                                b[k] = b0[k] + mk[po] * (-6.0 * w2 * ((x[k] - mk[k]) / r0) / r0)
            if occ_on:
                lin = 0
                ok = True
                for k in range(d):
                    i = np.int64(np.floor((x[k] - occ_lo[k]) / occ_h))
                    if i < 0 or i >= occ_shape[k]:
                        ok = False
                        break
                    lin += i * occ_strides[k]
                if ok:
                    occ_time[lin] += h
                    occ_visits[lin] += 1
                    for i in range(d):
                        occ_b[lin, i] += h * b[i]
                        for j in range(d):
                            occ_a[lin, i, j] += h * a[i, j]
            # Euler-Maruyama step
            if noiseless:
                for k in range(d):
                    xn[k] = x[k] + b[k] * h
            else:
                for k in range(d):
                    if has_spare:
                        xi[k] = spare
                        has_spare = False
                    else:
                        g1, g2, npair = polar_pair(pkey, npair)
                        xi[k] = g1
                        spare = g2
                        has_spare = True
                sq = sq_dt if step < nmax - 1 else sq_last
                for i in range(d):
                    acc = 0.0
                    for j in range(i + 1):
                        acc += sig[i, j] * xi[j]
                    xn[i] = x[i] + b[i] * h + sq * acc
            # running supremum of |X - X0|
            rr = 0.0
            if track_sup:
                for k in range(d):
                    rr += (xn[k] - x0[k]) ** 2
                rr = np.sqrt(rr)
                if rr > zmax:
                    zmax = rr
            if zbridge and not noiseless and rr > 0.0:
                r1 = 0.0
                q = 0.0
                for k in range(d):
                    nrm2[k] = (xn[k] - x0[k]) / rr
                    r1 += nrm2[k] * (x[k] - x0[k])
                for i in range(d):
                    for j in range(d):
                        q += nrm2[i] * a[i, j] * nrm2[j]
                u = 1.0 - uniform(ukey, ucount)
                ucount += 1
                mx = 0.5 * (r1 + rr + np.sqrt((rr - r1) ** 2 - 2.0 * q * h * np.log(u)))
                if mx > zmax:
                    zmax = mx
            t_next = step * dt + h
            step += 1
            # exit detection; distances of the pre-step point are carried over
            # from the previous step in dprev
            if nf > 0:
                if rkind == SLAB:
                    sl = 0.0
                    for k in range(d):
                        sl += xn[k] * rfp[k]
                    dists[0] = rfp[d + 1] - sl
                    dists[1] = sl + rfp[d]
                    if nf == 3:
                        pn = 0.0
                        for k in range(d):
                            pn += (xn[k] - sl * rfp[k]) ** 2
                        dists[2] = rfp[d + 2] - np.sqrt(pn)
                elif rkind == BOX:
                    for k in range(d):
                        dists[2 * k] = xn[k] - rfp[k]
                        dists[2 * k + 1] = rfp[d + k] - xn[k]
                else:
                    rr2 = 0.0
                    for k in range(d):
                        rr2 += (xn[k] - rfp[k]) ** 2
                    dists[0] = rfp[d] - np.sqrt(rr2)
                fw = -1
                worst = 0.0
                for f in range(nf):
                    if dists[f] <= 0.0 and (fw < 0 or dists[f] < worst):
                        worst = dists[f]
                        fw = f
                if fw < 0 and bridge and not noiseless:
                    for f in range(nf):
                        # q = n.a.n for the outward normal n of face f at x
                        if rkind == BOX:
                            q = a[f // 2, f // 2]
                        else:
                            if rkind == SLAB and f < 2:
                                for k in range(d):
                                    nrm[k] = rfp[k]
                            elif rkind == SLAB:
                                sl = 0.0
                                for k in range(d):
                                    sl += x[k] * rfp[k]
                                for k in range(d):
                                    nrm[k] = x[k] - sl * rfp[k]
                            else:
                                for k in range(d):
                                    nrm[k] = x[k] - rfp[k]
                            q = 0.0
                            nn = 0.0
                            for i in range(d):
                                nn += nrm[i] * nrm[i]
                                for j in range(d):
                                    q += nrm[i] * a[i, j] * nrm[j]
                            if not (nn > 0.0):
                                continue
                            q /= nn
                        # beyond ex = 40 the crossing probability is below the 2^-53 uniform grid
                        pd = dprev[f] * dists[f]
                        if pd < 20.0 * q * h:
                            ex = 2.0 * pd / (q * h)
                            u = uniform(ukey, ucount)
                            ucount += 1
                            if u < np.exp(-ex):
                                fw = f
                                break
                if fw >= 0:
                    place_on_face(rkind, d, rfp, fw, xn, nrm)
                    _, face = face_dist(rkind, d, rfp, fw, xn, nrm)
                    t_exit = t_next
                    for k in range(d):
                        x[k] = xn[k]
                    break
                for f in range(nf):
                    dprev[f] = dists[f]
            for k in range(d):
                x[k] = xn[k]
        while si < nsnap:
            for k in range(d):
                snap_pos[p, si, k] = x[k]
            snap_z[p, si] = zmax
            si += 1
        for k in range(d):
            out_pos[p, k] = x[k]
        out_time[p] = t_exit
        out_face[p] = face
        out_steps[p] = step
        out_fallback[p] = fallback


@njit(cache=True, nogil=True)
def field_many(ienv, fenv, amat, asig, env_key, pts, out_a, out_b, out_pot):
    """Fast-path coefficients at many points of one realization."""
    family = ienv[0]
    d = ienv[1]
    offset = np.zeros(d)
    if family != DET:
        global_offset(env_key, d, fenv[F_R], offset)
    cur_cell = np.zeros(d, dtype=np.int64)
    cell = np.zeros(d, dtype=np.int64)
    center = np.empty(d)
    mk = np.zeros(marks_size(d))
    a = np.empty((d, d))
    sig = np.empty((d, d))
    b = np.empty(d)
    da = np.empty((d, d))
    db = np.empty(d)
    have = False
    for p in range(pts.shape[0]):
        have, pot = field_at(ienv, fenv, amat, asig, offset, env_key, pts[p],
                             cur_cell, have, mk, cell, center, a, sig, b, da, db)
        out_a[p] = a
        out_b[p] = b
        out_pot[p] = pot
