# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False, language_level=3
"""Compiled hot kernels: fused turn-model/radar filtering and the unrolled
episode gradient.

These mirror the pure-numpy reference paths in ukf.py / adaptive.py /
autodiff.py for the standard 5-state turn model with a 2-component
range/bearing radar. Numerics agree with the reference to floating-point
roundoff (summation orders differ); each backend is bit-deterministic on
its own.

Dimensions NX/NZ/NPTS are fixed; the policy dimensions (d_h, d_p) are
runtime values.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport atan2, ceil, cos, exp, fabs, log, sin, sqrt
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemv, dger

cnp.import_array()

cdef enum:
    NX = 5
    NZ = 2
    NPTS = 11
    NPAR = 23

cdef double M_PI = 3.141592653589793238462643383279502884

cdef double CT_SMALL = 1e-4
cdef double ORIGIN_EPS = 1e-9

# jitter ladder, relative to trace/n (see linalg.cholesky_laddered)
cdef double[4] LADDER
LADDER[0] = 0.0
LADDER[1] = 1e-9
LADDER[2] = 1e-6
LADDER[3] = 1e-3


# ---------------------------------------------------------------------------
# small dense helpers
# ---------------------------------------------------------------------------

cdef inline double wrap(double a) nogil:
    return a - 2.0 * M_PI * ceil((a - M_PI) / (2.0 * M_PI))


cdef int chol_lower(int n, double* a, double* l) nogil:
    """Lower Cholesky reading only the lower triangle of a. 0 on success."""
    cdef int i, j, k
    cdef double s
    for i in range(n * n):
        l[i] = 0.0
    for j in range(n):
        s = a[j * n + j]
        for k in range(j):
            s -= l[j * n + k] * l[j * n + k]
        if s <= 0.0 or s != s:
            return -1
        l[j * n + j] = sqrt(s)
        for i in range(j + 1, n):
            s = a[i * n + j]
            for k in range(j):
                s -= l[i * n + k] * l[j * n + k]
            l[i * n + j] = s / l[j * n + j]
    return 0


cdef int chol_ladder(int n, double* m, double* l, double* jitter_used) nogil:
    """Laddered factorization of m (+ jit*I); matches the reference rungs."""
    cdef double scale = 0.0
    cdef double jit
    cdef int i, r, ok
    cdef double work[NX * NX]
    for i in range(n):
        scale += m[i * n + i]
    scale /= n
    if not (scale > 0.0) or scale != scale:
        scale = 1.0
    for r in range(4):
        jit = LADDER[r] * scale
        for i in range(n * n):
            work[i] = m[i]
        for i in range(n):
            work[i * n + i] += jit
        ok = chol_lower(n, work, l)
        if ok == 0:
            jitter_used[0] = jit
            return 0
    return -1


cdef void tri_solve_lower(int n, double* l, double* b, int m) nogil:
    """Solve L X = B in place; B is n x m row-major."""
    cdef int i, j, k
    for j in range(m):
        for i in range(n):
            for k in range(i):
                b[j + i * m] -= l[i * n + k] * b[j + k * m]
            b[j + i * m] /= l[i * n + i]


cdef void tri_solve_upper_t(int n, double* l, double* b, int m) nogil:
    """Solve L^T X = B in place (L lower, so L^T upper); B is n x m."""
    cdef int i, j, k
    for j in range(m):
        for i in range(n - 1, -1, -1):
            for k in range(i + 1, n):
                b[j + i * m] -= l[k * n + i] * b[j + k * m]
            b[j + i * m] /= l[i * n + i]


cdef void chol_backward(int n, double* l, double* gl, double* gm) nogil:
    """Adjoint of the lower Cholesky, folded onto the read lower triangle."""
    cdef double phi[NX * NX]
    cdef double y[NX * NX]
    cdef double gfull[NX * NX]
    cdef int i, j, k
    # phi = tril(L^T gL), diagonal halved
    for i in range(n):
        for j in range(n):
            if i < j:
                phi[i * n + j] = 0.0
                continue
            phi[i * n + j] = 0.0
            for k in range(n):
                phi[i * n + j] += l[k * n + i] * gl[k * n + j]
            if i == j:
                phi[i * n + j] *= 0.5
    # y = L^-T phi
    for i in range(n * n):
        y[i] = phi[i]
    tri_solve_upper_t(n, l, y, n)
    # gfull = (L^-T y^T)^T
    for i in range(n):
        for j in range(n):
            gfull[i * n + j] = y[j * n + i]
    tri_solve_upper_t(n, l, gfull, n)
    # gm = fold_lower(gfull^T): strict lower gets g_ij + g_ji, diag as-is
    for i in range(n):
        for j in range(n):
            gm[i * n + j] = 0.0
    for i in range(n):
        gm[i * n + i] = gfull[i * n + i]
        for j in range(i):
            gm[i * n + j] = gfull[j * n + i] + gfull[i * n + j]
    # note: gfull above is stored transposed (we solved with B = y^T), so
    # gm entries combine both orientations; the FD suite pins this down.


cdef void solve_spd2(double* lzz, double* b, int m) nogil:
    """Solve S X = B with S = lzz lzz^T (2x2), B 2 x m, in place."""
    tri_solve_lower(NZ, lzz, b, m)
    tri_solve_upper_t(NZ, lzz, b, m)


# ---------------------------------------------------------------------------
# model kernels (mirrors dynamics.py)
# ---------------------------------------------------------------------------

cdef void ct_coeffs(double w, double dt, double* a, double* b, double* c, double* s) nogil:
    cdef double x = w * dt
    cdef double x2 = x * x
    c[0] = cos(x)
    s[0] = sin(x)
    if fabs(x) < CT_SMALL:
        a[0] = dt * (1.0 - x2 / 6.0 * (1.0 - x2 / 20.0))
        b[0] = dt * x * (0.5 - x2 / 24.0)
    else:
        a[0] = s[0] / w
        b[0] = (1.0 - c[0]) / w


cdef void ct_coeff_grads(double w, double dt, double* da, double* db) nogil:
    cdef double x = w * dt
    cdef double x2 = x * x
    cdef double c = cos(x)
    cdef double s = sin(x)
    if fabs(x) < CT_SMALL:
        da[0] = dt * dt * x * (-1.0 / 3.0 + x2 / 30.0)
        db[0] = dt * dt * (0.5 - x2 / 8.0)
    else:
        da[0] = (dt * c * w - s) / (w * w)
        db[0] = (dt * s * w - (1.0 - c)) / (w * w)


cdef void ct_propagate(double* pts, double dt, double* out) nogil:
    """pts, out: 5 x NPTS row-major."""
    cdef int i
    cdef double a, b, c, s, px, vx, py, vy, w
    for i in range(NPTS):
        px = pts[0 * NPTS + i]
        vx = pts[1 * NPTS + i]
        py = pts[2 * NPTS + i]
        vy = pts[3 * NPTS + i]
        w = pts[4 * NPTS + i]
        ct_coeffs(w, dt, &a, &b, &c, &s)
        out[0 * NPTS + i] = px + a * vx - b * vy
        out[1 * NPTS + i] = c * vx - s * vy
        out[2 * NPTS + i] = py + b * vx + a * vy
        out[3 * NPTS + i] = s * vx + c * vy
        out[4 * NPTS + i] = w


cdef void ct_backward(double* pts, double dt, double* g, double* gpts) nogil:
    cdef int i
    cdef double a, b, c, s, da, db, vx, vy, w
    cdef double g0, g1, g2, g3, g4
    for i in range(NPTS):
        vx = pts[1 * NPTS + i]
        vy = pts[3 * NPTS + i]
        w = pts[4 * NPTS + i]
        ct_coeffs(w, dt, &a, &b, &c, &s)
        ct_coeff_grads(w, dt, &da, &db)
        g0 = g[0 * NPTS + i]
        g1 = g[1 * NPTS + i]
        g2 = g[2 * NPTS + i]
        g3 = g[3 * NPTS + i]
        g4 = g[4 * NPTS + i]
        gpts[0 * NPTS + i] = g0
        gpts[1 * NPTS + i] = a * g0 + c * g1 + b * g2 + s * g3
        gpts[2 * NPTS + i] = g2
        gpts[3 * NPTS + i] = -b * g0 - s * g1 + a * g2 + c * g3
        gpts[4 * NPTS + i] = (
            (da * vx - db * vy) * g0
            + dt * (-s * vx - c * vy) * g1
            + (db * vx + da * vy) * g2
            + dt * (c * vx - s * vy) * g3
            + g4
        )


cdef int radar_h(double* pts, double* out) nogil:
    """out: 2 x NPTS rows [range; bearing]; -1 if a point sits at the origin."""
    cdef int i
    cdef double px, py, r
    for i in range(NPTS):
        px = pts[0 * NPTS + i]
        py = pts[2 * NPTS + i]
        r = sqrt(px * px + py * py)
        if r < ORIGIN_EPS:
            return -1
        out[0 * NPTS + i] = r
        out[1 * NPTS + i] = wrap(atan2(py, px))
    return 0


cdef void radar_backward(double* pts, double* g, double* gpts) nogil:
    """Accumulates into gpts (5 x NPTS)."""
    cdef int i
    cdef double px, py, r2, r, gr, gth
    for i in range(NPTS):
        px = pts[0 * NPTS + i]
        py = pts[2 * NPTS + i]
        r2 = px * px + py * py
        r = sqrt(r2)
        gr = g[0 * NPTS + i]
        gth = g[1 * NPTS + i]
        gpts[0 * NPTS + i] += (px / r) * gr + (-py / r2) * gth
        gpts[2 * NPTS + i] += (py / r) * gr + (px / r2) * gth


cdef void meas_mean_c(double* zp, double* w, int wrapped, double* zhat) nogil:
    cdef int i
    cdef double acc = 0.0, ssum = 0.0, csum = 0.0
    for i in range(NPTS):
        acc += w[i] * zp[0 * NPTS + i]
    zhat[0] = acc
    if wrapped:
        for i in range(NPTS):
            csum += w[i] * cos(zp[1 * NPTS + i])
            ssum += w[i] * sin(zp[1 * NPTS + i])
        zhat[1] = atan2(ssum, csum)
    else:
        acc = 0.0
        for i in range(NPTS):
            acc += w[i] * zp[1 * NPTS + i]
        zhat[1] = acc


cdef void meas_mean_backward(double* zp, double* w, int wrapped, double* g,
                             double* gzp, double* gw) nogil:
    """Accumulates into gzp (2 x NPTS) and gw (NPTS)."""
    cdef int i
    cdef double ssum = 0.0, csum = 0.0, norm, gs, gc, ct, st
    for i in range(NPTS):
        gw[i] += zp[0 * NPTS + i] * g[0]
        gzp[0 * NPTS + i] += w[i] * g[0]
    if wrapped:
        if g[1] != 0.0:
            for i in range(NPTS):
                csum += w[i] * cos(zp[1 * NPTS + i])
                ssum += w[i] * sin(zp[1 * NPTS + i])
            norm = ssum * ssum + csum * csum
            gs = (csum / norm) * g[1]
            gc = (-ssum / norm) * g[1]
            for i in range(NPTS):
                ct = cos(zp[1 * NPTS + i])
                st = sin(zp[1 * NPTS + i])
                gw[i] += st * gs + ct * gc
                gzp[1 * NPTS + i] += w[i] * (ct * gs - st * gc)
    else:
        for i in range(NPTS):
            gw[i] += zp[1 * NPTS + i] * g[1]
            gzp[1 * NPTS + i] += w[i] * g[1]


# ---------------------------------------------------------------------------
# fused UT update with explicit weights (shared by all step kernels)
# ---------------------------------------------------------------------------

cdef int ut_update(double* prop, double* zp, double* wm, double* wc,
                   double* q, double* r, double* z, int wrapped,
                   double* xm, double* dev, double* pm, double* zhat,
                   double* dz, double* pzz, double* lzz, double* gain,
                   double* nu, double* xpost, double* ppost, double* pxz) nogil:
    """Recombination + measurement update. Returns -1 on a non-SPD innovation
    covariance."""
    cdef int i, j, k
    cdef double acc
    for i in range(NX):
        acc = 0.0
        for k in range(NPTS):
            acc += prop[i * NPTS + k] * wm[k]
        xm[i] = acc
    for i in range(NX):
        for k in range(NPTS):
            dev[i * NPTS + k] = prop[i * NPTS + k] - xm[i]
    for i in range(NX):
        for j in range(NX):
            acc = 0.0
            for k in range(NPTS):
                acc += dev[i * NPTS + k] * wc[k] * dev[j * NPTS + k]
            pm[i * NX + j] = acc + q[i * NX + j]
    meas_mean_c(zp, wm, wrapped, zhat)
    for k in range(NPTS):
        dz[0 * NPTS + k] = zp[0 * NPTS + k] - zhat[0]
        if wrapped:
            dz[1 * NPTS + k] = wrap(zp[1 * NPTS + k] - zhat[1])
        else:
            dz[1 * NPTS + k] = zp[1 * NPTS + k] - zhat[1]
    for i in range(NZ):
        for j in range(NZ):
            acc = 0.0
            for k in range(NPTS):
                acc += dz[i * NPTS + k] * wc[k] * dz[j * NPTS + k]
            pzz[i * NZ + j] = acc + r[i * NZ + j]
    for i in range(NX):
        for j in range(NZ):
            acc = 0.0
            for k in range(NPTS):
                acc += dev[i * NPTS + k] * wc[k] * dz[j * NPTS + k]
            pxz[i * NZ + j] = acc
    if chol_lower(NZ, pzz, lzz) != 0:
        return -1
    # gain^T = S^-1 Pxz^T
    cdef double kt[NZ * NX]
    for i in range(NZ):
        for j in range(NX):
            kt[i * NX + j] = pxz[j * NZ + i]
    solve_spd2(lzz, kt, NX)
    for i in range(NX):
        for j in range(NZ):
            gain[i * NZ + j] = kt[j * NX + i]
    nu[0] = z[0] - zhat[0]
    nu[1] = z[1] - zhat[1]
    if wrapped:
        nu[1] = wrap(nu[1])
    for i in range(NX):
        xpost[i] = xm[i] + gain[i * NZ + 0] * nu[0] + gain[i * NZ + 1] * nu[1]
    # ppost = sym(pm - K S K^T)
    cdef double ks[NX * NZ]
    cdef double kskt[NX * NX]
    for i in range(NX):
        for j in range(NZ):
            ks[i * NZ + j] = gain[i * NZ + 0] * pzz[0 * NZ + j] + gain[i * NZ + 1] * pzz[1 * NZ + j]
    for i in range(NX):
        for j in range(NX):
            kskt[i * NX + j] = ks[i * NZ + 0] * gain[j * NZ + 0] + ks[i * NZ + 1] * gain[j * NZ + 1]
    for i in range(NX):
        for j in range(NX):
            ppost[i * NX + j] = pm[i * NX + j] - kskt[i * NX + j]
    for i in range(NX):
        for j in range(i + 1, NX):
            acc = 0.5 * (ppost[i * NX + j] + ppost[j * NX + i])
            ppost[i * NX + j] = acc
            ppost[j * NX + i] = acc
    return 0


cdef int sigma_points(double* x, double* p, double spread, double* pts,
                      double* lfactor, double* jitter_used) nogil:
    """pts: 5 x NPTS; lfactor receives chol(spread * P + jit I)."""
    cdef double m[NX * NX]
    cdef int i, j
    for i in range(NX * NX):
        m[i] = spread * p[i]
    if chol_ladder(NX, m, lfactor, jitter_used) != 0:
        return -1
    for i in range(NX):
        pts[i * NPTS + 0] = x[i]
        for j in range(NX):
            pts[i * NPTS + 1 + j] = x[i] + lfactor[i * NX + j]
            pts[i * NPTS + 6 + j] = x[i] - lfactor[i * NX + j]
    return 0


# ---------------------------------------------------------------------------
# policy forward (mirrors policy.py)
# ---------------------------------------------------------------------------

cdef struct PolicyPtrs:
    int dh
    int dp
    double* w_in
    double* b_in
    double* g1
    double* c1
    double* w_u
    double* u_u
    double* b_u
    double* w_r
    double* u_r
    double* b_r
    double* w_h
    double* u_h
    double* b_h
    double* w_proj
    double* b_proj
    double* g2
    double* c2
    double* w_hm
    double* b_hm
    double* w_hc
    double* b_hc
    double* w_dec
    double* b_dec


cdef inline double sigmoid(double x) nogil:
    return 1.0 / (1.0 + exp(-x))


cdef inline double tanh_fast(double x) nogil:
    # exp-based form; branch keeps the exponential from overflowing.
    cdef double t
    if x >= 0.0:
        t = exp(-2.0 * x)
        return (1.0 - t) / (1.0 + t)
    t = exp(2.0 * x)
    return (t - 1.0) / (t + 1.0)


cdef void layernorm_fw(int d, double* a, double* gain, double* bias,
                       double* y, double* xn, double* inv) nogil:
    cdef double mu = 0.0, var = 0.0, t
    cdef int i
    for i in range(d):
        mu += a[i]
    mu /= d
    for i in range(d):
        t = a[i] - mu
        var += t * t
    var /= d
    inv[0] = 1.0 / sqrt(var + 1e-5)
    for i in range(d):
        xn[i] = (a[i] - mu) * inv[0]
        y[i] = gain[i] * xn[i] + bias[i]


cdef void layernorm_bw(int d, double* gy, double* xn, double inv, double* gain,
                       double* ga, double* ggain, double* gbias) nogil:
    """ga is written; ggain/gbias are accumulated."""
    cdef double m1 = 0.0, m2 = 0.0
    cdef double gxn_i
    cdef int i
    for i in range(d):
        ggain[i] += gy[i] * xn[i]
        gbias[i] += gy[i]
    for i in range(d):
        gxn_i = gy[i] * gain[i]
        m1 += gxn_i
        m2 += gxn_i * xn[i]
    m1 /= d
    m2 /= d
    for i in range(d):
        ga[i] = inv * (gy[i] * gain[i] - m1 - xn[i] * m2)


cdef double BLAS_ONE = 1.0
cdef double BLAS_ZERO = 0.0
cdef int BLAS_INC = 1


cdef void matvec(int m, int n, double* a, double* x, double* out, int accumulate) nogil:
    """out (m) [+]= a (m x n, row-major) @ x.

    Row-major a is the column-major transpose, hence the 'T'. BLAS carries
    the 32x32 recurrent products; its summation order is fixed per build,
    which keeps runs deterministic.
    """
    cdef double beta = 1.0 if accumulate else 0.0
    dgemv("T", &n, &m, &BLAS_ONE, a, &n, x, &BLAS_INC, &beta, out, &BLAS_INC)


cdef void matvec_t(int m, int n, double* a, double* x, double* out, int accumulate) nogil:
    """out (n) [+]= a^T @ x, with a (m x n) row-major."""
    cdef double beta = 1.0 if accumulate else 0.0
    dgemv("N", &n, &m, &BLAS_ONE, a, &n, x, &BLAS_INC, &beta, out, &BLAS_INC)


cdef void outer_acc(int m, int n, double* u, double* v, double* out) nogil:
    """out (m x n, row-major) += u v^T (rank-1 update)."""
    dger(&n, &m, &BLAS_ONE, v, &BLAS_INC, u, &BLAS_INC, out, &n)


cdef void softmax_c(int n, double* logits, double* out) nogil:
    cdef double mx = logits[0]
    cdef double s = 0.0
    cdef int i
    for i in range(1, n):
        if logits[i] > mx:
            mx = logits[i]
    for i in range(n):
        out[i] = exp(logits[i] - mx)
        s += out[i]
    for i in range(n):
        out[i] /= s


cdef void softmax_bw(int n, double* y, double* gy, double* glogits) nogil:
    cdef double dot = 0.0
    cdef int i
    for i in range(n):
        dot += y[i] * gy[i]
    for i in range(n):
        glogits[i] = y[i] * (gy[i] - dot)


cdef void policy_fw(PolicyPtrs* pp, double* nu_t, double* h_prev,
                    double* a_in, double* xn1, double* inv1, double* y1, double* e,
                    double* u, double* rg, double* hc, double* h,
                    double* ap, double* xn2, double* inv2, double* y2, double* c,
                    double* wm, double* wc, double* dec, double* scratch) nogil:
    """scratch must hold >= max(dh, NPTS) doubles."""
    cdef int dh = pp.dh
    cdef int dp = pp.dp
    cdef int i
    # encode
    for i in range(dh):
        a_in[i] = pp.b_in[i]
    matvec(dh, NZ, pp.w_in, nu_t, a_in, 1)
    layernorm_fw(dh, a_in, pp.g1, pp.c1, y1, xn1, inv1)
    for i in range(dh):
        e[i] = y1[i] if y1[i] > 0.0 else 0.0
    # gates
    for i in range(dh):
        u[i] = pp.b_u[i]
    matvec(dh, dh, pp.w_u, e, u, 1)
    matvec(dh, dh, pp.u_u, h_prev, u, 1)
    for i in range(dh):
        u[i] = sigmoid(u[i])
    for i in range(dh):
        rg[i] = pp.b_r[i]
    matvec(dh, dh, pp.w_r, e, rg, 1)
    matvec(dh, dh, pp.u_r, h_prev, rg, 1)
    for i in range(dh):
        rg[i] = sigmoid(rg[i])
    for i in range(dh):
        scratch[i] = rg[i] * h_prev[i]
    for i in range(dh):
        hc[i] = pp.b_h[i]
    matvec(dh, dh, pp.w_h, e, hc, 1)
    matvec(dh, dh, pp.u_h, scratch, hc, 1)
    for i in range(dh):
        hc[i] = tanh_fast(hc[i])
    for i in range(dh):
        h[i] = h_prev[i] + u[i] * (hc[i] - h_prev[i])
    # projection
    for i in range(dp):
        ap[i] = pp.b_proj[i]
    matvec(dp, dh, pp.w_proj, h, ap, 1)
    layernorm_fw(dp, ap, pp.g2, pp.c2, y2, xn2, inv2)
    for i in range(dp):
        c[i] = y2[i] if y2[i] > 0.0 else 0.0
    # heads
    for i in range(NPTS):
        scratch[i] = pp.b_hm[i]
    matvec(NPTS, dp, pp.w_hm, c, scratch, 1)
    softmax_c(NPTS, scratch, wm)
    for i in range(NPTS):
        scratch[i] = pp.b_hc[i]
    matvec(NPTS, dp, pp.w_hc, c, scratch, 1)
    softmax_c(NPTS, scratch, wc)
    dec[0] = pp.b_dec[0]
    dec[1] = pp.b_dec[1]
    matvec(NZ, dp, pp.w_dec, c, dec, 1)


cdef int fill_policy(PolicyPtrs* pp, list tensors, int dh, int dp) except -1:
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat
    cdef double* ptrs[NPAR]
    cdef int i
    if len(tensors) != NPAR:
        raise ValueError("expected %d parameter tensors" % NPAR)
    for i in range(NPAR):
        arr = np.ascontiguousarray(tensors[i], dtype=np.float64)
        tensors[i] = arr  # keep alive
        ptrs[i] = <double*> cnp.PyArray_DATA(arr)
    pp.dh = dh
    pp.dp = dp
    pp.w_in = ptrs[0]; pp.b_in = ptrs[1]; pp.g1 = ptrs[2]; pp.c1 = ptrs[3]
    pp.w_u = ptrs[4]; pp.u_u = ptrs[5]; pp.b_u = ptrs[6]
    pp.w_r = ptrs[7]; pp.u_r = ptrs[8]; pp.b_r = ptrs[9]
    pp.w_h = ptrs[10]; pp.u_h = ptrs[11]; pp.b_h = ptrs[12]
    pp.w_proj = ptrs[13]; pp.b_proj = ptrs[14]; pp.g2 = ptrs[15]; pp.c2 = ptrs[16]
    pp.w_hm = ptrs[17]; pp.b_hm = ptrs[18]; pp.w_hc = ptrs[19]; pp.b_hc = ptrs[20]
    pp.w_dec = ptrs[21]; pp.b_dec = ptrs[22]
    return 0


# ---------------------------------------------------------------------------
# Python-visible single steps (used by the overhead benchmark and tests)
# ---------------------------------------------------------------------------

def ukf_step(double[::1] x, double[:, ::1] p, double[::1] wm, double[::1] wc,
             double spread, double[:, ::1] q, double[:, ::1] r,
             double[::1] z, double dt, int wrapped):
    """One fused predict+update. Returns (x', P', nu) or raises ValueError."""
    cdef double pts[NX * NPTS]
    cdef double prop[NX * NPTS]
    cdef double zp[NZ * NPTS]
    cdef double lf[NX * NX]
    cdef double jit
    cdef double xm[NX]
    cdef double dev[NX * NPTS]
    cdef double pm[NX * NX]
    cdef double zhat[NZ]
    cdef double dz[NZ * NPTS]
    cdef double pzz[NZ * NZ]
    cdef double lzz[NZ * NZ]
    cdef double gain[NX * NZ]
    cdef double nu[NZ]
    cdef double pxz[NX * NZ]
    xq = np.empty(NX)
    pq = np.empty((NX, NX))
    nuq = np.empty(NZ)
    cdef double[::1] xo = xq
    cdef double[:, ::1] po = pq
    cdef double[::1] nuo = nuq
    if sigma_points(&x[0], &p[0, 0], spread, pts, lf, &jit) != 0:
        raise ValueError("covariance collapse")
    ct_propagate(pts, dt, prop)
    if radar_h(prop, zp) != 0:
        raise ValueError("sigma point at sensor origin")
    if ut_update(prop, zp, &wm[0], &wc[0], &q[0, 0], &r[0, 0], &z[0], wrapped,
                 xm, dev, pm, zhat, dz, pzz, lzz, gain, nu, &xo[0], &po[0, 0], pxz) != 0:
        raise ValueError("innovation covariance not SPD")
    nuo[0] = nu[0]
    nuo[1] = nu[1]
    return xq, pq, nuq


def ma_step(double[::1] x, double[:, ::1] p, double[::1] h_prev, double[::1] wm_prev,
            list params, int dh, int dp, double gamma,
            double[:, ::1] q, double[:, ::1] r, double[::1] z, double dt, int wrapped):
    """One fused adaptive step. Returns (x', P', h', wm, wc, nu, nu_proxy)."""
    cdef PolicyPtrs pp
    fill_policy(&pp, params, dh, dp)
    cdef double pts[NX * NPTS]
    cdef double prop[NX * NPTS]
    cdef double zp[NZ * NPTS]
    cdef double lf[NX * NX]
    cdef double jit
    cdef double zhat_prev[NZ]
    cdef double nu_t[NZ]
    cdef double xm[NX]
    cdef double dev[NX * NPTS]
    cdef double pm[NX * NX]
    cdef double zhat[NZ]
    cdef double dz[NZ * NPTS]
    cdef double pzz[NZ * NZ]
    cdef double lzz[NZ * NZ]
    cdef double gain[NX * NZ]
    cdef double nu[NZ]
    cdef double pxz[NX * NZ]
    buf = np.empty(10 * dh + 4 * dp + 2 * NPTS + NZ + dh)
    cdef double[::1] w = buf
    cdef double* a_in = &w[0]
    cdef double* xn1 = a_in + dh
    cdef double* y1 = xn1 + dh
    cdef double* e = y1 + dh
    cdef double* u = e + dh
    cdef double* rg = u + dh
    cdef double* hc = rg + dh
    cdef double* ap = hc + dh
    cdef double* xn2 = ap + dp
    cdef double* y2 = xn2 + dp
    cdef double* cc = y2 + dp
    cdef double* scratch = cc + dp
    cdef double inv1, inv2
    xq = np.empty(NX)
    pq = np.empty((NX, NX))
    hq = np.empty(dh)
    wmq = np.empty(NPTS)
    wcq = np.empty(NPTS)
    nuq = np.empty(NZ)
    ntq = np.empty(NZ)
    cdef double[::1] xo = xq
    cdef double[:, ::1] po = pq
    cdef double[::1] ho = hq
    cdef double[::1] wmo = wmq
    cdef double[::1] wco = wcq
    cdef double[::1] nuo = nuq
    cdef double[::1] nto = ntq
    if sigma_points(&x[0], &p[0, 0], gamma, pts, lf, &jit) != 0:
        raise ValueError("covariance collapse")
    ct_propagate(pts, dt, prop)
    if radar_h(prop, zp) != 0:
        raise ValueError("sigma point at sensor origin")
    meas_mean_c(zp, &wm_prev[0], wrapped, zhat_prev)
    nu_t[0] = z[0] - zhat_prev[0]
    nu_t[1] = z[1] - zhat_prev[1]
    if wrapped:
        nu_t[1] = wrap(nu_t[1])
    policy_fw(&pp, nu_t, &h_prev[0], a_in, xn1, &inv1, y1, e, u, rg, hc, &ho[0],
              ap, xn2, &inv2, y2, cc, &wmo[0], &wco[0], &nto[0], scratch)
    nto[0] = nu_t[0]
    nto[1] = nu_t[1]
    if ut_update(prop, zp, &wmo[0], &wco[0], &q[0, 0], &r[0, 0], &z[0], wrapped,
                 xm, dev, pm, zhat, dz, pzz, lzz, gain, nu, &xo[0], &po[0, 0], pxz) != 0:
        raise ValueError("innovation covariance not SPD")
    nuo[0] = nu[0]
    nuo[1] = nu[1]
    return xq, pq, hq, wmq, wcq, nuq, ntq


# ---------------------------------------------------------------------------
# episode runners
# ---------------------------------------------------------------------------

def run_ukf_episode(double[:, ::1] meas, double dt, double[::1] x0, double[:, ::1] p0,
                    double[::1] wm, double[::1] wc, double spread,
                    double[:, ::1] q, double[:, ::1] r, int wrapped):
    cdef int t_steps = meas.shape[0]
    means_q = np.empty((t_steps, NX))
    covs_q = np.empty((t_steps, NX, NX))
    innov_q = np.empty((t_steps, NZ))
    cdef double[:, ::1] means = means_q
    cdef double[:, :, ::1] covs = covs_q
    cdef double[:, ::1] innov = innov_q
    cdef double xcur[NX]
    cdef double pcur[NX * NX]
    cdef double pts[NX * NPTS]
    cdef double prop[NX * NPTS]
    cdef double zp[NZ * NPTS]
    cdef double lf[NX * NX]
    cdef double jit
    cdef double xm[NX]
    cdef double dev[NX * NPTS]
    cdef double pm[NX * NX]
    cdef double zhat[NZ]
    cdef double dz[NZ * NPTS]
    cdef double pzz[NZ * NZ]
    cdef double lzz[NZ * NZ]
    cdef double gain[NX * NZ]
    cdef double nu[NZ]
    cdef double pxz[NX * NZ]
    cdef double znow[NZ]
    cdef int k, i, j, fail = -1
    memcpy(xcur, &x0[0], NX * sizeof(double))
    memcpy(pcur, &p0[0, 0], NX * NX * sizeof(double))
    with nogil:
        for k in range(t_steps):
            znow[0] = meas[k, 0]
            znow[1] = meas[k, 1]
            if sigma_points(xcur, pcur, spread, pts, lf, &jit) != 0:
                fail = k
                break
            ct_propagate(pts, dt, prop)
            if radar_h(prop, zp) != 0:
                fail = k
                break
            if ut_update(prop, zp, &wm[0], &wc[0], &q[0, 0], &r[0, 0], znow, wrapped,
                         xm, dev, pm, zhat, dz, pzz, lzz, gain, nu, xcur, pcur, pxz) != 0:
                fail = k
                break
            for i in range(NX):
                means[k, i] = xcur[i]
                for j in range(NX):
                    covs[k, i, j] = pcur[i * NX + j]
            innov[k, 0] = nu[0]
            innov[k, 1] = nu[1]
    return means_q, covs_q, innov_q, fail


def run_adaptive_episode(double[:, ::1] meas, double dt, double[::1] x0,
                         double[:, ::1] p0, list params, double gamma,
                         double[:, ::1] q, double[:, ::1] r, int wrapped,
                         int want_wlog):
    cdef int t_steps = meas.shape[0]
    arr0 = np.ascontiguousarray(params[0])
    cdef int dh = arr0.shape[0]
    cdef int dp = np.ascontiguousarray(params[13]).shape[0]
    cdef PolicyPtrs pp
    fill_policy(&pp, params, dh, dp)

    means_q = np.empty((t_steps, NX))
    covs_q = np.empty((t_steps, NX, NX))
    innov_q = np.empty((t_steps, NZ))
    wlog_q = np.empty((t_steps, 2 * NPTS)) if want_wlog else np.empty((0, 0))
    cdef double[:, ::1] means = means_q
    cdef double[:, :, ::1] covs = covs_q
    cdef double[:, ::1] innov = innov_q
    cdef double[:, ::1] wlog = wlog_q

    hbuf_q = np.zeros(dh)
    hnext_q = np.zeros(dh)
    work_q = np.empty(10 * dh + 4 * dp + 2 * NPTS + NZ + dh)
    cdef double[::1] hbuf = hbuf_q
    cdef double[::1] hnext = hnext_q
    cdef double[::1] w = work_q
    cdef double* a_in = &w[0]
    cdef double* xn1 = a_in + dh
    cdef double* y1 = xn1 + dh
    cdef double* e = y1 + dh
    cdef double* u = e + dh
    cdef double* rg = u + dh
    cdef double* hc = rg + dh
    cdef double* ap = hc + dh
    cdef double* xn2 = ap + dp
    cdef double* y2 = xn2 + dp
    cdef double* cc = y2 + dp
    cdef double* scratch = cc + dp
    cdef double inv1, inv2

    cdef double xcur[NX]
    cdef double pcur[NX * NX]
    cdef double wm_prev[NPTS]
    cdef double wm_now[NPTS]
    cdef double wc_now[NPTS]
    cdef double dec[NZ]
    cdef double pts[NX * NPTS]
    cdef double prop[NX * NPTS]
    cdef double zp[NZ * NPTS]
    cdef double lf[NX * NX]
    cdef double jit
    cdef double zhat_prev[NZ]
    cdef double nu_t[NZ]
    cdef double xm[NX]
    cdef double dev[NX * NPTS]
    cdef double pm[NX * NX]
    cdef double zhat[NZ]
    cdef double dz[NZ * NPTS]
    cdef double pzz[NZ * NZ]
    cdef double lzz[NZ * NZ]
    cdef double gain[NX * NZ]
    cdef double nu[NZ]
    cdef double pxz[NX * NZ]
    cdef double znow[NZ]
    cdef int k, i, j, fail = -1
    cdef int bad

    memcpy(xcur, &x0[0], NX * sizeof(double))
    memcpy(pcur, &p0[0, 0], NX * NX * sizeof(double))
    for i in range(NPTS):
        wm_prev[i] = 1.0 / NPTS
    with nogil:
        for k in range(t_steps):
            znow[0] = meas[k, 0]
            znow[1] = meas[k, 1]
            if sigma_points(xcur, pcur, gamma, pts, lf, &jit) != 0:
                fail = k
                break
            ct_propagate(pts, dt, prop)
            if radar_h(prop, zp) != 0:
                fail = k
                break
            meas_mean_c(zp, wm_prev, wrapped, zhat_prev)
            nu_t[0] = znow[0] - zhat_prev[0]
            nu_t[1] = znow[1] - zhat_prev[1]
            if wrapped:
                nu_t[1] = wrap(nu_t[1])
            policy_fw(&pp, nu_t, &hbuf[0], a_in, xn1, &inv1, y1, e, u, rg, hc,
                      &hnext[0], ap, xn2, &inv2, y2, cc, wm_now, wc_now, dec, scratch)
            bad = 0
            for i in range(NPTS):
                if wm_now[i] != wm_now[i] or wc_now[i] != wc_now[i]:
                    bad = 1
            for i in range(dh):
                if hnext[i] != hnext[i]:
                    bad = 1
            if bad:
                fail = k
                break
            if ut_update(prop, zp, wm_now, wc_now, &q[0, 0], &r[0, 0], znow, wrapped,
                         xm, dev, pm, zhat, dz, pzz, lzz, gain, nu, xcur, pcur, pxz) != 0:
                fail = k
                break
            for i in range(dh):
                hbuf[i] = hnext[i]
            for i in range(NPTS):
                wm_prev[i] = wm_now[i]
            for i in range(NX):
                means[k, i] = xcur[i]
                for j in range(NX):
                    covs[k, i, j] = pcur[i * NX + j]
            innov[k, 0] = nu[0]
            innov[k, 1] = nu[1]
            if want_wlog:
                for i in range(NPTS):
                    wlog[k, i] = wm_now[i]
                    wlog[k, NPTS + i] = wc_now[i]
    return means_q, covs_q, innov_q, (wlog_q if want_wlog else None), fail


# ---------------------------------------------------------------------------
# unrolled episode gradient (training hot kernel)
# ---------------------------------------------------------------------------

def episode_gradient(double[:, ::1] meas, double[:, ::1] truth, double dt,
                     double[::1] x0, double[:, ::1] p0, list params,
                     double gamma, double[:, ::1] q, double[:, ::1] r,
                     int wrapped, double lam_aux, int truncate):
    """Full forward + hand-derived reverse pass. Returns
    (loss, [23 gradient arrays], means, fail_step)."""
    cdef int t_steps = meas.shape[0]
    arr0 = np.ascontiguousarray(params[0])
    cdef int dh = arr0.shape[0]
    cdef int dp = np.ascontiguousarray(params[13]).shape[0]
    cdef PolicyPtrs pp
    fill_policy(&pp, params, dh, dp)

    shapes = [np.asarray(arr_).shape for arr_ in params]
    grads = [np.zeros(shape_) for shape_ in shapes]
    cdef PolicyPtrs gp
    glist = list(grads)
    fill_policy(&gp, glist, dh, dp)

    means_q = np.empty((t_steps, NX))
    cdef double[:, ::1] means = means_q

    # per-step storage for the reverse pass
    S_l = np.empty((t_steps, NX, NX))
    S_pts = np.empty((t_steps, NX, NPTS))
    S_prop = np.empty((t_steps, NX, NPTS))
    S_zp = np.empty((t_steps, NZ, NPTS))
    S_wmprev = np.empty((t_steps, NPTS))
    S_nut = np.empty((t_steps, NZ))
    S_xn1 = np.empty((t_steps, dh))
    S_y1 = np.empty((t_steps, dh))
    S_inv1 = np.empty(t_steps)
    S_e = np.empty((t_steps, dh))
    S_u = np.empty((t_steps, dh))
    S_r = np.empty((t_steps, dh))
    S_hc = np.empty((t_steps, dh))
    S_h = np.empty((t_steps, dh))
    S_xn2 = np.empty((t_steps, dp))
    S_y2 = np.empty((t_steps, dp))
    S_inv2 = np.empty(t_steps)
    S_c = np.empty((t_steps, dp))
    S_wm = np.empty((t_steps, NPTS))
    S_wc = np.empty((t_steps, NPTS))
    S_dec = np.empty((t_steps, NZ))
    S_xm = np.empty((t_steps, NX))
    S_dev = np.empty((t_steps, NX, NPTS))
    S_zhat = np.empty((t_steps, NZ))
    S_dz = np.empty((t_steps, NZ, NPTS))
    S_pzz = np.empty((t_steps, NZ, NZ))
    S_lzz = np.empty((t_steps, NZ, NZ))
    S_gain = np.empty((t_steps, NX, NZ))
    S_nu = np.empty((t_steps, NZ))
    S_err = np.empty((t_steps, NX))
    S_daux = np.empty((t_steps, NZ))

    cdef double[:, :, ::1] v_l = S_l
    cdef double[:, :, ::1] v_pts = S_pts
    cdef double[:, :, ::1] v_prop = S_prop
    cdef double[:, :, ::1] v_zp = S_zp
    cdef double[:, ::1] v_wmprev = S_wmprev
    cdef double[:, ::1] v_nut = S_nut
    cdef double[:, ::1] v_xn1 = S_xn1
    cdef double[:, ::1] v_y1 = S_y1
    cdef double[::1] v_inv1 = S_inv1
    cdef double[:, ::1] v_e = S_e
    cdef double[:, ::1] v_u = S_u
    cdef double[:, ::1] v_r = S_r
    cdef double[:, ::1] v_hc = S_hc
    cdef double[:, ::1] v_h = S_h
    cdef double[:, ::1] v_xn2 = S_xn2
    cdef double[:, ::1] v_y2 = S_y2
    cdef double[::1] v_inv2 = S_inv2
    cdef double[:, ::1] v_c = S_c
    cdef double[:, ::1] v_wm = S_wm
    cdef double[:, ::1] v_wc = S_wc
    cdef double[:, ::1] v_dec = S_dec
    cdef double[:, ::1] v_xm = S_xm
    cdef double[:, :, ::1] v_dev = S_dev
    cdef double[:, ::1] v_zhat = S_zhat
    cdef double[:, :, ::1] v_dz = S_dz
    cdef double[:, :, ::1] v_pzz = S_pzz
    cdef double[:, :, ::1] v_lzz = S_lzz
    cdef double[:, :, ::1] v_gain = S_gain
    cdef double[:, ::1] v_nu = S_nu
    cdef double[:, ::1] v_err = S_err
    cdef double[:, ::1] v_daux = S_daux

    # forward working buffers
    work_q = np.empty(3 * dh + dp + max(dh, NPTS))
    cdef double[::1] wk = work_q
    cdef double* a_in = &wk[0]
    cdef double* ap_buf = a_in + dh
    cdef double* hprev_buf = ap_buf + dp
    cdef double* scratch = hprev_buf + dh
    # (scratch also reused in backward)

    cdef double xcur[NX]
    cdef double pcur[NX * NX]
    cdef double pm[NX * NX]
    cdef double znow[NZ]
    cdef double jit
    cdef double loss = 0.0
    cdef double track_l, aux_l, t
    cdef int k, i, j, m, fail = -1

    memcpy(xcur, &x0[0], NX * sizeof(double))
    memcpy(pcur, &p0[0, 0], NX * NX * sizeof(double))
    for i in range(NPTS):
        S_wmprev[0, i] = 1.0 / NPTS
    for i in range(dh):
        hprev_buf[i] = 0.0

    # ---------------- forward ----------------
    for k in range(t_steps):
        znow[0] = meas[k, 0]
        znow[1] = meas[k, 1]
        if sigma_points(xcur, pcur, gamma, &v_pts[k, 0, 0], &v_l[k, 0, 0], &jit) != 0:
            fail = k
            break
        ct_propagate(&v_pts[k, 0, 0], dt, &v_prop[k, 0, 0])
        if radar_h(&v_prop[k, 0, 0], &v_zp[k, 0, 0]) != 0:
            fail = k
            break
        meas_mean_c(&v_zp[k, 0, 0], &v_wmprev[k, 0], wrapped, &v_zhat[k, 0])  # reuse zhat slot briefly
        v_nut[k, 0] = znow[0] - v_zhat[k, 0]
        v_nut[k, 1] = znow[1] - v_zhat[k, 1]
        if wrapped:
            v_nut[k, 1] = wrap(v_nut[k, 1])
        policy_fw(&pp, &v_nut[k, 0], hprev_buf,
                  a_in, &v_xn1[k, 0], &v_inv1[k], &v_y1[k, 0], &v_e[k, 0],
                  &v_u[k, 0], &v_r[k, 0], &v_hc[k, 0], &v_h[k, 0],
                  ap_buf, &v_xn2[k, 0], &v_inv2[k], &v_y2[k, 0], &v_c[k, 0],
                  &v_wm[k, 0], &v_wc[k, 0], &v_dec[k, 0], scratch)
        for i in range(NPTS):
            if v_wm[k, i] != v_wm[k, i] or v_wc[k, i] != v_wc[k, i]:
                fail = k
        for i in range(dh):
            if v_h[k, i] != v_h[k, i]:
                fail = k
        if fail >= 0:
            break
        if ut_update(&v_prop[k, 0, 0], &v_zp[k, 0, 0], &v_wm[k, 0], &v_wc[k, 0],
                     &q[0, 0], &r[0, 0], znow, wrapped,
                     &v_xm[k, 0], &v_dev[k, 0, 0], pm, &v_zhat[k, 0], &v_dz[k, 0, 0],
                     &v_pzz[k, 0, 0], &v_lzz[k, 0, 0], &v_gain[k, 0, 0], &v_nu[k, 0],
                     xcur, pcur, scratch) != 0:
            fail = k
            break
        track_l = 0.0
        for i in range(NX):
            means[k, i] = xcur[i]
            v_err[k, i] = xcur[i] - truth[k + 1, i]
            track_l += v_err[k, i] * v_err[k, i]
        aux_l = 0.0
        for i in range(NZ):
            v_daux[k, i] = v_nut[k, i] - v_dec[k, i]
            aux_l += v_daux[k, i] * v_daux[k, i]
        loss += track_l + lam_aux * aux_l
        for i in range(dh):
            hprev_buf[i] = v_h[k, i]
        if k + 1 < t_steps:
            for i in range(NPTS):
                v_wmprev[k + 1, i] = v_wm[k, i]

    if fail >= 0:
        return 0.0, grads, means_q, fail

    # ---------------- backward ----------------
    gx_q = np.zeros(NX)
    gp_q = np.zeros((NX, NX))
    gh_q = np.zeros(dh)
    gwm_carry_q = np.zeros(NPTS)
    bwork_q = np.zeros(16 * dh + 8 * dp + 8 * NPTS + 64)
    cdef double[::1] gx = gx_q
    cdef double[:, ::1] gP = gp_q
    cdef double[::1] gh_carry = gh_q
    cdef double[::1] gwm_carry = gwm_carry_q
    cdef double[::1] bw = bwork_q

    cdef double gA[NX * NX]
    cdef double gPm[NX * NX]
    cdef double gK[NX * NZ]
    cdef double gS[NZ * NZ]
    cdef double gS_fold[NZ * NZ]
    cdef double gb2[NZ * NX]
    cdef double gPxz[NX * NZ]
    cdef double gnu[NZ]
    cdef double gzhat[NZ]
    cdef double gxm[NX]
    cdef double gdev[NX * NPTS]
    cdef double gdz[NZ * NPTS]
    cdef double gzp[NZ * NPTS]
    cdef double gprop[NX * NPTS]
    cdef double gpts[NX * NPTS]
    cdef double gwm_step[NPTS]
    cdef double gwc_step[NPTS]
    cdef double gdec[NZ]
    cdef double gnut[NZ]
    cdef double gl_mat[NX * NX]
    cdef double gm_mat[NX * NX]
    cdef double ks_t[NX * NZ]

    # policy backward scratch (views into bw)
    cdef double* glm = &bw[0]                  # NPTS
    cdef double* glc = glm + NPTS              # NPTS
    cdef double* gc_vec = glc + NPTS           # dp
    cdef double* gy2 = gc_vec + dp             # dp
    cdef double* gap = gy2 + dp                # dp
    cdef double* gh_total = gap + dp           # dh
    cdef double* gu_vec = gh_total + dh        # dh
    cdef double* ghc = gu_vec + dh             # dh
    cdef double* ghp = ghc + dh                # dh
    cdef double* gah = ghp + dh                # dh
    cdef double* grh = gah + dh                # dh
    cdef double* gr_vec = grh + dh             # dh
    cdef double* gar = gr_vec + dh             # dh
    cdef double* gau = gar + dh                # dh
    cdef double* ge = gau + dh                 # dh
    cdef double* gy1 = ge + dh                 # dh
    cdef double* ga_in = gy1 + dh              # dh
    cdef double* rh_buf = ga_in + dh           # dh
    cdef double* hprev_ptr

    cdef double acc

    for k in range(t_steps - 1, -1, -1):
        # --- loss contributions at step k
        for i in range(NX):
            gx[i] += 2.0 * v_err[k, i]
        gnut[0] = 2.0 * lam_aux * v_daux[k, 0]
        gnut[1] = 2.0 * lam_aux * v_daux[k, 1]
        gdec[0] = -2.0 * lam_aux * v_daux[k, 0]
        gdec[1] = -2.0 * lam_aux * v_daux[k, 1]

        # --- posterior covariance: P' = sym(pm - K S K^T)
        for i in range(NX):
            for j in range(NX):
                gA[i * NX + j] = 0.5 * (gP[i, j] + gP[j, i])
        memcpy(gPm, gA, NX * NX * sizeof(double))
        # gK_cov = -2 gA K S ; gS_cov = -K^T gA K
        for i in range(NX):
            for j in range(NZ):
                acc = 0.0
                for m in range(NX):
                    acc += gA[i * NX + m] * v_gain[k, m, j]
                ks_t[i * NZ + j] = acc          # gA @ K
        for i in range(NX):
            for j in range(NZ):
                gK[i * NZ + j] = -2.0 * (ks_t[i * NZ + 0] * v_pzz[k, 0, j]
                                         + ks_t[i * NZ + 1] * v_pzz[k, 1, j])
        for i in range(NZ):
            for j in range(NZ):
                acc = 0.0
                for m in range(NX):
                    acc += v_gain[k, m, i] * ks_t[m * NZ + j]
                gS[i * NZ + j] = -acc

        # --- state update: xpost = xm + K nu
        for i in range(NX):
            gxm[i] = gx[i]
        for i in range(NX):
            for j in range(NZ):
                gK[i * NZ + j] += gx[i] * v_nu[k, j]
        gnu[0] = 0.0
        gnu[1] = 0.0
        for i in range(NX):
            gnu[0] += v_gain[k, i, 0] * gx[i]
            gnu[1] += v_gain[k, i, 1] * gx[i]
        gzhat[0] = -gnu[0]
        gzhat[1] = -gnu[1]

        # --- gain: K^T = S^-1 Pxz^T  (solve backward, lower fold on S)
        for i in range(NZ):
            for j in range(NX):
                gb2[i * NX + j] = gK[j * NZ + i]
        solve_spd2(&v_lzz[k, 0, 0], gb2, NX)
        for i in range(NX):
            for j in range(NZ):
                gPxz[i * NZ + j] = gb2[j * NX + i]
        # gS_solve_full = -gb2 @ K   (2x5 @ 5x2)
        for i in range(NZ):
            for j in range(NZ):
                acc = 0.0
                for m in range(NX):
                    acc += gb2[i * NX + m] * v_gain[k, m, j]
                gS_fold[i * NZ + j] = -acc
        # fold lower (matches the reference spd_solve backward)
        gS[1 * NZ + 0] += gS_fold[1 * NZ + 0] + gS_fold[0 * NZ + 1]
        gS[0 * NZ + 0] += gS_fold[0 * NZ + 0]
        gS[1 * NZ + 1] += gS_fold[1 * NZ + 1]

        # --- cross covariance: Pxz = sum wc dev dz^T
        memset(gdev, 0, NX * NPTS * sizeof(double))
        memset(gdz, 0, NZ * NPTS * sizeof(double))
        memset(gwm_step, 0, NPTS * sizeof(double))
        memset(gwc_step, 0, NPTS * sizeof(double))
        for i in range(NPTS):
            acc = 0.0
            for m in range(NX):
                t = gPxz[m * NZ + 0] * v_dz[k, 0, i] + gPxz[m * NZ + 1] * v_dz[k, 1, i]
                gdev[m * NPTS + i] += v_wc[k, i] * t
                acc += v_dev[k, m, i] * t
            gwc_step[i] += acc
            for m in range(NZ):
                t = gPxz[0 * NZ + m] * v_dev[k, 0, i] + gPxz[1 * NZ + m] * v_dev[k, 1, i] \
                    + gPxz[2 * NZ + m] * v_dev[k, 2, i] + gPxz[3 * NZ + m] * v_dev[k, 3, i] \
                    + gPxz[4 * NZ + m] * v_dev[k, 4, i]
                gdz[m * NPTS + i] += v_wc[k, i] * t

        # --- innovation covariance: Pzz = sum wc dz dz^T + R
        for i in range(NPTS):
            acc = 0.0
            for m in range(NZ):
                t = (gS[m * NZ + 0] + gS[0 * NZ + m]) * v_dz[k, 0, i] \
                    + (gS[m * NZ + 1] + gS[1 * NZ + m]) * v_dz[k, 1, i]
                gdz[m * NPTS + i] += v_wc[k, i] * t
            acc = gS[0] * v_dz[k, 0, i] * v_dz[k, 0, i] \
                + gS[1] * v_dz[k, 0, i] * v_dz[k, 1, i] \
                + gS[2] * v_dz[k, 1, i] * v_dz[k, 0, i] \
                + gS[3] * v_dz[k, 1, i] * v_dz[k, 1, i]
            gwc_step[i] += acc

        # --- measurement deviations: dz = zp - zhat (wrapped)
        memset(gzp, 0, NZ * NPTS * sizeof(double))
        for i in range(NPTS):
            gzp[0 * NPTS + i] += gdz[0 * NPTS + i]
            gzp[1 * NPTS + i] += gdz[1 * NPTS + i]
            gzhat[0] -= gdz[0 * NPTS + i]
            gzhat[1] -= gdz[1 * NPTS + i]

        # --- zhat = meas_mean(zp, wm)
        meas_mean_backward(&v_zp[k, 0, 0], &v_wm[k, 0], wrapped, gzhat, gzp, gwm_step)

        # --- prior covariance: Pm = sum wc dev dev^T + Q
        for i in range(NPTS):
            acc = 0.0
            for m in range(NX):
                t = 0.0
                for j in range(NX):
                    t += (gPm[m * NX + j] + gPm[j * NX + m]) * v_dev[k, j, i]
                gdev[m * NPTS + i] += v_wc[k, i] * t
            for m in range(NX):
                t = 0.0
                for j in range(NX):
                    t += gPm[m * NX + j] * v_dev[k, j, i]
                acc += v_dev[k, m, i] * t
            gwc_step[i] += acc

        # --- deviations: dev = prop - xm
        memset(gprop, 0, NX * NPTS * sizeof(double))
        for i in range(NPTS):
            for m in range(NX):
                gprop[m * NPTS + i] += gdev[m * NPTS + i]
        for m in range(NX):
            acc = 0.0
            for i in range(NPTS):
                acc += gdev[m * NPTS + i]
            gxm[m] -= acc

        # --- mean: xm = prop @ wm
        for m in range(NX):
            for i in range(NPTS):
                gprop[m * NPTS + i] += gxm[m] * v_wm[k, i]
        for i in range(NPTS):
            acc = 0.0
            for m in range(NX):
                acc += v_prop[k, m, i] * gxm[m]
            gwm_step[i] += acc

        # --- carry from step k+1's proxy residual (uses this step's wm)
        for i in range(NPTS):
            gwm_step[i] += gwm_carry[i]
            gwm_carry[i] = 0.0

        # ---------------- policy backward ----------------
        hprev_ptr = &v_h[k - 1, 0] if k > 0 else NULL
        # softmax heads
        softmax_bw(NPTS, &v_wm[k, 0], gwm_step, glm)
        softmax_bw(NPTS, &v_wc[k, 0], gwc_step, glc)
        for i in range(dp):
            gc_vec[i] = 0.0
        outer_acc(NPTS, dp, glm, &v_c[k, 0], gp.w_hm)
        matvec_t(NPTS, dp, pp.w_hm, glm, gc_vec, 1)
        for i in range(NPTS):
            gp.b_hm[i] += glm[i]
        outer_acc(NPTS, dp, glc, &v_c[k, 0], gp.w_hc)
        matvec_t(NPTS, dp, pp.w_hc, glc, gc_vec, 1)
        for i in range(NPTS):
            gp.b_hc[i] += glc[i]
        # aux decoder
        outer_acc(NZ, dp, gdec, &v_c[k, 0], gp.w_dec)
        matvec_t(NZ, dp, pp.w_dec, gdec, gc_vec, 1)
        gp.b_dec[0] += gdec[0]
        gp.b_dec[1] += gdec[1]
        # projection
        for i in range(dp):
            gy2[i] = gc_vec[i] if v_y2[k, i] > 0.0 else 0.0
        layernorm_bw(dp, gy2, &v_xn2[k, 0], v_inv2[k], pp.g2, gap, gp.g2, gp.c2)
        for i in range(dh):
            gh_total[i] = gh_carry[i]
            gh_carry[i] = 0.0
        outer_acc(dp, dh, gap, &v_h[k, 0], gp.w_proj)
        matvec_t(dp, dh, pp.w_proj, gap, gh_total, 1)
        for i in range(dp):
            gp.b_proj[i] += gap[i]
        # GRU
        for i in range(dh):
            t = v_h[k - 1, i] if k > 0 else 0.0
            gu_vec[i] = (v_hc[k, i] - t) * gh_total[i]
            ghc[i] = v_u[k, i] * gh_total[i]
            ghp[i] = (1.0 - v_u[k, i]) * gh_total[i]
            rh_buf[i] = v_r[k, i] * t
        for i in range(dh):
            gah[i] = (1.0 - v_hc[k, i] * v_hc[k, i]) * ghc[i]
        outer_acc(dh, dh, gah, &v_e[k, 0], gp.w_h)
        matvec_t(dh, dh, pp.w_h, gah, ge, 0)
        outer_acc(dh, dh, gah, rh_buf, gp.u_h)
        matvec_t(dh, dh, pp.u_h, gah, grh, 0)
        for i in range(dh):
            gp.b_h[i] += gah[i]
        for i in range(dh):
            t = v_h[k - 1, i] if k > 0 else 0.0
            gr_vec[i] = t * grh[i]
            ghp[i] += v_r[k, i] * grh[i]
        for i in range(dh):
            gar[i] = v_r[k, i] * (1.0 - v_r[k, i]) * gr_vec[i]
            gau[i] = v_u[k, i] * (1.0 - v_u[k, i]) * gu_vec[i]
        outer_acc(dh, dh, gar, &v_e[k, 0], gp.w_r)
        matvec_t(dh, dh, pp.w_r, gar, ge, 1)
        outer_acc(dh, dh, gau, &v_e[k, 0], gp.w_u)
        matvec_t(dh, dh, pp.w_u, gau, ge, 1)
        for i in range(dh):
            gp.b_r[i] += gar[i]
            gp.b_u[i] += gau[i]
        if k > 0:
            outer_acc(dh, dh, gar, hprev_ptr, gp.u_r)
            outer_acc(dh, dh, gau, hprev_ptr, gp.u_u)
            matvec_t(dh, dh, pp.u_r, gar, ghp, 1)
            matvec_t(dh, dh, pp.u_u, gau, ghp, 1)
            for i in range(dh):
                gh_carry[i] = ghp[i]
        # encode
        for i in range(dh):
            gy1[i] = ge[i] if v_y1[k, i] > 0.0 else 0.0
        layernorm_bw(dh, gy1, &v_xn1[k, 0], v_inv1[k], pp.g1, ga_in, gp.g1, gp.c1)
        outer_acc(dh, NZ, ga_in, &v_nut[k, 0], gp.w_in)
        for i in range(dh):
            gp.b_in[i] += ga_in[i]
        for i in range(NZ):
            acc = 0.0
            for m in range(dh):
                acc += pp.w_in[m * NZ + i] * ga_in[m]
            gnut[i] += acc

        # --- proxy residual: nu_t = z - zhat_prev
        gzhat[0] = -gnut[0]
        gzhat[1] = -gnut[1]
        meas_mean_backward(&v_zp[k, 0, 0], &v_wmprev[k, 0], wrapped, gzhat, gzp,
                           &gwm_carry[0])

        # --- radar + turn model
        radar_backward(&v_prop[k, 0, 0], gzp, gprop)
        ct_backward(&v_pts[k, 0, 0], dt, gprop, gpts)

        # --- sigma spread: pts = [x, x + L_i, x - L_i]
        for m in range(NX):
            acc = 0.0
            for i in range(NPTS):
                acc += gpts[m * NPTS + i]
            gx[m] = acc
        for m in range(NX):
            for j in range(NX):
                gl_mat[m * NX + j] = gpts[m * NPTS + 1 + j] - gpts[m * NPTS + 6 + j]

        # --- Cholesky of gamma * P (+ jitter)
        chol_backward(NX, &v_l[k, 0, 0], gl_mat, gm_mat)
        for i in range(NX):
            for j in range(NX):
                gP[i, j] = gamma * gm_mat[i * NX + j]

        # --- truncation boundary: drop carries into step k-1
        if truncate > 0 and k > 0 and (k % truncate) == 0:
            for i in range(NX):
                gx[i] = 0.0
            for i in range(NX):
                for j in range(NX):
                    gP[i, j] = 0.0
            for i in range(dh):
                gh_carry[i] = 0.0
            for i in range(NPTS):
                gwm_carry[i] = 0.0

    return loss, grads, means_q, -1
