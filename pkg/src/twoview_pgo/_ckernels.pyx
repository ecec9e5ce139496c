# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twin of ``_pykernels``: same signatures, same results.

All 3x3 matrices are handled as row-major ``double[9]`` scratch buffers.
"""
import numpy as np

from libc.math cimport atan2, cos, fabs, sin, sqrt, M_PI


cdef inline void mm(const double* a, const double* b, double* o) noexcept nogil:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = a[3 * i] * b[j] + a[3 * i + 1] * b[3 + j] + a[3 * i + 2] * b[6 + j]


cdef inline void mtm(const double* a, const double* b, double* o) noexcept nogil:
    # a^T b
    cdef int i, j
    for i in range(3):
        for j in range(3):
            o[3 * i + j] = a[i] * b[j] + a[3 + i] * b[3 + j] + a[6 + i] * b[6 + j]


cdef inline void mv(const double* a, const double* v, double* o) noexcept nogil:
    cdef int i
    for i in range(3):
        o[i] = a[3 * i] * v[0] + a[3 * i + 1] * v[1] + a[3 * i + 2] * v[2]


cdef inline void mtv(const double* a, const double* v, double* o) noexcept nogil:
    cdef int i
    for i in range(3):
        o[i] = a[i] * v[0] + a[3 + i] * v[1] + a[6 + i] * v[2]


cdef inline void hat(const double* v, double* o) noexcept nogil:
    o[0] = 0.0
    o[1] = -v[2]
    o[2] = v[1]
    o[3] = v[2]
    o[4] = 0.0
    o[5] = -v[0]
    o[6] = -v[1]
    o[7] = v[0]
    o[8] = 0.0


cdef inline void ident_plus(double a, const double* W, double b, const double* W2, double* o) noexcept nogil:
    cdef int i
    for i in range(9):
        o[i] = a * W[i] + b * W2[i]
    o[0] += 1.0
    o[4] += 1.0
    o[8] += 1.0


cdef void so3_exp(const double* w, double* R) noexcept nogil:
    cdef double W[9]
    cdef double W2[9]
    cdef double theta = sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    cdef double a, b
    hat(w, W)
    mm(W, W, W2)
    if theta < 1e-8:
        a = 1.0
        b = 0.5
    else:
        a = sin(theta) / theta
        b = (1.0 - cos(theta)) / (theta * theta)
    ident_plus(a, W, b, W2, R)


cdef void so3_log(const double* R, double* out) noexcept nogil:
    cdef double sk[3]
    cdef double B[9]
    cdef double axis[3]
    cdef double s, c, theta, f, nrm, proj, best
    cdef int i, k, big
    sk[0] = R[7] - R[5]
    sk[1] = R[2] - R[6]
    sk[2] = R[3] - R[1]
    s = 0.5 * sqrt(sk[0] * sk[0] + sk[1] * sk[1] + sk[2] * sk[2])
    c = 0.5 * (R[0] + R[4] + R[8] - 1.0)
    theta = atan2(s, c)
    if theta < 1e-8:
        for i in range(3):
            out[i] = 0.5 * sk[i]
        return
    if M_PI - theta > 1e-3:
        f = theta / (2.0 * s)
        for i in range(3):
            out[i] = f * sk[i]
        return
    for i in range(3):
        for k in range(3):
            B[3 * i + k] = 0.5 * (R[3 * i + k] + R[3 * k + i])
        B[4 * i] -= c
    k = 0
    if B[4] > B[4 * k]:
        k = 1
    if B[8] > B[4 * k]:
        k = 2
    f = sqrt(B[4 * k]) if B[4 * k] > 1e-300 else sqrt(1e-300)
    for i in range(3):
        axis[i] = B[3 * i + k] / f
    nrm = sqrt(axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2])
    for i in range(3):
        axis[i] /= nrm
    proj = axis[0] * sk[0] + axis[1] * sk[1] + axis[2] * sk[2]
    big = 0
    best = fabs(axis[0])
    for i in range(1, 3):
        if fabs(axis[i]) > best:
            best = fabs(axis[i])
            big = i
    if proj < 0.0 or (proj == 0.0 and axis[big] < 0.0):
        for i in range(3):
            axis[i] = -axis[i]
    for i in range(3):
        out[i] = theta * axis[i]


cdef void jl(const double* w, double* o) noexcept nogil:
    cdef double W[9]
    cdef double W2[9]
    cdef double theta = sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    cdef double a, b
    hat(w, W)
    mm(W, W, W2)
    if theta < 1e-5:
        a = 0.5
        b = 1.0 / 6.0
    else:
        a = (1.0 - cos(theta)) / (theta * theta)
        b = (theta - sin(theta)) / (theta * theta * theta)
    ident_plus(a, W, b, W2, o)


cdef void jl_inv(const double* w, double* o) noexcept nogil:
    cdef double W[9]
    cdef double W2[9]
    cdef double theta = sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    cdef double coef
    hat(w, W)
    mm(W, W, W2)
    if theta < 1e-5:
        coef = 1.0 / 12.0
    else:
        coef = 1.0 / (theta * theta) - (1.0 + cos(theta)) / (2.0 * theta * sin(theta))
    ident_plus(-0.5, W, coef, W2, o)


cdef void se3_q(const double* w, const double* rho, double* o) noexcept nogil:
    cdef double W[9]
    cdef double P[9]
    cdef double WP[9]
    cdef double PW[9]
    cdef double WPW[9]
    cdef double WWP[9]
    cdef double PWW[9]
    cdef double WPWW[9]
    cdef double WWPW[9]
    cdef double theta = sqrt(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    cdef double t2 = theta * theta
    cdef double c1, c2, c3, st, ct
    cdef int i
    hat(w, W)
    hat(rho, P)
    mm(W, P, WP)
    mm(P, W, PW)
    mm(WP, W, WPW)
    mm(W, WP, WWP)
    mm(PW, W, PWW)
    mm(WPW, W, WPWW)
    mm(W, WPW, WWPW)
    if theta < 1e-4:
        c1 = 1.0 / 6.0 - t2 / 120.0
        c2 = 1.0 / 24.0 - t2 / 720.0
        c3 = 1.0 / 120.0 - t2 / 2520.0
    else:
        st = sin(theta)
        ct = cos(theta)
        c1 = (theta - st) / (t2 * theta)
        c2 = (t2 + 2.0 * ct - 2.0) / (2.0 * t2 * t2)
        c3 = (2.0 * theta - 3.0 * st + theta * ct) / (2.0 * t2 * t2 * theta)
    for i in range(9):
        o[i] = (0.5 * P[i] + c1 * (WP[i] + PW[i] + WPW[i])
                + c2 * (WWP[i] + PWW[i] - 3.0 * WPW[i])
                + c3 * (WPWW[i] + WWPW[i]))


cdef void se3_log(const double* R, const double* t, double* out) noexcept nogil:
    cdef double Ji[9]
    so3_log(R, out)
    jl_inv(out, Ji)
    mv(Ji, t, out + 3)


cdef void se3_jr_inv(const double* xi, double* J) noexcept nogil:
    # J is 6x6 row-major
    cdef double w[3]
    cdef double rho[3]
    cdef double Ai[9]
    cdef double Q[9]
    cdef double T1[9]
    cdef double T2[9]
    cdef int i, j
    for i in range(3):
        w[i] = -xi[i]
        rho[i] = -xi[3 + i]
    jl_inv(w, Ai)
    se3_q(w, rho, Q)
    mm(Ai, Q, T1)
    mm(T1, Ai, T2)
    for i in range(3):
        for j in range(3):
            J[6 * i + j] = Ai[3 * i + j]
            J[6 * i + 3 + j] = 0.0
            J[6 * (3 + i) + j] = -T2[3 * i + j]
            J[6 * (3 + i) + 3 + j] = Ai[3 * i + j]


def so3_log_batch(const double[:, :, ::1] R):
    cdef Py_ssize_t n = R.shape[0], e
    out = np.empty((n, 3))
    cdef double[:, ::1] o = out
    with nogil:
        for e in range(n):
            so3_log(&R[e, 0, 0], &o[e, 0])
    return out


def retract(const double[:, :, ::1] R, const double[:, ::1] t, const double[:, ::1] delta):
    cdef Py_ssize_t n = R.shape[0], e
    cdef double dR[9]
    cdef double J[9]
    cdef double dt[3]
    cdef double tmp[3]
    Rout = np.empty((n, 3, 3))
    tout = np.empty((n, 3))
    cdef double[:, :, ::1] Ro = Rout
    cdef double[:, ::1] to = tout
    cdef int i
    with nogil:
        for e in range(n):
            so3_exp(&delta[e, 0], dR)
            jl(&delta[e, 0], J)
            mv(J, &delta[e, 3], dt)
            mm(&R[e, 0, 0], dR, &Ro[e, 0, 0])
            mv(&R[e, 0, 0], dt, tmp)
            for i in range(3):
                to[e, i] = t[e, i] + tmp[i]
    return Rout, tout


def absolute_terms(const double[:, :, ::1] Ra, const double[:, ::1] ta,
                   const double[:, :, ::1] Rb, const double[:, ::1] tb,
                   const double[:, :, ::1] Rm, const double[:, ::1] tm):
    cdef Py_ssize_t n = Ra.shape[0], e
    cdef double RE[9]
    cdef double RD[9]
    cdef double d[3]
    cdef double tE[3]
    cdef double tD[3]
    cdef double J[36]
    cdef double H[9]
    cdef double RETH[9]
    cdef int i, j, k
    cdef double s
    r_arr = np.empty((n, 6))
    ja_arr = np.empty((n, 6, 6))
    jb_arr = np.empty((n, 6, 6))
    cdef double[:, ::1] r = r_arr
    cdef double[:, :, ::1] Ja = ja_arr
    cdef double[:, :, ::1] Jb = jb_arr
    with nogil:
        for e in range(n):
            mtm(&Ra[e, 0, 0], &Rb[e, 0, 0], RE)
            for i in range(3):
                d[i] = tb[e, i] - ta[e, i]
            mtv(&Ra[e, 0, 0], d, tE)
            mtm(&Rm[e, 0, 0], RE, RD)
            for i in range(3):
                d[i] = tE[i] - tm[e, i]
            mtv(&Rm[e, 0, 0], d, tD)
            se3_log(RD, tD, &r[e, 0])
            se3_jr_inv(&r[e, 0], J)
            for i in range(6):
                for j in range(6):
                    Jb[e, i, j] = J[6 * i + j]
            # Ja = -J * Ad(E^-1), Ad(E^-1) = [[RE^T, 0], [-RE^T [tE]x, RE^T]]
            hat(tE, H)
            mtm(RE, H, RETH)
            for i in range(6):
                for j in range(3):
                    s = 0.0
                    for k in range(3):
                        s += J[6 * i + k] * RE[3 * j + k]
                        s -= J[6 * i + 3 + k] * RETH[3 * k + j]
                    Ja[e, i, j] = -s
                    s = 0.0
                    for k in range(3):
                        s += J[6 * i + 3 + k] * RE[3 * j + k]
                    Ja[e, i, 3 + j] = -s
    return r_arr, ja_arr, jb_arr


def scale_free_terms(const double[:, :, ::1] Ra, const double[:, ::1] ta,
                     const double[:, :, ::1] Rb, const double[:, ::1] tb,
                     const double[:, :, ::1] Rm, const double[:, ::1] dm):
    cdef Py_ssize_t n = Ra.shape[0], e
    cdef double RE[9]
    cdef double RD[9]
    cdef double d[3]
    cdef double tE[3]
    cdef double nv[3]
    cdef double phi[3]
    cdef double mphi[3]
    cdef double Ji[9]
    cdef double P[9]
    cdef double H[9]
    cdef double T[9]
    cdef double nrm, inv
    cdef int i, j, k
    cdef double s
    r_arr = np.empty((n, 6))
    ja_arr = np.zeros((n, 6, 6))
    jb_arr = np.zeros((n, 6, 6))
    norm_arr = np.empty(n)
    cdef double[:, ::1] r = r_arr
    cdef double[:, :, ::1] Ja = ja_arr
    cdef double[:, :, ::1] Jb = jb_arr
    cdef double[::1] norms = norm_arr
    with nogil:
        for e in range(n):
            mtm(&Ra[e, 0, 0], &Rb[e, 0, 0], RE)
            for i in range(3):
                d[i] = tb[e, i] - ta[e, i]
            mtv(&Ra[e, 0, 0], d, tE)
            mtm(&Rm[e, 0, 0], RE, RD)
            so3_log(RD, phi)
            nrm = sqrt(tE[0] * tE[0] + tE[1] * tE[1] + tE[2] * tE[2])
            norms[e] = nrm
            if nrm > 0.0:
                inv = 1.0 / nrm
            else:
                inv = 0.0
            for i in range(3):
                nv[i] = tE[i] * inv
                r[e, i] = phi[i]
                r[e, 3 + i] = dm[e, i] - nv[i]
                mphi[i] = -phi[i]
            jl_inv(mphi, Ji)
            for i in range(3):
                for j in range(3):
                    Jb[e, i, j] = Ji[3 * i + j]
                    s = 0.0
                    for k in range(3):
                        s += Ji[3 * i + k] * RE[3 * j + k]
                    Ja[e, i, j] = -s
            if nrm > 0.0:
                for i in range(3):
                    for j in range(3):
                        P[3 * i + j] = ((1.0 if i == j else 0.0) - nv[i] * nv[j]) * inv
                hat(tE, H)
                mm(P, H, T)
                for i in range(3):
                    for j in range(3):
                        Ja[e, 3 + i, j] = -T[3 * i + j]
                        Ja[e, 3 + i, 3 + j] = P[3 * i + j]
                mm(P, RE, T)
                for i in range(3):
                    for j in range(3):
                        Jb[e, 3 + i, 3 + j] = -T[3 * i + j]
    return r_arr, ja_arr, jb_arr, norm_arr
