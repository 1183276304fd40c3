# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled dynamics kernels.

Mirror of ``reference.py`` (which documents the semantics and the
``params`` layout) with the chain unrolled onto fixed-size stack
buffers. Both backends must agree to float precision; the test suite
checks them against each other.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, fabs, isfinite, sin, sqrt

from ..errors import (NumericalOverflowError, SingularityError,
                      SolveFailureError)

cnp.import_array()

BACKEND_NAME = "compiled"

PITCH_GUARD = 1e-3
_FD_REL = 1e-6

DEF MAXJ = 8           # revolute joints
DEF MAXB = 9           # bodies: base + MAXJ
DEF MAXN = 14          # coordinates: 6 + MAXJ
DEF MAXX = 28          # state: 2 * MAXN

cdef double C_PITCH_GUARD = 1e-3
cdef double C_FD_REL = 1e-6
cdef double HALF_PI = 1.5707963267948966

# status codes shared by the C core
DEF OK = 0
DEF ERR_PITCH = 1
DEF ERR_SOLVE = 2
DEF ERR_OVERFLOW = 3


cdef struct Model:
    int n_m
    int nb
    int n          # 6 + n_m
    int nx         # 2 * n
    double masses[MAXB]
    double coms[MAXB][3]
    double inert[MAXB][9]
    double jorg[MAXJ][3]
    double jax[MAXJ][3]


cdef int _load(object params, Model* mdl) except -1:
    cdef cnp.ndarray[double, ndim=1] masses = np.ascontiguousarray(
        params[0], dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] coms = np.ascontiguousarray(
        params[1], dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] inert = np.ascontiguousarray(
        params[2], dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] jorg = np.ascontiguousarray(
        params[3], dtype=np.float64).reshape(-1, 3)
    cdef cnp.ndarray[double, ndim=2] jax = np.ascontiguousarray(
        params[4], dtype=np.float64).reshape(-1, 3)
    cdef int n_m = jorg.shape[0]
    cdef int nb = masses.shape[0]
    if n_m > MAXJ or nb != n_m + 1:
        raise ValueError("model exceeds the compiled joint limit or is "
                         "not a serial chain")
    mdl.n_m = n_m
    mdl.nb = nb
    mdl.n = 6 + n_m
    mdl.nx = 2 * (6 + n_m)
    cdef int b, i, j
    for b in range(nb):
        mdl.masses[b] = masses[b]
        for i in range(3):
            mdl.coms[b][i] = coms[b, i]
            for j in range(3):
                mdl.inert[b][3 * i + j] = inert[b, i, j]
    for b in range(n_m):
        for i in range(3):
            mdl.jorg[b][i] = jorg[b, i]
            mdl.jax[b][i] = jax[b, i]
    return 0


cdef inline void _cross(double* a, double* b, double* out) noexcept:
    out[0] = a[1] * b[2] - a[2] * b[1]
    out[1] = a[2] * b[0] - a[0] * b[2]
    out[2] = a[0] * b[1] - a[1] * b[0]


cdef inline void _mat3_vec(double* M, double* v, double* out) noexcept:
    cdef int i
    for i in range(3):
        out[i] = M[3 * i] * v[0] + M[3 * i + 1] * v[1] + M[3 * i + 2] * v[2]


cdef inline void _mat3_mat3(double* A, double* B, double* out) noexcept:
    cdef int i, j
    for i in range(3):
        for j in range(3):
            out[3 * i + j] = (A[3 * i] * B[j] + A[3 * i + 1] * B[3 + j]
                              + A[3 * i + 2] * B[6 + j])


cdef void _euler_R(double* th, double* R) noexcept:
    cdef double cr = cos(th[0]), sr = sin(th[0])
    cdef double cp = cos(th[1]), sp = sin(th[1])
    cdef double cy = cos(th[2]), sy = sin(th[2])
    R[0] = cy * cp
    R[1] = cy * sp * sr - sy * cr
    R[2] = cy * sp * cr + sy * sr
    R[3] = sy * cp
    R[4] = sy * sp * sr + cy * cr
    R[5] = sy * sp * cr - cy * sr
    R[6] = -sp
    R[7] = cp * sr
    R[8] = cp * cr


cdef void _rate_E(double* th, double* R, double* E) noexcept:
    # columns: world roll axis (R column 0), pitch axis, fixed yaw axis
    cdef double cy = cos(th[2]), sy = sin(th[2])
    E[0] = R[0]
    E[3] = R[3]
    E[6] = R[6]
    E[1] = -sy
    E[4] = cy
    E[7] = 0.0
    E[2] = 0.0
    E[5] = 0.0
    E[8] = 1.0


cdef void _rot_axis(double* a, double q, double* R) noexcept:
    cdef double c = cos(q), s = sin(q), v = 1.0 - c
    R[0] = c + v * a[0] * a[0]
    R[1] = -s * a[2] + v * a[0] * a[1]
    R[2] = s * a[1] + v * a[0] * a[2]
    R[3] = s * a[2] + v * a[1] * a[0]
    R[4] = c + v * a[1] * a[1]
    R[5] = -s * a[0] + v * a[1] * a[2]
    R[6] = -s * a[1] + v * a[2] * a[0]
    R[7] = s * a[0] + v * a[2] * a[1]
    R[8] = c + v * a[2] * a[2]


cdef inline void _skew_times(double* v, double* M, double* out, int n) noexcept:
    # out = skew(v) @ M for a 3 x n matrix with row stride n
    cdef int k
    for k in range(n):
        out[k] = -v[2] * M[n + k] + v[1] * M[2 * n + k]
        out[n + k] = v[2] * M[k] - v[0] * M[2 * n + k]
        out[2 * n + k] = -v[1] * M[k] + v[0] * M[n + k]


cdef void _fk(Model* m, double* y, double* Rs, double* xc,
              double* Jv, double* Jw) noexcept:
    # Rs: nb x 9, xc: nb x 3, Jv/Jw: nb x 3 x n (row stride n), all flat
    cdef int n = m.n
    cdef int n_m = m.n_m
    cdef int i, k, b3n
    cdef double Rb[9]
    cdef double E[9]
    cdef double Ro[9]
    cdef double Rj[9]
    cdef double Rn[9]
    cdef double oo[3]
    cdef double cb[3]
    cdef double pw[3]
    cdef double aw[3]
    cdef double cw[3]
    cdef double Jo[3 * MAXN]
    cdef double Jwf[3 * MAXN]
    cdef double Jon[3 * MAXN]
    cdef double Jwn[3 * MAXN]
    cdef double tmp[3 * MAXN]

    _euler_R(y + 3, Rb)
    _rate_E(y + 3, Rb, E)

    for k in range(3 * n):
        Jo[k] = 0.0
        Jwf[k] = 0.0
    for i in range(3):
        Jo[i * n + i] = 1.0
        for k in range(3):
            Jwf[i * n + 3 + k] = E[3 * i + k]
    for i in range(9):
        Ro[i] = Rb[i]
    for i in range(3):
        oo[i] = y[i]

    _mat3_vec(Rb, &m.coms[0][0], cb)
    for i in range(9):
        Rs[i] = Rb[i]
    for i in range(3):
        xc[i] = y[i] + cb[i]
    _skew_times(cb, Jwf, tmp, n)
    for k in range(3 * n):
        Jv[k] = Jo[k] - tmp[k]
        Jw[k] = Jwf[k]

    for i in range(n_m):
        b3n = (1 + i) * 3 * n
        _mat3_vec(Ro, &m.jorg[i][0], pw)
        _skew_times(pw, Jwf, tmp, n)
        for k in range(3 * n):
            Jon[k] = Jo[k] - tmp[k]
        _mat3_vec(Ro, &m.jax[i][0], aw)
        _rot_axis(&m.jax[i][0], y[6 + i], Rj)
        _mat3_mat3(Ro, Rj, Rn)
        for k in range(3 * n):
            Jwn[k] = Jwf[k]
        for k in range(3):
            Jwn[k * n + 6 + i] += aw[k]
        _mat3_vec(Rn, &m.coms[1 + i][0], cw)
        for k in range(9):
            Rs[(1 + i) * 9 + k] = Rn[k]
        for k in range(3):
            oo[k] = oo[k] + pw[k]
            xc[(1 + i) * 3 + k] = oo[k] + cw[k]
        _skew_times(cw, Jwn, tmp, n)
        for k in range(3 * n):
            Jv[b3n + k] = Jon[k] - tmp[k]
            Jw[b3n + k] = Jwn[k]
            Jo[k] = Jon[k]
            Jwf[k] = Jwn[k]
        for k in range(9):
            Ro[k] = Rn[k]


cdef void _world_inertia(Model* m, int b, double* Rs, double* W) noexcept:
    # W = R I R' for body b
    cdef double T[9]
    cdef double RT[9]
    cdef int i, j
    _mat3_mat3(Rs + 9 * b, &m.inert[b][0], T)
    for i in range(3):
        for j in range(3):
            RT[3 * i + j] = Rs[9 * b + 3 * j + i]
    _mat3_mat3(T, RT, W)


cdef void _mass(Model* m, double* y, double* G) noexcept:
    # G (n x n, row stride n) = sum_b m Jv'Jv + Jw' W Jw, symmetrized
    cdef int n = m.n
    cdef int b, i, j, a
    cdef double Rs[MAXB * 9]
    cdef double xc[MAXB * 3]
    cdef double Jv[MAXB * 3 * MAXN]
    cdef double Jw[MAXB * 3 * MAXN]
    cdef double W[9]
    cdef double WJ[3 * MAXN]
    cdef double* jv
    cdef double* jw
    cdef double s, gij

    _fk(m, y, Rs, xc, Jv, Jw)
    for i in range(n * n):
        G[i] = 0.0
    for b in range(m.nb):
        _world_inertia(m, b, Rs, W)
        jv = Jv + b * 3 * n
        jw = Jw + b * 3 * n
        for a in range(3):
            for j in range(n):
                WJ[a * n + j] = (W[3 * a] * jw[j] + W[3 * a + 1] * jw[n + j]
                                 + W[3 * a + 2] * jw[2 * n + j])
        for i in range(n):
            for j in range(n):
                s = jv[i] * jv[j] + jv[n + i] * jv[n + j] \
                    + jv[2 * n + i] * jv[2 * n + j]
                gij = jw[i] * WJ[j] + jw[n + i] * WJ[n + j] \
                    + jw[2 * n + i] * WJ[2 * n + j]
                G[i * n + j] += m.masses[b] * s + gij
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.5 * (G[i * n + j] + G[j * n + i])
            G[i * n + j] = s
            G[j * n + i] = s


cdef void _body_rates(Model* m, double* y, double* yd, double* omega,
                      double* omegad, double* acc) noexcept:
    # velocity-product angular velocity / acceleration and com acceleration
    # per body under zero coordinate acceleration; arrays nb x 3 flat
    cdef int n_m = m.n_m
    cdef int i, k
    cdef double Rb[9]
    cdef double E[9]
    cdef double Ro[9]
    cdef double Rj[9]
    cdef double Rn[9]
    cdef double c1[3]
    cdef double c2[3]
    cdef double c1dot[3]
    cdef double c2dot[3]
    cdef double t1[3]
    cdef double t2[3]
    cdef double t3[3]
    cdef double w[3]
    cdef double wd[3]
    cdef double wn[3]
    cdef double wdn[3]
    cdef double cb[3]
    cdef double ao[3]
    cdef double pw[3]
    cdef double aw[3]
    cdef double cw[3]
    cdef double ez[3]
    ez[0] = 0.0
    ez[1] = 0.0
    ez[2] = 1.0

    _euler_R(y + 3, Rb)
    _rate_E(y + 3, Rb, E)
    for k in range(3):
        c1[k] = E[3 * k]
        c2[k] = E[3 * k + 1]
    _cross(ez, c1, t1)
    _cross(c2, c1, t2)
    for k in range(3):
        c1dot[k] = yd[5] * t1[k] + yd[4] * t2[k]
    _cross(ez, c2, t1)
    for k in range(3):
        c2dot[k] = yd[5] * t1[k]

    for k in range(3):
        w[k] = E[3 * k] * yd[3] + E[3 * k + 1] * yd[4] + E[3 * k + 2] * yd[5]
        wd[k] = c1dot[k] * yd[3] + c2dot[k] * yd[4]
        omega[k] = w[k]
        omegad[k] = wd[k]
    _mat3_vec(Rb, &m.coms[0][0], cb)
    _cross(wd, cb, t1)
    _cross(w, cb, t2)
    _cross(w, t2, t3)
    for k in range(3):
        acc[k] = t1[k] + t3[k]

    for k in range(9):
        Ro[k] = Rb[k]
    for k in range(3):
        ao[k] = 0.0
    for i in range(n_m):
        _mat3_vec(Ro, &m.jorg[i][0], pw)
        _cross(wd, pw, t1)
        _cross(w, pw, t2)
        _cross(w, t2, t3)
        for k in range(3):
            ao[k] = ao[k] + t1[k] + t3[k]
        _mat3_vec(Ro, &m.jax[i][0], aw)
        _rot_axis(&m.jax[i][0], y[6 + i], Rj)
        _mat3_mat3(Ro, Rj, Rn)
        for k in range(3):
            wn[k] = w[k] + aw[k] * yd[6 + i]
        _cross(w, aw, t1)
        for k in range(3):
            wdn[k] = wd[k] + t1[k] * yd[6 + i]
        _mat3_vec(Rn, &m.coms[1 + i][0], cw)
        _cross(wdn, cw, t1)
        _cross(wn, cw, t2)
        _cross(wn, t2, t3)
        for k in range(3):
            omega[(1 + i) * 3 + k] = wn[k]
            omegad[(1 + i) * 3 + k] = wdn[k]
            acc[(1 + i) * 3 + k] = ao[k] + t1[k] + t3[k]
            w[k] = wn[k]
            wd[k] = wdn[k]
        for k in range(9):
            Ro[k] = Rn[k]


cdef void _bias(Model* m, double* y, double* yd, double* bias) noexcept:
    cdef int n = m.n
    cdef int b, k, a
    cdef double Rs[MAXB * 9]
    cdef double xc[MAXB * 3]
    cdef double Jv[MAXB * 3 * MAXN]
    cdef double Jw[MAXB * 3 * MAXN]
    cdef double omega[MAXB * 3]
    cdef double omegad[MAXB * 3]
    cdef double acc[MAXB * 3]
    cdef double W[9]
    cdef double f[3]
    cdef double Ww[3]
    cdef double Wwd[3]
    cdef double cr[3]
    cdef double nmom[3]
    cdef double* jv
    cdef double* jw

    _fk(m, y, Rs, xc, Jv, Jw)
    _body_rates(m, y, yd, omega, omegad, acc)
    for k in range(n):
        bias[k] = 0.0
    for b in range(m.nb):
        _world_inertia(m, b, Rs, W)
        for k in range(3):
            f[k] = m.masses[b] * acc[3 * b + k]
        _mat3_vec(W, omega + 3 * b, Ww)
        _mat3_vec(W, omegad + 3 * b, Wwd)
        _cross(omega + 3 * b, Ww, cr)
        for k in range(3):
            nmom[k] = Wwd[k] + cr[k]
        jv = Jv + b * 3 * n
        jw = Jw + b * 3 * n
        for k in range(n):
            bias[k] += (jv[k] * f[0] + jv[n + k] * f[1] + jv[2 * n + k] * f[2]
                        + jw[k] * nmom[0] + jw[n + k] * nmom[1]
                        + jw[2 * n + k] * nmom[2])


cdef int _chol_solve(double* G, double* rhs, double* out, int n) noexcept:
    # solve G x = rhs with G symmetric positive definite (in-place copy)
    cdef double L[MAXN * MAXN]
    cdef double z[MAXN]
    cdef int i, j, k
    cdef double s, t
    for i in range(n):
        for j in range(n):
            L[i * n + j] = G[i * n + j]
    for j in range(n):
        s = L[j * n + j]
        for k in range(j):
            s -= L[j * n + k] * L[j * n + k]
        if not (s > 0.0 and isfinite(s)):
            return ERR_SOLVE
        s = sqrt(s)
        L[j * n + j] = s
        for i in range(j + 1, n):
            t = L[i * n + j]
            for k in range(j):
                t -= L[i * n + k] * L[j * n + k]
            L[i * n + j] = t / s
    for i in range(n):
        s = rhs[i]
        for k in range(i):
            s -= L[i * n + k] * z[k]
        z[i] = s / L[i * n + i]
    for i in range(n - 1, -1, -1):
        s = z[i]
        for k in range(i + 1, n):
            s -= L[k * n + i] * out[k]
        out[i] = s / L[i * n + i]
    return OK


cdef int _dynamics(Model* m, double* x, double* u, double* out) noexcept:
    cdef int n = m.n
    cdef int k
    cdef double G[MAXN * MAXN]
    cdef double bias[MAXN]
    cdef double rhs[MAXN]
    if fabs(fabs(x[4]) - HALF_PI) < C_PITCH_GUARD:
        return ERR_PITCH
    _mass(m, x, G)
    _bias(m, x, x + n, bias)
    for k in range(n):
        rhs[k] = u[k] - bias[k]
    if _chol_solve(G, rhs, out + n, n) != OK:
        return ERR_SOLVE
    for k in range(n):
        out[k] = x[n + k]
    return OK


cdef int _rk4(Model* m, double* x, double* u, double h, double* out) noexcept:
    cdef int nx = m.nx
    cdef int k, st
    cdef double k1[MAXX]
    cdef double k2[MAXX]
    cdef double k3[MAXX]
    cdef double k4[MAXX]
    cdef double xt[MAXX]
    st = _dynamics(m, x, u, k1)
    if st != OK:
        return st
    for k in range(nx):
        xt[k] = x[k] + 0.5 * h * k1[k]
    st = _dynamics(m, xt, u, k2)
    if st != OK:
        return st
    for k in range(nx):
        xt[k] = x[k] + 0.5 * h * k2[k]
    st = _dynamics(m, xt, u, k3)
    if st != OK:
        return st
    for k in range(nx):
        xt[k] = x[k] + h * k3[k]
    st = _dynamics(m, xt, u, k4)
    if st != OK:
        return st
    for k in range(nx):
        out[k] = x[k] + (h / 6.0) * (k1[k] + 2.0 * k2[k] + 2.0 * k3[k]
                                     + k4[k])
        if not isfinite(out[k]):
            return ERR_OVERFLOW
    return OK


cdef inline double _fd(double v) noexcept:
    cdef double s = C_FD_REL * fabs(v)
    return s if s > C_FD_REL else C_FD_REL


cdef int _step_jac(Model* m, double* x, double* u, double h,
                   double* Ad, double* Bd, int nu) noexcept:
    # Ad (nx x nx), Bd (nx x nu), row-major with actual strides
    cdef int nx = m.nx
    cdef int i, k, st
    cdef double xp[MAXX]
    cdef double fp[MAXX]
    cdef double fm[MAXX]
    cdef double d
    for i in range(nx):
        d = _fd(x[i])
        for k in range(nx):
            xp[k] = x[k]
        xp[i] = x[i] + d
        st = _rk4(m, xp, u, h, fp)
        if st != OK:
            return st
        xp[i] = x[i] - d
        st = _rk4(m, xp, u, h, fm)
        if st != OK:
            return st
        for k in range(nx):
            Ad[k * nx + i] = (fp[k] - fm[k]) / (2.0 * d)
    cdef double up[MAXN]
    for i in range(nu):
        d = _fd(u[i])
        for k in range(nu):
            up[k] = u[k]
        up[i] = u[i] + d
        st = _rk4(m, x, up, h, fp)
        if st != OK:
            return st
        up[i] = u[i] - d
        st = _rk4(m, x, up, h, fm)
        if st != OK:
            return st
        for k in range(nx):
            Bd[k * nu + i] = (fp[k] - fm[k]) / (2.0 * d)
    return OK


cdef object _raise(int status, double pitch):
    if status == ERR_PITCH:
        raise SingularityError(
            f"base pitch {pitch:.6f} rad is within {PITCH_GUARD} of the "
            "attitude-representation singularity")
    if status == ERR_SOLVE:
        raise SolveFailureError("mass matrix not positive definite")
    if status == ERR_OVERFLOW:
        raise NumericalOverflowError(
            "integration step produced non-finite values")
    raise RuntimeError(f"unknown kernel status {status}")


cdef Model _MDL            # scratch model reused across calls
cdef object _MDL_KEY = None  # id of the params tuple currently loaded


cdef int _model(object params, Model* mdl) except -1:
    # params tuples come from RobotDescription.compile() and are immutable
    # in practice; cache the unpacked model keyed on object identity
    global _MDL, _MDL_KEY
    if _MDL_KEY is not None and _MDL_KEY is params:
        mdl[0] = _MDL
        return 0
    _load(params, mdl)
    _MDL = mdl[0]
    _MDL_KEY = params
    return 0


def mass_matrix(params, y):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] yv = np.ascontiguousarray(
        y, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] G = np.empty((mdl.n, mdl.n))
    _mass(&mdl, &yv[0], &G[0, 0])
    return G


def bias_forces(params, y, yd):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] yv = np.ascontiguousarray(
        y, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] ydv = np.ascontiguousarray(
        yd, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] b = np.empty(mdl.n)
    _bias(&mdl, &yv[0], &ydv[0], &b[0])
    return b


def dynamics(params, x, u):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] uv = np.ascontiguousarray(
        u, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] out = np.empty(mdl.nx)
    cdef int st = _dynamics(&mdl, &xv[0], &uv[0], &out[0])
    if st != OK:
        _raise(st, xv[4])
    return out


def rk4_step(params, x, u, h):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] uv = np.ascontiguousarray(
        u, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] out = np.empty(mdl.nx)
    cdef int st = _rk4(&mdl, &xv[0], &uv[0], h, &out[0])
    if st != OK:
        _raise(st, xv[4])
    return out


def rollout(params, x0, U, h):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Uv = np.ascontiguousarray(
        U, dtype=np.float64)
    cdef int N = Uv.shape[0]
    cdef cnp.ndarray[double, ndim=2] X = np.empty((N + 1, mdl.nx))
    cdef int k, st
    cdef double hh = h
    for k in range(mdl.nx):
        X[0, k] = xv[k]
    for k in range(N):
        st = _rk4(&mdl, &X[k, 0], &Uv[k, 0], hh, &X[k + 1, 0])
        if st != OK:
            _raise(st, X[k, 4])
    return X


def affine_rollout(params, x0, h, xbar, ubar, K, l):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xb = np.ascontiguousarray(
        xbar, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ub = np.ascontiguousarray(
        ubar, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] Kv = np.ascontiguousarray(
        K, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] lv = np.ascontiguousarray(
        l, dtype=np.float64)
    cdef int N = Kv.shape[0]
    cdef int nu = Kv.shape[1]
    cdef int nx = mdl.nx
    cdef cnp.ndarray[double, ndim=2] X = np.empty((N + 1, nx))
    cdef cnp.ndarray[double, ndim=2] Uc = np.empty((N, nu))
    cdef int k, i, j, st
    cdef double s
    cdef double hh = h
    for i in range(nx):
        X[0, i] = xv[i]
    for k in range(N):
        for i in range(nu):
            s = ub[k, i] + lv[k, i]
            for j in range(nx):
                s += Kv[k, i, j] * (X[k, j] - xb[k, j])
            if not isfinite(s):
                raise NumericalOverflowError("feedback control is non-finite")
            Uc[k, i] = s
        st = _rk4(&mdl, &X[k, 0], &Uc[k, 0], hh, &X[k + 1, 0])
        if st != OK:
            _raise(st, X[k, 4])
    return X, Uc


def linearize(params, x, u):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] uv = np.ascontiguousarray(
        u, dtype=np.float64)
    cdef int nx = mdl.nx
    cdef int nu = uv.shape[0]
    cdef cnp.ndarray[double, ndim=2] A = np.empty((nx, nx))
    cdef cnp.ndarray[double, ndim=2] B = np.empty((nx, nu))
    cdef cnp.ndarray[double, ndim=1] f0 = np.empty(nx)
    cdef int st = _dynamics(&mdl, &xv[0], &uv[0], &f0[0])
    if st != OK:
        _raise(st, xv[4])
    cdef double xp[MAXX]
    cdef double fp[MAXX]
    cdef double fm[MAXX]
    cdef double up[MAXN]
    cdef int i, k
    cdef double d
    for i in range(nx):
        d = _fd(xv[i])
        for k in range(nx):
            xp[k] = xv[k]
        xp[i] = xv[i] + d
        st = _dynamics(&mdl, xp, &uv[0], fp)
        if st != OK:
            _raise(st, xp[4])
        xp[i] = xv[i] - d
        st = _dynamics(&mdl, xp, &uv[0], fm)
        if st != OK:
            _raise(st, xp[4])
        for k in range(nx):
            A[k, i] = (fp[k] - fm[k]) / (2.0 * d)
    for i in range(nu):
        d = _fd(uv[i])
        for k in range(nu):
            up[k] = uv[k]
        up[i] = uv[i] + d
        st = _dynamics(&mdl, &xv[0], up, fp)
        if st != OK:
            _raise(st, xv[4])
        up[i] = uv[i] - d
        st = _dynamics(&mdl, &xv[0], up, fm)
        if st != OK:
            _raise(st, xv[4])
        for k in range(nx):
            B[k, i] = (fp[k] - fm[k]) / (2.0 * d)
    return A, B, f0


def step_jacobians(params, x, u, h):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] uv = np.ascontiguousarray(
        u, dtype=np.float64)
    cdef int nu = uv.shape[0]
    cdef cnp.ndarray[double, ndim=2] Ad = np.empty((mdl.nx, mdl.nx))
    cdef cnp.ndarray[double, ndim=2] Bd = np.empty((mdl.nx, nu))
    cdef int st = _step_jac(&mdl, &xv[0], &uv[0], h, &Ad[0, 0], &Bd[0, 0],
                            nu)
    if st != OK:
        _raise(st, xv[4])
    return Ad, Bd


def shooting_cost_grad(params, x0, U, h, xref, uref, Q, R, QN, obs_P,
                       obs_c, mu):
    cdef Model mdl
    _model(params, &mdl)
    cdef cnp.ndarray[double, ndim=1] xv = np.ascontiguousarray(
        x0, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Uv = np.ascontiguousarray(
        U, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] xr = np.ascontiguousarray(
        xref, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] ur = np.ascontiguousarray(
        uref, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Qv = np.ascontiguousarray(
        Q, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] Rv = np.ascontiguousarray(
        R, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] QNv = np.ascontiguousarray(
        QN, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] Pv = np.ascontiguousarray(
        obs_P, dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] Cv = np.ascontiguousarray(
        obs_c, dtype=np.float64)
    cdef double muv = mu

    cdef int N = Uv.shape[0]
    cdef int nx = mdl.nx
    cdef int nu = Uv.shape[1]
    cdef int m_obs = Pv.shape[0]
    cdef cnp.ndarray[double, ndim=2] X = np.empty((N + 1, nx))
    cdef cnp.ndarray[double, ndim=2] pen = np.zeros((N + 1, nx))
    cdef cnp.ndarray[double, ndim=2] grad = np.empty((N, nu))
    cdef double cost = 0.0
    cdef int k, i, j, st
    cdef double s, hval, d0, d1, d2, p0, p1, p2
    cdef double lam[MAXX]
    cdef double lnew[MAXX]
    cdef double Ad[MAXX * MAXX]
    cdef double Bd[MAXX * MAXN]
    cdef double hh = h

    for i in range(nx):
        X[0, i] = xv[i]
    for k in range(N):
        # stage cost on the deviation from the references
        for i in range(nx):
            s = 0.0
            for j in range(nx):
                s += Qv[i, j] * (X[k, j] - xr[k, j])
            cost += 0.5 * (X[k, i] - xr[k, i]) * s
        for i in range(nu):
            s = 0.0
            for j in range(nu):
                s += Rv[i, j] * (Uv[k, j] - ur[k, j])
            cost += 0.5 * (Uv[k, i] - ur[k, i]) * s
        st = _rk4(&mdl, &X[k, 0], &Uv[k, 0], hh, &X[k + 1, 0])
        if st != OK:
            _raise(st, X[k, 4])
    for i in range(nx):
        s = 0.0
        for j in range(nx):
            s += QNv[i, j] * (X[N, j] - xr[N, j])
        cost += 0.5 * (X[N, i] - xr[N, i]) * s

    if m_obs > 0 and muv > 0.0:
        for k in range(1, N + 1):
            for j in range(m_obs):
                d0 = X[k, 0] - Cv[k, j, 0]
                d1 = X[k, 1] - Cv[k, j, 1]
                d2 = X[k, 2] - Cv[k, j, 2]
                p0 = Pv[j, 0, 0] * d0 + Pv[j, 0, 1] * d1 + Pv[j, 0, 2] * d2
                p1 = Pv[j, 1, 0] * d0 + Pv[j, 1, 1] * d1 + Pv[j, 1, 2] * d2
                p2 = Pv[j, 2, 0] * d0 + Pv[j, 2, 1] * d1 + Pv[j, 2, 2] * d2
                hval = 1.0 - (d0 * p0 + d1 * p1 + d2 * p2)
                if hval > 0.0:
                    cost += muv * hval * hval
                    pen[k, 0] += -4.0 * muv * hval * p0
                    pen[k, 1] += -4.0 * muv * hval * p1
                    pen[k, 2] += -4.0 * muv * hval * p2

    for i in range(nx):
        s = 0.0
        for j in range(nx):
            s += QNv[i, j] * (X[N, j] - xr[N, j])
        lam[i] = s + pen[N, i]
    for k in range(N - 1, -1, -1):
        st = _step_jac(&mdl, &X[k, 0], &Uv[k, 0], hh, Ad, Bd, nu)
        if st != OK:
            _raise(st, X[k, 4])
        for i in range(nu):
            s = 0.0
            for j in range(nu):
                s += Rv[i, j] * (Uv[k, j] - ur[k, j])
            for j in range(nx):
                s += Bd[j * nu + i] * lam[j]
            grad[k, i] = s
        for i in range(nx):
            s = 0.0
            for j in range(nx):
                s += Qv[i, j] * (X[k, j] - xr[k, j])
            s += pen[k, i]
            for j in range(nx):
                s += Ad[j * nx + i] * lam[j]
            lnew[i] = s
        for i in range(nx):
            lam[i] = lnew[i]
    return cost, grad.ravel()
