# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot loops: covariance evaluation, direct summation and the
up-looking sparse Cholesky.

Every function here has a NumPy twin in ``_fallback`` with the same
signature; ``_backend`` picks one at import.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sqrt, sin, sinh, cosh, fabs, isfinite, M_PI

cnp.import_array()

# family codes shared with _fallback and kernels.py
DEF MATERN = 0
DEF MATERN_HALF = 1
DEF GAUSSIAN = 2

# Taylor coefficients of 1/Gamma(1+x) about 0, k = 0..28
cdef double[29] _RGAM = [
    1.0, 0.57721566490153286061, -0.65587807152025388108, -0.042002635034095235529,
    0.1665386113822914895, -0.042197734555544336748, -0.0096219715278769735621,
    0.0072189432466630995424, -0.0011651675918590651121, -0.00021524167411495097282,
    0.00012805028238811618615, -0.000020134854780788238656, -1.2504934821426706573e-6,
    1.1330272319816958824e-6, -2.0563384169776071035e-7, 6.1160951044814158179e-9,
    5.0020076444692229301e-9, -1.1812745704870201446e-9, 1.0434267116911005105e-10,
    7.782263439905071254e-12, -3.6968056186422057082e-12, 5.100370287454475979e-13,
    -2.0583260535665067832e-14, -5.3481225394230179824e-15, 1.2267786282382607902e-15,
    -1.1812593016974587695e-16, 1.1866922547516003326e-18, 1.4123806553180317816e-18,
    -2.2987456844353702066e-19]

DEF _EPS = 1e-16
DEF _MAXIT = 10000
DEF _TEMME_MAX = 3.0
DEF _TAB = 128


cdef struct KCtx:
    # everything in K_nu(x) that depends on nu alone
    double nu, mu, mu2, fact, gam1, gam2, gampl, gammi, two_mu
    int nl
    double inv_i[_TAB]        # 1/i
    double inv_imu[_TAB]      # 1/(i - mu)
    double inv_ipmu[_TAB]     # 1/(i + mu)
    double inv_den[_TAB]      # 1/(i^2 - mu^2)
    double cf_a[_TAB]         # continued-fraction a_i
    double cf_inva[_TAB]      # 1/a_i
    double cf_c[_TAB]         # continued-fraction c_i


cdef void kctx_init(KCtx* c, double nu) noexcept nogil:
    cdef int i, k
    cdef double mpow, pimu, a, cc
    c.nu = nu
    c.nl = <int>(nu + 0.5)
    c.mu = nu - c.nl
    c.mu2 = c.mu * c.mu
    c.two_mu = 2.0 ** c.mu
    pimu = M_PI * c.mu
    c.fact = 1.0 if fabs(pimu) < _EPS else pimu / sin(pimu)
    # gam1 = (1/G(1-mu) - 1/G(1+mu)) / (2 mu), gam2 = their mean
    c.gam1 = 0.0
    c.gam2 = 0.0
    mpow = 1.0
    for k in range(0, 29, 2):
        c.gam2 += _RGAM[k] * mpow
        if k + 1 < 29:
            c.gam1 -= _RGAM[k + 1] * mpow
        mpow *= c.mu2
    c.gampl = c.gam2 - c.mu * c.gam1
    c.gammi = c.gam2 + c.mu * c.gam1
    c.inv_i[0] = 0.0
    c.inv_imu[0] = 0.0
    c.inv_ipmu[0] = 0.0
    c.inv_den[0] = 0.0
    for i in range(1, _TAB):
        c.inv_i[i] = 1.0 / i
        c.inv_imu[i] = 1.0 / (i - c.mu)
        c.inv_ipmu[i] = 1.0 / (i + c.mu)
        c.inv_den[i] = 1.0 / (i * i - c.mu2)
    a = -(0.25 - c.mu2)
    cc = 0.25 - c.mu2
    c.cf_a[0] = 0.0
    c.cf_a[1] = a
    c.cf_inva[0] = 0.0
    c.cf_inva[1] = 0.0
    c.cf_c[0] = 0.0
    c.cf_c[1] = cc
    for i in range(2, _TAB):
        a -= 2 * (i - 1)
        cc = -a * cc / i
        c.cf_a[i] = a
        c.cf_inva[i] = 1.0 / a
        c.cf_c[i] = cc


cdef double bessel_k_ctx(const KCtx* kc, double x, double* xnu) noexcept nogil:
    """K_nu(x) for x > 0; also stores x**nu in ``xnu`` when it is not NULL.

    Temme's series for small x, Steed's continued fraction otherwise, both
    at an order mu in [-1/2, 1/2], followed by upward recurrence to nu.
    """
    cdef int i
    cdef double mu = kc.mu, mu2 = kc.mu2
    cdef double xi = 1.0 / x, xi2 = 2.0 * xi
    cdef double x2, d, e, ee, fact2, ff, sm, p, q, c, sum1, dl, rkmu, rk1, rktemp
    cdef double b, h, delh, q1, q2, a1, a, s, qnew, dels
    if x < _TEMME_MAX:
        x2 = 0.5 * x
        d = -log(x2)
        e = mu * d
        ee = exp(e)
        fact2 = 1.0 if fabs(e) < _EPS else (sinh(e) / e if fabs(e) < 0.5 else 0.5 * (ee - 1.0 / ee) / e)
        ff = kc.fact * (kc.gam1 * 0.5 * (ee + 1.0 / ee) + kc.gam2 * fact2 * d)
        sm = ff
        p = 0.5 * ee / kc.gampl
        q = 0.5 / (ee * kc.gammi)
        c = 1.0
        d = x2 * x2
        sum1 = p
        for i in range(1, _MAXIT):
            if i < _TAB:
                ff = (i * ff + p + q) * kc.inv_den[i]
                c *= d * kc.inv_i[i]
                p *= kc.inv_imu[i]
                q *= kc.inv_ipmu[i]
            else:
                ff = (i * ff + p + q) / (i * i - mu2)
                c *= d / i
                p /= (i - mu)
                q /= (i + mu)
            dl = c * ff
            sm += dl
            sum1 += c * (p - i * ff)
            if fabs(dl) < fabs(sm) * _EPS:
                break
        rkmu = sm
        rk1 = sum1 * xi2
        if xnu != NULL:
            # x**mu = 2**mu * (x/2)**mu and ee = (x/2)**(-mu)
            xnu[0] = kc.two_mu / ee
            for i in range(kc.nl):
                xnu[0] *= x
    else:
        b = 2.0 * (1.0 + x)
        d = 1.0 / b
        h = d
        delh = d
        q1 = 0.0
        q2 = 1.0
        a1 = 0.25 - mu2
        q = a1
        c = a1
        a = -a1
        s = 1.0 + q * delh
        for i in range(2, _MAXIT):
            if i < _TAB:
                c = kc.cf_c[i]
                a = kc.cf_a[i]
                qnew = (q1 - b * q2) * kc.cf_inva[i]
            else:
                a -= 2 * (i - 1)
                c = -a * c / i
                qnew = (q1 - b * q2) / a
            q1 = q2
            q2 = qnew
            q += c * qnew
            b += 2.0
            d = 1.0 / (b + a * d)
            delh = (b * d - 1.0) * delh
            h += delh
            dels = q * delh
            s += dels
            if fabs(dels) < fabs(s) * _EPS:
                break
        h = a1 * h
        rkmu = sqrt(M_PI / (2.0 * x)) * exp(-x) / s
        rk1 = rkmu * (mu + x + 0.5 - h) * xi
        if xnu != NULL:
            xnu[0] = exp(kc.nu * log(x))
    for i in range(1, kc.nl + 1):
        rktemp = (mu + i) * xi2 * rk1 + rkmu
        rkmu = rk1
        rk1 = rktemp
    return rkmu


def bessel_k_array(double nu, double[::1] x):
    """K_nu at every entry of ``x`` (all positive); exposed for testing."""
    cdef Py_ssize_t i, n = x.shape[0]
    cdef KCtx kc
    kctx_init(&kc, nu)
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            o[i] = bessel_k_ctx(&kc, x[i], NULL)
    return out


cdef inline double _phi(double z, int family, const KCtx* kc, double norm,
                        const double[::1] coef) noexcept nogil:
    # z is the scaled distance: sqrt(2 nu) r / rho for Matern, r / rho for Gaussian
    cdef double acc, val, znu
    cdef Py_ssize_t k, m
    if family == GAUSSIAN:
        return exp(-0.5 * z * z)
    if z < 1e-9:
        return 1.0
    if family == MATERN_HALF:
        m = coef.shape[0]
        acc = 0.0
        for k in range(m):
            acc = acc * z + coef[k]
        return exp(-z) * acc
    val = bessel_k_ctx(kc, z, &znu)
    if not isfinite(val):
        # K_nu overflowed; only reachable for large nu at tiny z
        return 1.0 - z * z / (4.0 * (kc.nu - 1.0))
    return norm * znu * val


def phi_of_scaled(double[::1] z, int family, double nu, double lognorm,
                  double[::1] coef):
    """Kernel values for an array of already-scaled distances."""
    cdef Py_ssize_t i, n = z.shape[0]
    out = np.empty(n)
    cdef double[::1] o = out
    cdef KCtx kc
    kctx_init(&kc, nu if family == MATERN else 1.0)
    cdef double norm = exp(lognorm)
    with nogil:
        for i in range(n):
            o[i] = _phi(z[i], family, &kc, norm, coef)
    return out


def kernel_block(const double[:, ::1] xa, const double[:, ::1] xb,
                 const double[::1] weights, double scale, int family,
                 double nu, double lognorm, double[::1] coef):
    """Dense block phi(x_a, x_b); ``weights`` are per-coordinate squared
    distance weights and ``scale`` multiplies the weighted distance."""
    cdef Py_ssize_t na = xa.shape[0], nb = xb.shape[0], d = xa.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s, diff
    out = np.empty((na, nb))
    cdef double[:, ::1] o = out
    cdef KCtx kc
    kctx_init(&kc, nu if family == MATERN else 1.0)
    cdef double norm = exp(lognorm)
    with nogil:
        for i in range(na):
            for j in range(nb):
                s = 0.0
                for k in range(d):
                    diff = xa[i, k] - xb[j, k]
                    s += weights[k] * diff * diff
                o[i, j] = _phi(scale * sqrt(s), family, &kc, norm, coef)
    return out


def kernel_block_sym(const double[:, ::1] x, const double[::1] weights, double scale,
                     int family, double nu, double lognorm, double[::1] coef):
    """Symmetric block phi(x, x): upper triangle evaluated, then mirrored."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s, diff, v
    out = np.empty((n, n))
    cdef double[:, ::1] o = out
    cdef KCtx kc
    kctx_init(&kc, nu if family == MATERN else 1.0)
    cdef double norm = exp(lognorm)
    with nogil:
        for i in range(n):
            o[i, i] = 1.0
            for j in range(i + 1, n):
                s = 0.0
                for k in range(d):
                    diff = x[i, k] - x[j, k]
                    s += weights[k] * diff * diff
                v = _phi(scale * sqrt(s), family, &kc, norm, coef)
                o[i, j] = v
                o[j, i] = v
    return out


def kernel_matvec(const double[:, ::1] x, const double[::1] v,
                  const double[::1] weights, double scale, int family,
                  double nu, double lognorm, double[::1] coef):
    """Direct summation of C v without storing C."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s, diff, acc
    out = np.empty(n)
    cdef double[::1] o = out
    cdef KCtx kc
    kctx_init(&kc, nu if family == MATERN else 1.0)
    cdef double norm = exp(lognorm)
    with nogil:
        for i in range(n):
            acc = 0.0
            for j in range(n):
                s = 0.0
                for k in range(d):
                    diff = x[i, k] - x[j, k]
                    s += weights[k] * diff * diff
                acc += _phi(scale * sqrt(s), family, &kc, norm, coef) * v[j]
            o[i] = acc
    return out


# ---------------------------------------------------------------- Cholesky

def etree(Py_ssize_t n, const cnp.int64_t[::1] Ap, const cnp.int64_t[::1] Ai):
    """Elimination tree of a symmetric matrix given in CSC form."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] par = parent, anc = ancestor
    cdef Py_ssize_t k, p
    cdef cnp.int64_t i, inext
    with nogil:
        for k in range(n):
            for p in range(Ap[k], Ap[k + 1]):
                i = Ai[p]
                while i != -1 and i < k:
                    inext = anc[i]
                    anc[i] = k
                    if inext == -1:
                        par[i] = k
                    i = inext
    return parent


cdef inline Py_ssize_t _ereach(Py_ssize_t n, Py_ssize_t k,
                               const cnp.int64_t[::1] Ap, const cnp.int64_t[::1] Ai,
                               const cnp.int64_t[::1] parent,
                               cnp.int64_t[::1] s, cnp.int64_t[::1] mark,
                               cnp.int64_t stamp) noexcept nogil:
    cdef Py_ssize_t top = n, length, p
    cdef cnp.int64_t i
    mark[k] = stamp
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while mark[i] != stamp:
            s[length] = i
            length += 1
            mark[i] = stamp
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


def column_counts(Py_ssize_t n, const cnp.int64_t[::1] Ap,
                  const cnp.int64_t[::1] Ai, const cnp.int64_t[::1] parent):
    """Nonzeros per column of the Cholesky factor (diagonal included)."""
    counts = np.ones(n, dtype=np.int64)
    s_arr = np.empty(n, dtype=np.int64)
    mark_arr = np.full(n, -1, dtype=np.int64)
    cdef cnp.int64_t[::1] cnt = counts, s = s_arr, mark = mark_arr
    cdef Py_ssize_t k, top
    with nogil:
        for k in range(n):
            top = _ereach(n, k, Ap, Ai, parent, s, mark, k)
            while top < n:
                cnt[s[top]] += 1
                top += 1
    return counts


def cholesky_numeric(Py_ssize_t n, const cnp.int64_t[::1] Ap,
                     const cnp.int64_t[::1] Ai, const double[::1] Ax,
                     const cnp.int64_t[::1] parent, const cnp.int64_t[::1] Lp):
    """Up-looking numeric factorization.

    Returns ``(Li, Lx, fail)`` where ``fail`` is -1 on success or the column
    whose pivot was not positive.
    """
    cdef Py_ssize_t nnz = Lp[n]
    Li_arr = np.zeros(nnz, dtype=np.int64)
    Lx_arr = np.zeros(nnz)
    x_arr = np.zeros(n)
    s_arr = np.empty(n, dtype=np.int64)
    mark_arr = np.full(n, -1, dtype=np.int64)
    c_arr = np.array(Lp[:n], dtype=np.int64)
    cdef cnp.int64_t[::1] Li = Li_arr, s = s_arr, mark = mark_arr, c = c_arr
    cdef double[::1] Lx = Lx_arr, x = x_arr
    cdef Py_ssize_t k, p, top, fail = -1
    cdef cnp.int64_t i
    cdef double d, lki
    with nogil:
        for k in range(n):
            top = _ereach(n, k, Ap, Ai, parent, s, mark, k)
            x[k] = 0.0
            for p in range(Ap[k], Ap[k + 1]):
                if Ai[p] <= k:
                    x[Ai[p]] = Ax[p]
            d = x[k]
            x[k] = 0.0
            while top < n:
                i = s[top]
                lki = x[i] / Lx[Lp[i]]
                x[i] = 0.0
                for p in range(Lp[i] + 1, c[i]):
                    x[Li[p]] -= Lx[p] * lki
                d -= lki * lki
                p = c[i]
                c[i] += 1
                Li[p] = k
                Lx[p] = lki
                top += 1
            if d <= 0.0 or not isfinite(d):
                fail = k
                break
            p = c[k]
            c[k] += 1
            Li[p] = k
            Lx[p] = sqrt(d)
    return Li_arr, Lx_arr, fail


def cholesky_solve(Py_ssize_t n, const cnp.int64_t[::1] Lp, const cnp.int64_t[::1] Li,
                   const double[::1] Lx, double[::1] x):
    """In-place ``x <- (L L^T)^{-1} x`` for a CSC factor, diagonal first."""
    cdef Py_ssize_t j, p
    cdef double xj, acc
    with nogil:
        for j in range(n):
            xj = x[j] / Lx[Lp[j]]
            x[j] = xj
            for p in range(Lp[j] + 1, Lp[j + 1]):
                x[Li[p]] -= Lx[p] * xj
        for j in range(n - 1, -1, -1):
            acc = x[j]
            for p in range(Lp[j] + 1, Lp[j + 1]):
                acc -= Lx[p] * x[Li[p]]
            x[j] = acc / Lx[Lp[j]]
