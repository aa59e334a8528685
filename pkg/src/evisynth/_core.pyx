# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled numerical core: link transforms and log-density reductions.

These are the kernels the sampler hits ~10^6 times per fit. Each function
has a matching implementation in ``_core_py`` (numpy fallback); the two are
held to ~1e-12 relative agreement by the kernel parity tests. Reductions run
in strict index order. CSR-style arguments follow the usual convention:
row r spans [indptr[r], indptr[r+1]) and rows must be non-empty.
"""

from libc.math cimport exp, log, log1p, INFINITY

cdef double LOG_2PI = 1.8378770664093454836


cpdef void expit_into(const double[::1] x, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v, e
    for i in range(n):
        v = x[i]
        if v >= 0.0:
            out[i] = 1.0 / (1.0 + exp(-v))
        else:
            e = exp(v)
            out[i] = e / (1.0 + e)


cpdef void logit_into(const double[::1] p, double[::1] out):
    # guarded form: p <= 0 -> -inf, p >= 1 -> +inf
    cdef Py_ssize_t i, n = p.shape[0]
    cdef double v
    for i in range(n):
        v = p[i]
        if v <= 0.0:
            out[i] = -INFINITY
        elif v >= 1.0:
            out[i] = INFINITY
        else:
            out[i] = log(v) - log1p(-v)


cpdef void softplus_into(const double[::1] x, double[::1] out):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double v
    for i in range(n):
        v = x[i]
        if v > 0.0:
            out[i] = v + log1p(exp(-v))
        else:
            out[i] = log1p(exp(v))


cpdef void softmax_rows(double[::1] vals, const long long[::1] indptr):
    # in place: each CSR row of logits becomes a probability simplex
    cdef Py_ssize_t r, i, lo, hi, nrows = indptr.shape[0] - 1
    cdef double m, s
    for r in range(nrows):
        lo = indptr[r]
        hi = indptr[r + 1]
        m = vals[lo]
        for i in range(lo + 1, hi):
            if vals[i] > m:
                m = vals[i]
        s = 0.0
        for i in range(lo, hi):
            vals[i] = exp(vals[i] - m)
            s += vals[i]
        for i in range(lo, hi):
            vals[i] = vals[i] / s


cpdef double binom_sum_p(const double[::1] y, const double[::1] n, const double[::1] p):
    # sum of y*log(p) + (n-y)*log(1-p); combinatorial constants excluded
    # (added once per dataset from precomputed values). 0*log(0) = 0.
    cdef Py_ssize_t i, m = y.shape[0]
    cdef double tot = 0.0, yi, ni, pi
    for i in range(m):
        yi = y[i]
        ni = n[i]
        pi = p[i]
        if yi > 0.0:
            tot += yi * log(pi)
        if ni - yi > 0.0:
            tot += (ni - yi) * log1p(-pi)
    return tot


cpdef double binom_sum_logit(const double[::1] y, const double[::1] n, const double[::1] eta):
    # same likelihood with p = expit(eta): y*eta - n*softplus(eta), arranged
    # so eta = +/-inf yields -inf only for genuinely impossible data
    cdef Py_ssize_t i, m = y.shape[0]
    cdef double tot = 0.0, e
    for i in range(m):
        e = eta[i]
        if e > 0.0:
            if n[i] - y[i] > 0.0:
                tot -= (n[i] - y[i]) * e
            tot -= n[i] * log1p(exp(-e))
        else:
            if y[i] > 0.0:
                tot += y[i] * e
            tot -= n[i] * log1p(exp(e))
    return tot


cpdef double poisson_sum(const double[::1] d, const double[::1] lam):
    # sum of d*log(lam) - lam; -log(d!) constants excluded; 0*log(0) = 0
    cdef Py_ssize_t i, m = d.shape[0]
    cdef double tot = 0.0
    for i in range(m):
        if d[i] > 0.0:
            tot += d[i] * log(lam[i])
        tot -= lam[i]
    return tot


cpdef double normal_sum(const double[::1] x, const double[::1] mu, const double[::1] sd):
    cdef Py_ssize_t i, m = x.shape[0]
    cdef double tot = 0.0, z
    for i in range(m):
        z = (x[i] - mu[i]) / sd[i]
        tot += -0.5 * z * z - log(sd[i])
    return tot - 0.5 * LOG_2PI * m


cpdef void csr_weighted_sum(const double[::1] vals, const double[::1] wts,
                            const long long[::1] indptr, double[::1] out):
    cdef Py_ssize_t r, i, nrows = indptr.shape[0] - 1
    cdef double s
    for r in range(nrows):
        s = 0.0
        for i in range(indptr[r], indptr[r + 1]):
            s += vals[i] * wts[i]
        out[r] = s


cpdef void csr_gather_sum(const double[::1] arr, const long long[::1] idx,
                          const long long[::1] indptr, double[::1] out):
    # out[r] = sum of arr[idx[k]] over the r-th CSR row
    cdef Py_ssize_t r, i, nrows = indptr.shape[0] - 1
    cdef double s
    for r in range(nrows):
        s = 0.0
        for i in range(indptr[r], indptr[r + 1]):
            s += arr[idx[i]]
        out[r] = s


cpdef double sum_arr(const double[::1] x):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef double tot = 0.0
    for i in range(n):
        tot += x[i]
    return tot


cpdef void scatter_add(const long long[::1] idx, const double[::1] src,
                       double[::1] out):
    # out[idx[k]] += src[k]; repeated indices accumulate
    cdef Py_ssize_t k, n = idx.shape[0]
    for k in range(n):
        out[idx[k]] += src[k]


cpdef void csr_scatter_add(const double[::1] row_grad, const long long[::1] idx,
                           const long long[::1] indptr, double[::1] out):
    # adjoint of csr_gather_sum: out[idx[k]] += row_grad[r] for k in row r
    cdef Py_ssize_t r, i, nrows = indptr.shape[0] - 1
    cdef double g
    for r in range(nrows):
        g = row_grad[r]
        for i in range(indptr[r], indptr[r + 1]):
            out[idx[i]] += g


cpdef void softmax_rows_backward(const double[::1] p, const double[::1] dp,
                                 const long long[::1] indptr, double[::1] dv):
    # adjoint of softmax_rows: dv = p * (dp - sum_row(p * dp))
    cdef Py_ssize_t r, i, nrows = indptr.shape[0] - 1
    cdef double s
    for r in range(nrows):
        s = 0.0
        for i in range(indptr[r], indptr[r + 1]):
            s += p[i] * dp[i]
        for i in range(indptr[r], indptr[r + 1]):
            dv[i] = p[i] * (dp[i] - s)
