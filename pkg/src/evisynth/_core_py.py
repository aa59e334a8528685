"""Pure-python (numpy) fallback for the compiled numerical core.

Mirrors every kernel in ``_core.pyx``. Vectorized numpy differs from the
sequential C loops in summation order and SIMD transcendentals, so results
agree with the compiled core to ~1e-12 relative rather than bit-for-bit;
each backend on its own is fully deterministic.
"""

import numpy as np

LOG_2PI = 1.8378770664093454836


def expit_into(x, out):
    np.negative(np.abs(x), out=out)
    np.exp(out, out=out)
    pos = x >= 0
    np.divide(out, 1.0 + out, out=out)
    np.subtract(1.0, out, out=out, where=pos)


def logit_into(p, out):
    with np.errstate(divide="ignore"):
        np.log(p, out=out, where=p > 0)
    out[p <= 0] = -np.inf
    hi = p >= 1
    out[hi] = np.inf
    ok = ~hi & (p > 0)
    out[ok] -= np.log1p(-p[ok])


def softplus_into(x, out):
    np.negative(np.abs(x), out=out)
    np.exp(out, out=out)
    np.log1p(out, out=out)
    np.add(out, x, out=out, where=x > 0)


def softmax_rows(vals, indptr):
    starts = indptr[:-1]
    vals -= np.repeat(np.maximum.reduceat(vals, starts), np.diff(indptr))
    np.exp(vals, out=vals)
    vals /= np.repeat(np.add.reduceat(vals, starts), np.diff(indptr))


def binom_sum_p(y, n, p):
    tot = 0.0
    pos = y > 0.0
    if pos.any():
        with np.errstate(divide="ignore"):
            tot += float(np.sum(y[pos] * np.log(p[pos])))
    rest = (n - y) > 0.0
    if rest.any():
        with np.errstate(divide="ignore"):
            tot += float(np.sum((n[rest] - y[rest]) * np.log1p(-p[rest])))
    return tot


def binom_sum_logit(y, n, eta):
    tot = 0.0
    pos = eta > 0.0
    if pos.any():
        e = eta[pos]
        rest = n[pos] - y[pos]
        m = rest > 0.0
        if m.any():
            tot -= float(np.sum(rest[m] * e[m]))
        tot -= float(np.sum(n[pos] * np.log1p(np.exp(-e))))
    neg = ~pos
    if neg.any():
        e = eta[neg]
        yy = y[neg]
        m = yy > 0.0
        if m.any():
            tot += float(np.sum(yy[m] * e[m]))
        tot -= float(np.sum(n[neg] * np.log1p(np.exp(e))))
    return tot


def poisson_sum(d, lam):
    tot = -float(np.sum(lam))
    pos = d > 0.0
    if pos.any():
        with np.errstate(divide="ignore"):
            tot += float(np.sum(d[pos] * np.log(lam[pos])))
    return tot


def normal_sum(x, mu, sd):
    z = (x - mu) / sd
    return float(np.sum(-0.5 * z * z - np.log(sd))) - 0.5 * LOG_2PI * x.shape[0]


def csr_weighted_sum(vals, wts, indptr, out):
    out[:] = np.add.reduceat(vals * wts, indptr[:-1])


def csr_gather_sum(arr, idx, indptr, out):
    out[:] = np.add.reduceat(arr[idx], indptr[:-1])


def scatter_add(idx, src, out):
    np.add.at(out, idx, src)


def csr_scatter_add(row_grad, idx, indptr, out):
    np.add.at(out, idx, np.repeat(row_grad, np.diff(indptr)))


def softmax_rows_backward(p, dp, indptr, dv):
    s = np.add.reduceat(p * dp, indptr[:-1])
    dv[:] = p * (dp - np.repeat(s, np.diff(indptr)))


def sum_arr(x):
    return float(np.sum(x))
