# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; same signatures and results as ``_pykernels``."""

import numpy as np

from libc.math cimport tanh, exp
from libc.stdlib cimport malloc, free

cdef int ACT_TANH = 0
cdef int ACT_SQUARE = 1


cdef inline double _f(double u, int act) noexcept nogil:
    if act == 0:
        return tanh(u)
    return u * u


cdef void _pair_row(const double *W1T, const double *b1, const double *W2,
                    const double *fcol, const double *f0, const long long *counts,
                    const long long *offsets, Py_ssize_t n_feat, Py_ssize_t H, Py_ssize_t K,
                    Py_ssize_t E, int act, Py_ssize_t i, Py_ssize_t col,
                    double *ua, double *g, double *out) noexcept nogil:
    cdef Py_ssize_t j, alpha, beta, a, b, h, l, ni = counts[i], nj
    cdef const double *wb
    cdef const double *fa
    cdef const double *fb
    cdef const double *w2
    cdef double acc
    for j in range(i + 1, n_feat):
        nj = counts[j]
        for alpha in range(ni):
            a = offsets[i] + alpha
            fa = fcol + a * H
            for h in range(H):
                ua[h] = W1T[a * H + h] + b1[h]
            for beta in range(nj):
                b = offsets[j] + beta
                wb = W1T + b * H
                fb = fcol + b * H
                if act == 0:
                    for h in range(H):
                        g[h] = tanh(ua[h] + wb[h]) - fa[h] - fb[h] + f0[h]
                else:
                    for h in range(H):
                        g[h] = (ua[h] + wb[h]) * (ua[h] + wb[h]) - fa[h] - fb[h] + f0[h]
                for l in range(K):
                    w2 = W2 + l * H
                    acc = 0.0
                    for h in range(H):
                        acc = acc + w2[h] * g[h]
                    out[l * E + col + alpha * nj + beta] = acc
        col += ni * nj


def pair_coefficients(const double[:, ::1] W1T, const double[::1] b1, const double[:, ::1] W2,
                      const long long[::1] counts, const long long[::1] pair_row_start,
                      int act, Py_ssize_t feature_lo, Py_ssize_t feature_hi,
                      double[:, ::1] out):
    cdef Py_ssize_t n_feat = counts.shape[0]
    cdef Py_ssize_t D = W1T.shape[0]
    cdef Py_ssize_t H = W1T.shape[1]
    cdef Py_ssize_t K = W2.shape[0]
    cdef Py_ssize_t E = out.shape[1]
    cdef Py_ssize_t i, a, h
    cdef double[::1] f0 = np.empty(H)
    cdef double[:, ::1] fcol = np.empty((D, H))
    cdef double[::1] ua = np.empty(H)
    cdef double[::1] g = np.empty(H)
    cdef long long[::1] offsets = np.zeros(n_feat + 1, dtype=np.int64)

    for i in range(n_feat):
        offsets[i + 1] = offsets[i] + counts[i]
    if feature_hi > n_feat - 1:
        feature_hi = n_feat - 1
    if feature_lo >= feature_hi or H == 0:
        return  # caller zero-fills

    with nogil:
        for h in range(H):
            f0[h] = _f(b1[h], act)
        for a in range(D):
            for h in range(H):
                fcol[a, h] = _f(W1T[a, h] + b1[h], act)
        for i in range(feature_lo, feature_hi):
            _pair_row(&W1T[0, 0], &b1[0], &W2[0, 0], &fcol[0, 0], &f0[0], &counts[0],
                      &offsets[0], n_feat, H, K, E, act, i, pair_row_start[i],
                      &ua[0], &g[0], &out[0, 0])


def gibbs_run(long long[::1] state, const double[:, ::1] h, const double[:, :, :, ::1] J,
              const long long[:, ::1] tri_sites, const double[:, :, :, ::1] tri_J,
              const double[:, ::1] uniforms, Py_ssize_t burn_in, Py_ssize_t thin,
              long long[:, ::1] out):
    cdef Py_ssize_t L = h.shape[0]
    cdef Py_ssize_t q = h.shape[1]
    cdef Py_ssize_t n_tri = tri_sites.shape[0]
    cdef Py_ssize_t total = burn_in + out.shape[0] * thin
    cdef Py_ssize_t sweep = 0, row = 0, i, j, a, t
    cdef double emax, target, acc
    cdef double *e = <double *> malloc(q * sizeof(double))
    cdef double *cdf = <double *> malloc(q * sizeof(double))
    if e == NULL or cdf == NULL:
        free(e)
        free(cdf)
        raise MemoryError()
    try:
        with nogil:
            while sweep < total:
                for i in range(L):
                    for a in range(q):
                        acc = 0.0
                        for j in range(L):
                            acc = acc + J[i, j, a, state[j]]
                        e[a] = h[i, a] + acc
                    for t in range(n_tri):
                        if tri_sites[t, 0] == i:
                            for a in range(q):
                                e[a] = e[a] + tri_J[t, a, state[tri_sites[t, 1]], state[tri_sites[t, 2]]]
                        elif tri_sites[t, 1] == i:
                            for a in range(q):
                                e[a] = e[a] + tri_J[t, state[tri_sites[t, 0]], a, state[tri_sites[t, 2]]]
                        elif tri_sites[t, 2] == i:
                            for a in range(q):
                                e[a] = e[a] + tri_J[t, state[tri_sites[t, 0]], state[tri_sites[t, 1]], a]
                    emax = e[0]
                    for a in range(1, q):
                        if e[a] > emax:
                            emax = e[a]
                    acc = 0.0
                    for a in range(q):
                        acc = acc + exp(e[a] - emax)
                        cdf[a] = acc
                    target = uniforms[sweep, i] * cdf[q - 1]
                    state[i] = q - 1
                    for a in range(q):
                        if cdf[a] > target:
                            state[i] = a
                            break
                sweep += 1
                if sweep > burn_in and (sweep - burn_in) % thin == 0:
                    for j in range(L):
                        out[row, j] = state[j]
                    row += 1
    finally:
        free(e)
        free(cdf)


def _match_cutoff(Py_ssize_t L, double threshold):
    # smallest match count c with c / L > threshold, in exact IEEE division
    for c in range(L + 1):
        if c / L > threshold:
            return c
    return L + 1


def identity_counts(seqs, double threshold, Py_ssize_t block=512):
    cdef const long long[:, ::1] s = np.ascontiguousarray(seqs, dtype=np.int64)
    cdef Py_ssize_t m = s.shape[0]
    cdef Py_ssize_t L = s.shape[1]
    cdef Py_ssize_t x, y, p, matches
    cdef Py_ssize_t cutoff = _match_cutoff(L, threshold)
    counts_arr = np.ones(m, dtype=np.int64)
    cdef long long[::1] counts = counts_arr
    with nogil:
        for x in range(m):
            for y in range(x + 1, m):
                matches = 0
                for p in range(L):
                    if s[x, p] == s[y, p]:
                        matches = matches + 1
                if matches >= cutoff:
                    counts[x] += 1
                    counts[y] += 1
    return counts_arr
