# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled scan kernels for the recurrent inference hot loops.

Same contracts as recact.kernels.py; selected at import time when available.
"""

import numpy as np

cimport cython
from libc.math cimport exp, fabs, fmax, tanh

DEF DENOM_EPS = 1e-6

ctypedef fused real:
    float
    double


def mlstm_scan(real[:, :, :, ::1] q, real[:, :, :, ::1] k, real[:, :, :, ::1] v,
               real[:, :, ::1] ig, real[:, :, ::1] fg,
               real[:, :, :, ::1] C, real[:, :, ::1] n, real[:, ::1] m,
               real[:, :, :, ::1] out):
    cdef Py_ssize_t B = q.shape[0], H = q.shape[1], T = q.shape[2], D = q.shape[3]
    cdef Py_ssize_t b, h, t, d, e
    cdef double m_prev, m_new, ia, fa, dot, den, acc, kd, qd
    for b in range(B):
        for h in range(H):
            m_prev = m[b, h]
            for t in range(T):
                m_new = fmax(fg[b, h, t] + m_prev, ig[b, h, t])
                ia = exp(ig[b, h, t] - m_new)
                fa = exp(fg[b, h, t] + m_prev - m_new)
                dot = 0.0
                for d in range(D):
                    kd = ia * k[b, h, t, d]
                    for e in range(D):
                        C[b, h, d, e] = fa * C[b, h, d, e] + kd * v[b, h, t, e]
                    n[b, h, d] = fa * n[b, h, d] + kd
                    dot += n[b, h, d] * q[b, h, t, d]
                den = fmax(fabs(dot), exp(-m_new)) + DENOM_EPS
                for e in range(D):
                    acc = 0.0
                    for d in range(D):
                        acc += C[b, h, d, e] * q[b, h, t, d]
                    out[b, h, t, e] = <real> (acc / den)
                m_prev = m_new
            m[b, h] = <real> m_prev
    return np.asarray(out)


def slstm_scan(real[:, :, :, :, ::1] pre, real[:, :, :, ::1] R,
               real[:, :, ::1] h, real[:, :, ::1] c,
               real[:, :, ::1] n, real[:, :, ::1] m,
               real[:, :, :, ::1] out):
    cdef Py_ssize_t B = pre.shape[0], T = pre.shape[1], H = pre.shape[3], D = pre.shape[4]
    cdef Py_ssize_t b, t, hh, d, e, g
    cdef double m_new, ia, fa, z, it, ft, o, den
    rec_arr = np.empty((4, D), dtype=np.asarray(pre).dtype)
    cdef real[:, ::1] rec = rec_arr
    cdef double acc
    for b in range(B):
        for t in range(T):
            for hh in range(H):
                for g in range(4):
                    for e in range(D):
                        acc = 0.0
                        for d in range(D):
                            acc += R[hh, g, e, d] * h[b, hh, d]
                        rec[g, e] = <real> acc
                for d in range(D):
                    z = tanh(pre[b, t, 0, hh, d] + rec[0, d])
                    it = pre[b, t, 1, hh, d] + rec[1, d]
                    ft = pre[b, t, 2, hh, d] + rec[2, d]
                    o = 1.0 / (1.0 + exp(-(pre[b, t, 3, hh, d] + rec[3, d])))
                    m_new = fmax(ft + m[b, hh, d], it)
                    ia = exp(it - m_new)
                    fa = exp(ft + m[b, hh, d] - m_new)
                    c[b, hh, d] = fa * c[b, hh, d] + ia * z
                    n[b, hh, d] = fa * n[b, hh, d] + ia
                    m[b, hh, d] = <real> m_new
                    den = fmax(n[b, hh, d], exp(-m_new))
                    out[b, t, hh, d] = <real> (o * c[b, hh, d] / den)
                for d in range(D):
                    h[b, hh, d] = out[b, t, hh, d]
    return np.asarray(out)
