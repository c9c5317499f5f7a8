"""Pure-numpy reference implementations of the recurrent scan kernels.

These carry the normative step-by-step semantics; the compiled extension and
the batched chunk/parallel formulations are checked against them. All
functions update the state arrays in place and return the per-token outputs.
"""

from __future__ import annotations

import numpy as np

DENOM_EPS = 1e-6  # shared by every mode so they stay numerically comparable


def mlstm_scan(q, k, v, ig, fg, C, n, m, out):
    """Matrix-memory LSTM recurrence with stabilized exponential gating.

    q, k, v: (B, H, T, D); ig, fg: (B, H, T); state C: (B, H, D, D),
    n: (B, H, D), m: (B, H); out: (B, H, T, D). k must already carry its
    1/sqrt(D) scaling.
    """
    T = q.shape[2]
    for t in range(T):
        qt = q[:, :, t]
        kt = k[:, :, t]
        vt = v[:, :, t]
        m_new = np.maximum(fg[:, :, t] + m, ig[:, :, t])
        ia = np.exp(ig[:, :, t] - m_new)
        fa = np.exp(fg[:, :, t] + m - m_new)
        C *= fa[..., None, None]
        C += ia[..., None, None] * (kt[..., :, None] * vt[..., None, :])
        n *= fa[..., None]
        n += ia[..., None] * kt
        m[...] = m_new
        num = np.einsum("bhde,bhd->bhe", C, qt)
        dot = np.einsum("bhd,bhd->bh", n, qt)
        denom = np.maximum(np.abs(dot), np.exp(-m_new)) + DENOM_EPS
        out[:, :, t] = num / denom[..., None]
    return out


def mlstm_chunk(q, k, v, ig, fg, C, n, m, out):
    """One chunkwise-parallel pass over L tokens given a carried state.

    Same contract as running mlstm_scan over the chunk, but vectorized:
    intra-chunk terms via the masked quadratic form, inter-chunk terms via
    the carried (C, n, m). State is updated in place for continuation.
    """
    L = q.shape[2]
    b = np.cumsum(fg, axis=-1)
    a = ig - b
    u = np.maximum.accumulate(a, axis=-1)
    u = np.maximum(u, m[..., None])
    m_row = b + u  # equals the running stabilizer of the step recurrence
    expnt = a[..., None, :] - u[..., :, None]
    tril = np.tril(np.ones((L, L), dtype=bool))
    D = np.exp(np.where(tril, expnt, -np.inf))
    S = np.matmul(q, np.swapaxes(k, -1, -2)) * D
    decay = np.exp(m[..., None] - u)
    num = np.matmul(S, v) + decay[..., None] * np.matmul(q, C)
    ndot = S.sum(axis=-1) + decay * np.einsum("bhld,bhd->bhl", q, n)
    denom = np.maximum(np.abs(ndot), np.exp(-m_row)) + DENOM_EPS
    out[...] = num / denom[..., None]

    d_last = D[..., -1, :]
    decay_last = decay[..., -1]
    C *= decay_last[..., None, None]
    C += np.matmul(np.swapaxes(k * d_last[..., None], -1, -2), v)
    n *= decay_last[..., None]
    n += (k * d_last[..., None]).sum(axis=-2)
    m[...] = m_row[..., -1]
    return out


def slstm_scan(pre, R, h, c, n, m, out):
    """Scalar-cell LSTM recurrence with head-local recurrent weights.

    pre: (B, T, 4, H, D) gate preactivations from the input path, gate order
    (z, i, f, o); R: (H, 4, D, D) recurrent weights applied to the previous
    hidden state; state h, c, n, m: (B, H, D); out: (B, T, H, D).
    """
    T = pre.shape[1]
    for t in range(T):
        rec = np.einsum("hged,bhd->bhge", R, h)
        z = np.tanh(pre[:, t, 0] + rec[:, :, 0])
        it = pre[:, t, 1] + rec[:, :, 1]
        ft = pre[:, t, 2] + rec[:, :, 2]
        o = 1.0 / (1.0 + np.exp(-(pre[:, t, 3] + rec[:, :, 3])))
        m_new = np.maximum(ft + m, it)
        ia = np.exp(it - m_new)
        fa = np.exp(ft + m - m_new)
        c *= fa
        c += ia * z
        n *= fa
        n += ia
        m[...] = m_new
        h[...] = o * c / np.maximum(n, np.exp(-m_new))
        out[:, t] = h
    return out
