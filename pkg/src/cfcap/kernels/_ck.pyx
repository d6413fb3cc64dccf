# cython: language_level=3
"""Compiled kernels; signature-identical to the numpy fallback in pyk.py.

Plain C loops beat numpy here because every tensor is small (dh=16, N=25,
V~40): per-call overhead dominates, not flops. float64 throughout.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log, sqrt, tanh

cnp.import_array()


def causal_attn_fwd(double[:, :, :, ::1] q, double[:, :, :, ::1] k,
                    double[:, :, :, ::1] v):
    cdef Py_ssize_t B = q.shape[0], nh = q.shape[1], T = q.shape[2], dh = q.shape[3]
    cdef double scale = 1.0 / sqrt(<double> dh)
    out_arr = np.zeros((B, nh, T, dh), dtype=np.float64)
    probs_arr = np.zeros((B, nh, T, T), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef double[:, :, :, ::1] probs = probs_arr
    cdef Py_ssize_t b, h, i, j, d
    cdef double s, m, z, p
    with nogil:
        for b in range(B):
            for h in range(nh):
                for i in range(T):
                    m = -1e300
                    for j in range(i + 1):
                        s = 0.0
                        for d in range(dh):
                            s += q[b, h, i, d] * k[b, h, j, d]
                        s *= scale
                        probs[b, h, i, j] = s
                        if s > m:
                            m = s
                    z = 0.0
                    for j in range(i + 1):
                        p = exp(probs[b, h, i, j] - m)
                        probs[b, h, i, j] = p
                        z += p
                    for j in range(i + 1):
                        probs[b, h, i, j] /= z
                        p = probs[b, h, i, j]
                        for d in range(dh):
                            out[b, h, i, d] += p * v[b, h, j, d]
    return out_arr, probs_arr


def causal_attn_bwd(double[:, :, :, ::1] q, double[:, :, :, ::1] k,
                    double[:, :, :, ::1] v, double[:, :, :, ::1] probs,
                    double[:, :, :, ::1] d_out):
    cdef Py_ssize_t B = q.shape[0], nh = q.shape[1], T = q.shape[2], dh = q.shape[3]
    cdef double scale = 1.0 / sqrt(<double> dh)
    dq_arr = np.zeros((B, nh, T, dh), dtype=np.float64)
    dk_arr = np.zeros((B, nh, T, dh), dtype=np.float64)
    dv_arr = np.zeros((B, nh, T, dh), dtype=np.float64)
    dsc_arr = np.zeros((T,), dtype=np.float64)
    cdef double[:, :, :, ::1] dq = dq_arr, dk = dk_arr, dv = dv_arr
    cdef double[::1] dsc = dsc_arr
    cdef Py_ssize_t b, h, i, j, d
    cdef double dp, inner, g
    with nogil:
        for b in range(B):
            for h in range(nh):
                for i in range(T):
                    inner = 0.0
                    for j in range(i + 1):
                        dp = 0.0
                        for d in range(dh):
                            dp += d_out[b, h, i, d] * v[b, h, j, d]
                        dsc[j] = dp
                        inner += dp * probs[b, h, i, j]
                    for j in range(i + 1):
                        g = probs[b, h, i, j] * (dsc[j] - inner)
                        for d in range(dh):
                            dv[b, h, j, d] += probs[b, h, i, j] * d_out[b, h, i, d]
                            dq[b, h, i, d] += g * k[b, h, j, d] * scale
                            dk[b, h, j, d] += g * q[b, h, i, d] * scale
    return dq_arr, dk_arr, dv_arr


def attn_last_fwd(double[:, :, ::1] q, double[:, :, :, ::1] k,
                  double[:, :, :, ::1] v):
    cdef Py_ssize_t R = q.shape[0], nh = q.shape[1], dh = q.shape[2], T = k.shape[2]
    cdef double scale = 1.0 / sqrt(<double> dh)
    out_arr = np.zeros((R, nh, dh), dtype=np.float64)
    sc_arr = np.zeros((T,), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[::1] sc = sc_arr
    cdef Py_ssize_t r, h, j, d
    cdef double s, m, z, p
    with nogil:
        for r in range(R):
            for h in range(nh):
                m = -1e300
                for j in range(T):
                    s = 0.0
                    for d in range(dh):
                        s += q[r, h, d] * k[r, h, j, d]
                    s *= scale
                    sc[j] = s
                    if s > m:
                        m = s
                z = 0.0
                for j in range(T):
                    p = exp(sc[j] - m)
                    sc[j] = p
                    z += p
                for j in range(T):
                    p = sc[j] / z
                    for d in range(dh):
                        out[r, h, d] += p * v[r, h, j, d]
    return out_arr


def additive_attn_fwd(double[:, :, ::1] hu, double[:, :, ::1] cw,
                      double[::1] va):
    cdef Py_ssize_t B = hu.shape[0], T = hu.shape[1], Da = hu.shape[2], N = cw.shape[1]
    probs_arr = np.zeros((B, T, N), dtype=np.float64)
    th_arr = np.zeros((B, T, N, Da), dtype=np.float64)
    cdef double[:, :, ::1] probs = probs_arr
    cdef double[:, :, :, ::1] th = th_arr
    cdef Py_ssize_t b, t, n, a
    cdef double s, m, z, x
    with nogil:
        for b in range(B):
            for t in range(T):
                m = -1e300
                for n in range(N):
                    s = 0.0
                    for a in range(Da):
                        x = tanh(hu[b, t, a] + cw[b, n, a])
                        th[b, t, n, a] = x
                        s += x * va[a]
                    probs[b, t, n] = s
                    if s > m:
                        m = s
                z = 0.0
                for n in range(N):
                    s = exp(probs[b, t, n] - m)
                    probs[b, t, n] = s
                    z += s
                for n in range(N):
                    probs[b, t, n] /= z
    return probs_arr, th_arr


def additive_attn_probs(double[:, :, ::1] hu, double[:, :, ::1] cw,
                        double[::1] va):
    cdef Py_ssize_t B = hu.shape[0], T = hu.shape[1], Da = hu.shape[2], N = cw.shape[1]
    probs_arr = np.zeros((B, T, N), dtype=np.float64)
    cdef double[:, :, ::1] probs = probs_arr
    cdef Py_ssize_t b, t, n, a
    cdef double s, m, z
    with nogil:
        for b in range(B):
            for t in range(T):
                m = -1e300
                for n in range(N):
                    s = 0.0
                    for a in range(Da):
                        s += tanh(hu[b, t, a] + cw[b, n, a]) * va[a]
                    probs[b, t, n] = s
                    if s > m:
                        m = s
                z = 0.0
                for n in range(N):
                    s = exp(probs[b, t, n] - m)
                    probs[b, t, n] = s
                    z += s
                for n in range(N):
                    probs[b, t, n] /= z
    return probs_arr


def additive_attn_bwd(double[:, :, ::1] probs, double[:, :, :, ::1] th,
                      double[::1] va, double[:, :, ::1] dprobs):
    cdef Py_ssize_t B = probs.shape[0], T = probs.shape[1], N = probs.shape[2], Da = th.shape[3]
    dhu_arr = np.zeros((B, T, Da), dtype=np.float64)
    dcw_arr = np.zeros((B, N, Da), dtype=np.float64)
    dva_arr = np.zeros((Da,), dtype=np.float64)
    cdef double[:, :, ::1] dhu = dhu_arr
    cdef double[:, :, ::1] dcw = dcw_arr
    cdef double[::1] dva = dva_arr
    cdef Py_ssize_t b, t, n, a
    cdef double inner, ds, g, x
    with nogil:
        for b in range(B):
            for t in range(T):
                inner = 0.0
                for n in range(N):
                    inner += dprobs[b, t, n] * probs[b, t, n]
                for n in range(N):
                    ds = probs[b, t, n] * (dprobs[b, t, n] - inner)
                    for a in range(Da):
                        x = th[b, t, n, a]
                        dva[a] += x * ds
                        g = ds * va[a] * (1.0 - x * x)
                        dhu[b, t, a] += g
                        dcw[b, n, a] += g
    return dhu_arr, dcw_arr, dva_arr


def log_softmax_fwd(double[:, ::1] logits):
    cdef Py_ssize_t R = logits.shape[0], V = logits.shape[1]
    out_arr = np.zeros((R, V), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, j
    cdef double m, z
    with nogil:
        for r in range(R):
            m = logits[r, 0]
            for j in range(1, V):
                if logits[r, j] > m:
                    m = logits[r, j]
            z = 0.0
            for j in range(V):
                z += exp(logits[r, j] - m)
            z = log(z)
            for j in range(V):
                out[r, j] = logits[r, j] - m - z
    return out_arr


def log_softmax_bwd(double[:, ::1] logp, double[:, ::1] dlogp):
    cdef Py_ssize_t R = logp.shape[0], V = logp.shape[1]
    out_arr = np.zeros((R, V), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t r, j
    cdef double s
    with nogil:
        for r in range(R):
            s = 0.0
            for j in range(V):
                s += dlogp[r, j]
            for j in range(V):
                out[r, j] = dlogp[r, j] - exp(logp[r, j]) * s
    return out_arr
