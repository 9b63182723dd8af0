# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled recurrent hot kernels.

Drop-in twin of ``_kernels_py``; see that module for the math. Loops are
plain C over contiguous float64 buffers, no OpenMP, so results are
deterministic run to run.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, tanh

cnp.import_array()

BACKEND = "cython"


cdef inline double _sigmoid(double x) nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


def bmv(w, v):
    cdef const double[:, :, ::1] W = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef Py_ssize_t B = W.shape[0], R = W.shape[1], C = W.shape[2]
    out = np.empty((B, R), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef Py_ssize_t b, i, j
    cdef double acc
    with nogil:
        for b in range(B):
            for i in range(R):
                acc = 0.0
                for j in range(C):
                    acc = acc + W[b, i, j] * V[b, j]
                O[b, i] = acc
    return out


def bmv_backward(w, v, g):
    cdef const double[:, :, ::1] W = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, ::1] V = np.ascontiguousarray(v, dtype=np.float64)
    cdef const double[:, ::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef Py_ssize_t B = W.shape[0], R = W.shape[1], C = W.shape[2]
    gw = np.empty((B, R, C), dtype=np.float64)
    gv = np.zeros((B, C), dtype=np.float64)
    cdef double[:, :, ::1] GW = gw
    cdef double[:, ::1] GV = gv
    cdef Py_ssize_t b, i, j
    cdef double gi
    with nogil:
        for b in range(B):
            for i in range(R):
                gi = G[b, i]
                for j in range(C):
                    GW[b, i, j] = gi * V[b, j]
                    GV[b, j] = GV[b, j] + gi * W[b, i, j]
    return gw, gv


def gru_gates_forward(a, hb, s_prev):
    cdef const double[:, ::1] A = np.ascontiguousarray(a, dtype=np.float64)
    cdef const double[:, ::1] H = np.ascontiguousarray(hb, dtype=np.float64)
    cdef const double[:, ::1] S = np.ascontiguousarray(s_prev, dtype=np.float64)
    cdef Py_ssize_t B = S.shape[0], d = S.shape[1]
    s = np.empty((B, d), dtype=np.float64)
    r = np.empty((B, d), dtype=np.float64)
    z = np.empty((B, d), dtype=np.float64)
    n = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] So = s, Ro = r, Zo = z, No = n
    cdef Py_ssize_t b, j
    cdef double rr, zz, nn
    with nogil:
        for b in range(B):
            for j in range(d):
                rr = _sigmoid(A[b, j] + H[b, j])
                zz = _sigmoid(A[b, d + j] + H[b, d + j])
                nn = tanh(A[b, 2 * d + j] + rr * H[b, 2 * d + j])
                Ro[b, j] = rr
                Zo[b, j] = zz
                No[b, j] = nn
                So[b, j] = (1.0 - zz) * nn + zz * S[b, j]
    return s, r, z, n


def gru_gates_backward(gs, hb, s_prev, r, z, n):
    cdef const double[:, ::1] GS = np.ascontiguousarray(gs, dtype=np.float64)
    cdef const double[:, ::1] H = np.ascontiguousarray(hb, dtype=np.float64)
    cdef const double[:, ::1] S = np.ascontiguousarray(s_prev, dtype=np.float64)
    cdef const double[:, ::1] R = np.ascontiguousarray(r, dtype=np.float64)
    cdef const double[:, ::1] Z = np.ascontiguousarray(z, dtype=np.float64)
    cdef const double[:, ::1] N = np.ascontiguousarray(n, dtype=np.float64)
    cdef Py_ssize_t B = S.shape[0], d = S.shape[1]
    ga = np.empty((B, 3 * d), dtype=np.float64)
    ghb = np.empty((B, 3 * d), dtype=np.float64)
    gsp = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] GA = ga, GH = ghb, GP = gsp
    cdef Py_ssize_t b, j
    cdef double g, rr, zz, nn, gn, gz, gr
    with nogil:
        for b in range(B):
            for j in range(d):
                g = GS[b, j]
                rr = R[b, j]
                zz = Z[b, j]
                nn = N[b, j]
                gn = g * (1.0 - zz) * (1.0 - nn * nn)
                gz = g * (S[b, j] - nn) * zz * (1.0 - zz)
                gr = gn * H[b, 2 * d + j] * rr * (1.0 - rr)
                GA[b, j] = gr
                GA[b, d + j] = gz
                GA[b, 2 * d + j] = gn
                GH[b, j] = gr
                GH[b, d + j] = gz
                GH[b, 2 * d + j] = gn * rr
                GP[b, j] = g * zz
    return ga, ghb, gsp


def lstm_gates_forward(pre, c_prev):
    cdef const double[:, ::1] P = np.ascontiguousarray(pre, dtype=np.float64)
    cdef const double[:, ::1] C = np.ascontiguousarray(c_prev, dtype=np.float64)
    cdef Py_ssize_t B = C.shape[0], d = C.shape[1]
    h = np.empty((B, d), dtype=np.float64)
    c = np.empty((B, d), dtype=np.float64)
    i = np.empty((B, d), dtype=np.float64)
    f = np.empty((B, d), dtype=np.float64)
    g = np.empty((B, d), dtype=np.float64)
    o = np.empty((B, d), dtype=np.float64)
    tc = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] Ho = h, Co = c, Io = i, Fo = f, Go = g, Oo = o, Tc = tc
    cdef Py_ssize_t b, j
    cdef double ii, ff, gg, oo, cc, tt
    with nogil:
        for b in range(B):
            for j in range(d):
                ii = _sigmoid(P[b, j])
                ff = _sigmoid(P[b, d + j])
                gg = tanh(P[b, 2 * d + j])
                oo = _sigmoid(P[b, 3 * d + j])
                cc = ff * C[b, j] + ii * gg
                tt = tanh(cc)
                Io[b, j] = ii
                Fo[b, j] = ff
                Go[b, j] = gg
                Oo[b, j] = oo
                Co[b, j] = cc
                Tc[b, j] = tt
                Ho[b, j] = oo * tt
    return h, c, i, f, g, o, tc


def lstm_gates_backward(gh, gc, c_prev, i, f, g, o, tc):
    cdef const double[:, ::1] GHh = np.ascontiguousarray(gh, dtype=np.float64)
    cdef const double[:, ::1] GCc = np.ascontiguousarray(gc, dtype=np.float64)
    cdef const double[:, ::1] C = np.ascontiguousarray(c_prev, dtype=np.float64)
    cdef const double[:, ::1] I = np.ascontiguousarray(i, dtype=np.float64)
    cdef const double[:, ::1] F = np.ascontiguousarray(f, dtype=np.float64)
    cdef const double[:, ::1] G = np.ascontiguousarray(g, dtype=np.float64)
    cdef const double[:, ::1] O = np.ascontiguousarray(o, dtype=np.float64)
    cdef const double[:, ::1] TC = np.ascontiguousarray(tc, dtype=np.float64)
    cdef Py_ssize_t B = C.shape[0], d = C.shape[1]
    gpre = np.empty((B, 4 * d), dtype=np.float64)
    gcp = np.empty((B, d), dtype=np.float64)
    cdef double[:, ::1] GP = gpre, GCP = gcp
    cdef Py_ssize_t b, j
    cdef double gct, ii, ff, gg, oo, tt, hh
    with nogil:
        for b in range(B):
            for j in range(d):
                ii = I[b, j]
                ff = F[b, j]
                gg = G[b, j]
                oo = O[b, j]
                tt = TC[b, j]
                hh = GHh[b, j]
                gct = GCc[b, j] + hh * oo * (1.0 - tt * tt)
                GP[b, j] = gct * gg * ii * (1.0 - ii)
                GP[b, d + j] = gct * C[b, j] * ff * (1.0 - ff)
                GP[b, 2 * d + j] = gct * ii * (1.0 - gg * gg)
                GP[b, 3 * d + j] = hh * tt * oo * (1.0 - oo)
                GCP[b, j] = gct * ff
    return gpre, gcp
