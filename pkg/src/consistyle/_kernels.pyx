# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels for the per-channel statistics and patch matching.

Reductions run index-ascending with double accumulators; ``setup.py``
disables FMA contraction so results equal ``_kernels_py`` bit for bit.
"""
import numpy as np
from libc.math cimport sqrt

NAME = "compiled"


cdef void _stats(const float[:, ::1] x, double[::1] mean, double[::1] std) noexcept nogil:
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], p, c
    cdef double dev
    for c in range(d):
        mean[c] = 0.0
        std[c] = 0.0
    for p in range(n):
        for c in range(d):
            mean[c] += x[p, c]
    for c in range(d):
        mean[c] = mean[c] / n
    for p in range(n):
        for c in range(d):
            dev = x[p, c] - mean[c]
            std[c] += dev * dev
    for c in range(d):
        std[c] = sqrt(std[c] / n)


def channel_stats(x):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    mean = np.empty(xv.shape[1], dtype=np.float64)
    std = np.empty(xv.shape[1], dtype=np.float64)
    cdef double[::1] mv = mean, sv = std
    with nogil:
        _stats(xv, mv, sv)
    return mean, std


def adain(x, y, double eps):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef const float[:, ::1] yv = np.ascontiguousarray(y, dtype=np.float32)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], p, c
    cdef double[::1] mx = np.empty(d), sx = np.empty(d)
    cdef double[::1] my = np.empty(d), sy = np.empty(d)
    out = np.empty((n, d), dtype=np.float32)
    cdef float[:, ::1] ov = out
    cdef double t
    with nogil:
        _stats(xv, mx, sx)
        _stats(yv, my, sy)
        for p in range(n):
            for c in range(d):
                t = (xv[p, c] - mx[c]) / (sx[c] + eps)
                ov[p, c] = <float>(sy[c] * t + my[c])
    return out


def row_norms(x):
    cdef const float[:, ::1] xv = np.ascontiguousarray(x, dtype=np.float32)
    cdef Py_ssize_t n = xv.shape[0], d = xv.shape[1], p, c
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    cdef double acc, v
    with nogil:
        for p in range(n):
            acc = 0.0
            for c in range(d):
                v = xv[p, c]
                acc += v * v
            ov[p] = sqrt(acc)
    return out


def cosine_argmax(targets, cands, tnorm, cnorm):
    cdef const float[:, ::1] tv = np.ascontiguousarray(targets, dtype=np.float32)
    cdef const float[:, ::1] cv = np.ascontiguousarray(cands, dtype=np.float32)
    cdef const double[::1] tn = np.ascontiguousarray(tnorm, dtype=np.float64)
    cdef const double[::1] cn = np.ascontiguousarray(cnorm, dtype=np.float64)
    cdef Py_ssize_t n = tv.shape[0], m = cv.shape[0], d = tv.shape[1], i, j, k
    idx = np.empty(n, dtype=np.int64)
    sim = np.empty(n, dtype=np.float64)
    cdef long long[::1] iv = idx
    cdef double[::1] sv = sim
    # normalised candidates are shared by every target row
    cdef double[:, ::1] cu = np.empty((m, d))
    cdef double[::1] tu = np.empty(d)
    cdef double acc, best
    cdef Py_ssize_t arg
    with nogil:
        for j in range(m):
            for k in range(d):
                cu[j, k] = cv[j, k] / cn[j]
        for i in range(n):
            for k in range(d):
                tu[k] = tv[i, k] / tn[i]
            best = 0.0
            arg = -1
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    acc += tu[k] * cu[j, k]
                if arg < 0 or acc > best:
                    best = acc
                    arg = j
            iv[i] = arg
            sv[i] = best
    return idx, sim


cdef extern from *:
    """
    #include <string.h>
    #if defined(__GNUC__) && defined(__x86_64__) && !defined(__clang__)
    #define CS_CLONES __attribute__((target_clones("avx2", "default")))
    #else
    #define CS_CLONES
    #endif
    /* exp for x <= 0: Cephes range reduction + degree-6 polynomial, ~1 ulp.
       Straight-line arithmetic so -O3 can vectorise the calling loop. */
    static inline float cs_expf_neg(float x) {
        x = x < -87.0f ? -87.0f : x;
        float fx = x * 1.44269504088896341f - 0.5f;
        int n = (int)fx;
        float fn = (float)n;
        float r = x - fn * 0.693359375f + fn * 2.12194440e-4f;
        float r2 = r * r;
        float y = 1.9875691500e-4f;
        y = y * r + 1.3981999507e-3f;
        y = y * r + 8.3334519073e-3f;
        y = y * r + 4.1665795894e-2f;
        y = y * r + 1.6666665459e-1f;
        y = y * r + 5.0000001201e-1f;
        y = y * r2 + r + 1.0f;
        int bits = (n + 127) << 23;
        float scale;
        memcpy(&scale, &bits, sizeof(scale));
        return y * scale;
    }
    /* One softmax row. Max and the finiteness probe use 8 lanes (max is
       exact in any order); the sum uses 8 float lanes combined in a fixed
       order, then the tail. Returns 0 when a non-finite entry is seen. */
    CS_CLONES static int cs_softmax_row(const float *restrict x, float *restrict o, Py_ssize_t n) {
        float mx[8], chk[8], acc[8];
        Py_ssize_t c, k, body = n - n % 8;
        for (k = 0; k < 8; k++) { mx[k] = x[0]; chk[k] = 0.0f; acc[k] = 0.0f; }
        for (c = 0; c < body; c += 8)
            for (k = 0; k < 8; k++) {
                float v = x[c + k];
                mx[k] = v > mx[k] ? v : mx[k];
            }
        for (c = 0; c < body; c += 8)
            for (k = 0; k < 8; k++) chk[k] += x[c + k] - x[c + k];
        float hi = mx[0], bad = chk[0];
        for (k = 1; k < 8; k++) { hi = mx[k] > hi ? mx[k] : hi; bad += chk[k]; }
        for (c = body; c < n; c++) { hi = x[c] > hi ? x[c] : hi; bad += x[c] - x[c]; }
        if (!(bad == 0.0f) || !(hi - hi == 0.0f)) return 0;
        for (c = 0; c < n; c++) o[c] = cs_expf_neg(x[c] - hi);
        for (c = 0; c < body; c += 8)
            for (k = 0; k < 8; k++) acc[k] += o[c + k];
        float total = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
        for (c = body; c < n; c++) total += o[c];
        float inv = 1.0f / total;
        for (c = 0; c < n; c++) o[c] *= inv;
        return 1;
    }
    """
    float cs_expf_neg(float x) nogil
    int cs_softmax_row(const float *x, float *o, Py_ssize_t n) nogil


def softmax_rows(m):
    """Row softmax over the last axis; returns ``(out, bad_row)``, ``bad_row = -1`` when finite."""
    a = np.ascontiguousarray(m, dtype=np.float32)
    shape = a.shape
    cdef const float[:, ::1] x = a.reshape(-1, shape[a.ndim - 1])
    cdef Py_ssize_t rows = x.shape[0], cols = x.shape[1], r
    out = np.empty((rows, cols), dtype=np.float32)
    cdef float[:, ::1] o = out
    cdef Py_ssize_t bad = -1
    if cols == 0:
        return out.reshape(shape), bad
    with nogil:
        for r in range(rows):
            if not cs_softmax_row(&x[r, 0], &o[r, 0], cols):
                bad = r
                break
    return out.reshape(shape), bad
