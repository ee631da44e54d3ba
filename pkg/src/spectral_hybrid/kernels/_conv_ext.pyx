# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled periodic convolution: C gather/scatter around a single BLAS gemm.

Same contract as ``_conv_py``: channel-last ``x`` of shape (B, N, C) or
(B, N, M, C), weights (K, C, Cout) or (K, K, C, Cout), odd K, centred taps.
"""

cimport cython
import numpy as np
cimport numpy as cnp
from scipy.linalg.cython_blas cimport sgemm, dgemm

cnp.import_array()

ctypedef fused real_t:
    float
    double


cdef inline void _gemm(char ta, char tb, int m, int n, int k,
                       real_t* a, int lda, real_t* b, int ldb,
                       real_t* c, int ldc, real_t beta) noexcept nogil:
    # column-major C = op(A) @ op(B); callers pass row-major buffers swapped
    cdef real_t one = 1
    if real_t is float:
        sgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)
    else:
        dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


cdef inline Py_ssize_t _wrap(Py_ssize_t i, Py_ssize_t n) noexcept nogil:
    i = i % n
    return i + n if i < 0 else i


cdef void _im2col1(real_t* x, real_t* cols, Py_ssize_t b, Py_ssize_t n,
                   Py_ssize_t c, Py_ssize_t k, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t ib, ix, j, ic, src, h = k // 2
    cdef real_t* dst = cols
    for ib in range(b):
        for ix in range(n):
            for j in range(k):
                src = (ib * n + _wrap(ix + (j - h) * d, n)) * c
                for ic in range(c):
                    dst[ic] = x[src + ic]
                dst += c


cdef void _col2im1(real_t* gcols, real_t* gx, Py_ssize_t b, Py_ssize_t n,
                   Py_ssize_t c, Py_ssize_t k, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t ib, ix, j, ic, dst, h = k // 2
    cdef real_t* src = gcols
    for ib in range(b):
        for ix in range(n):
            for j in range(k):
                dst = (ib * n + _wrap(ix + (j - h) * d, n)) * c
                for ic in range(c):
                    gx[dst + ic] += src[ic]
                src += c


cdef void _im2col2(real_t* x, real_t* cols, Py_ssize_t b, Py_ssize_t n, Py_ssize_t m,
                   Py_ssize_t c, Py_ssize_t k, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t ib, ix, iy, j1, j2, ic, src, row, h = k // 2
    cdef real_t* dst = cols
    for ib in range(b):
        for ix in range(n):
            for iy in range(m):
                for j1 in range(k):
                    row = ib * n + _wrap(ix + (j1 - h) * d, n)
                    for j2 in range(k):
                        src = (row * m + _wrap(iy + (j2 - h) * d, m)) * c
                        for ic in range(c):
                            dst[ic] = x[src + ic]
                        dst += c


cdef void _col2im2(real_t* gcols, real_t* gx, Py_ssize_t b, Py_ssize_t n, Py_ssize_t m,
                   Py_ssize_t c, Py_ssize_t k, Py_ssize_t d) noexcept nogil:
    cdef Py_ssize_t ib, ix, iy, j1, j2, ic, dst, row, h = k // 2
    cdef real_t* src = gcols
    for ib in range(b):
        for ix in range(n):
            for iy in range(m):
                for j1 in range(k):
                    row = ib * n + _wrap(ix + (j1 - h) * d, n)
                    for j2 in range(k):
                        dst = (row * m + _wrap(iy + (j2 - h) * d, m)) * c
                        for ic in range(c):
                            gx[dst + ic] += src[ic]
                        src += c


cdef _cols(real_t[::1] xf, tuple shape, Py_ssize_t k, Py_ssize_t d, object dtype):
    cdef bint one_d = len(shape) == 3
    cdef Py_ssize_t b = shape[0], c = shape[len(shape) - 1], n = shape[1]
    cdef Py_ssize_t m = 1 if one_d else shape[2]
    cdef Py_ssize_t rows = xf.shape[0] // c
    cdef Py_ssize_t taps = k if one_d else k * k
    out = np.empty((rows, taps * c), dtype=dtype)
    cdef real_t[:, ::1] cv = out
    with nogil:
        if one_d:
            _im2col1(&xf[0], &cv[0, 0], b, n, c, k, d)
        else:
            _im2col2(&xf[0], &cv[0, 0], b, n, m, c, k, d)
    return out


def _forward(real_t[::1] xf, real_t[::1] wf, tuple shape, int k, int cout, int d):
    dtype = np.float32 if real_t is float else np.float64
    cols = _cols(xf, shape, k, d, dtype)
    cdef real_t[:, ::1] cv = cols
    cdef int rows = cv.shape[0], kc = cv.shape[1]
    out = np.empty((rows, cout), dtype=dtype)
    cdef real_t[:, ::1] ov = out
    with nogil:
        _gemm(c'N', c'N', cout, rows, kc, &wf[0], cout, &cv[0, 0], kc, &ov[0, 0], cout, 0)
    return out


def _backward(real_t[::1] xf, real_t[::1] wf, real_t[::1] gf, tuple shape,
              int k, int cout, int d, bint need_input):
    dtype = np.float32 if real_t is float else np.float64
    cols = _cols(xf, shape, k, d, dtype)
    cdef real_t[:, ::1] cv = cols
    cdef int rows = cv.shape[0], kc = cv.shape[1]
    gw = np.empty((kc, cout), dtype=dtype)
    cdef real_t[:, ::1] gwv = gw
    with nogil:
        _gemm(c'N', c'T', cout, kc, rows, &gf[0], cout, &cv[0, 0], kc, &gwv[0, 0], cout, 0)
    if not need_input:
        return None, gw
    gcols = np.empty((rows, kc), dtype=dtype)
    cdef real_t[:, ::1] gcv = gcols
    gx = np.zeros(xf.shape[0], dtype=dtype)
    cdef real_t[::1] gxv = gx
    cdef bint one_d = len(shape) == 3
    cdef Py_ssize_t b = shape[0], c = shape[len(shape) - 1], n = shape[1]
    cdef Py_ssize_t m = 1 if one_d else shape[2]
    with nogil:
        _gemm(c'T', c'N', kc, rows, cout, &wf[0], cout, &gf[0], cout, &gcv[0, 0], kc, 0)
        if one_d:
            _col2im1(&gcv[0, 0], &gxv[0], b, n, c, k, d)
        else:
            _col2im2(&gcv[0, 0], &gxv[0], b, n, m, c, k, d)
    return gx, gw


@cython.wraparound(True)
def conv_forward(x, w, int dilation):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    cout = w.shape[-1]
    out = _forward(x.reshape(-1), w.reshape(-1), x.shape, w.shape[0], cout, dilation)
    return out.reshape(x.shape[:-1] + (cout,))


@cython.wraparound(True)
def conv_backward(x, w, gy, int dilation, need_input=True):
    x = np.ascontiguousarray(x)
    w = np.ascontiguousarray(w, dtype=x.dtype)
    gy = np.ascontiguousarray(gy, dtype=x.dtype)
    gx, gw = _backward(x.reshape(-1), w.reshape(-1), gy.reshape(-1), x.shape,
                       w.shape[0], w.shape[-1], dilation, need_input)
    return (None if gx is None else gx.reshape(x.shape)), gw.reshape(w.shape)
