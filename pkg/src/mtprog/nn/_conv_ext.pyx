# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled 3D convolution kernels (same contract as _conv_py).

Patches are gathered into a column matrix by a compiled loop (im2col), the
contraction runs as one batched BLAS matmul, and the input gradient is
scattered back with the mirror loop (col2im).
"""
import numpy as np
cimport numpy as cnp

cnp.import_array()


cdef void _im2col(const double[:, :, :, :, ::1] xp, double[:, :, ::1] cols,
                  Py_ssize_t KD, Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t stride,
                  Py_ssize_t DO, Py_ssize_t HO, Py_ssize_t WO) noexcept nogil:
    cdef Py_ssize_t N = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t n, c, kd, kh, kw, d, h, x, r, p
    cdef const double* src
    cdef double* dst
    for n in range(N):
        r = 0
        for c in range(C):
            for kd in range(KD):
                for kh in range(KH):
                    for kw in range(KW):
                        dst = &cols[n, r, 0]
                        p = 0
                        for d in range(DO):
                            for h in range(HO):
                                src = &xp[n, c, d * stride + kd, h * stride + kh, kw]
                                for x in range(WO):
                                    dst[p + x] = src[x * stride]
                                p += WO
                        r += 1


cdef void _col2im(const double[:, :, ::1] cols, double[:, :, :, :, ::1] gx,
                  Py_ssize_t KD, Py_ssize_t KH, Py_ssize_t KW, Py_ssize_t stride,
                  Py_ssize_t DO, Py_ssize_t HO, Py_ssize_t WO) noexcept nogil:
    cdef Py_ssize_t N = gx.shape[0], C = gx.shape[1]
    cdef Py_ssize_t n, c, kd, kh, kw, d, h, x, r, p
    cdef const double* src
    cdef double* dst
    for n in range(N):
        r = 0
        for c in range(C):
            for kd in range(KD):
                for kh in range(KH):
                    for kw in range(KW):
                        src = &cols[n, r, 0]
                        p = 0
                        for d in range(DO):
                            for h in range(HO):
                                dst = &gx[n, c, d * stride + kd, h * stride + kh, kw]
                                for x in range(WO):
                                    dst[x * stride] += src[p + x]
                                p += WO
                        r += 1


def _extents(tuple padded, tuple kernel, int stride):
    return tuple((padded[i + 2] - kernel[i + 2]) // stride + 1 for i in range(3))


def _columns(xp, tuple kernel_shape, int stride):
    DO, HO, WO = _extents(xp.shape, kernel_shape, stride)
    K = kernel_shape[1] * kernel_shape[2] * kernel_shape[3] * kernel_shape[4]
    cols = np.empty((xp.shape[0], K, DO * HO * WO))
    _im2col(xp, cols, kernel_shape[2], kernel_shape[3], kernel_shape[4], stride, DO, HO, WO)
    return cols, (DO, HO, WO)


def conv3d_forward(const double[:, :, :, :, ::1] xp, const double[:, :, :, :, ::1] w, int stride):
    xa, wa = np.asarray(xp), np.asarray(w)
    cols, out_shape = _columns(xa, wa.shape, stride)
    out = np.matmul(wa.reshape(wa.shape[0], -1), cols)
    return out.reshape((xa.shape[0], wa.shape[0]) + out_shape)


def conv3d_backward_input(const double[:, :, :, :, ::1] g, const double[:, :, :, :, ::1] w,
                          tuple padded_shape, int stride):
    ga, wa = np.asarray(g), np.asarray(w)
    N, O, DO, HO, WO = ga.shape
    cols = np.ascontiguousarray(np.matmul(wa.reshape(O, -1).T, ga.reshape(N, O, -1)))
    gx = np.zeros(padded_shape)
    _col2im(cols, gx, wa.shape[2], wa.shape[3], wa.shape[4], stride, DO, HO, WO)
    return gx


def conv3d_backward_weight(const double[:, :, :, :, ::1] g, const double[:, :, :, :, ::1] xp,
                           tuple kernel_shape, int stride):
    ga, xa = np.asarray(g), np.asarray(xp)
    cols, _ = _columns(xa, kernel_shape, stride)
    N, O = ga.shape[:2]
    gw = np.matmul(ga.reshape(N, O, -1), cols.transpose(0, 2, 1)).sum(axis=0)
    return gw.reshape(kernel_shape)
