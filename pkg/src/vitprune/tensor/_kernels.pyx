# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled kernels. Callers guarantee C-contiguous inputs of one dtype."""

import numpy as np
cimport numpy as cnp

cnp.import_array()

cdef extern from "kernels.h" nogil:
    void vp_matmul_f64(const double *a, const double *b, double *c,
                       Py_ssize_t nb, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n, int nthreads)
    void vp_matmul_f32(const float *a, const float *b, float *c,
                       Py_ssize_t nb, Py_ssize_t m, Py_ssize_t k, Py_ssize_t n, int nthreads)
    void vp_ln_fwd_f64(const double *x, const double *g, const double *b, double *y,
                       double *mean, double *rstd, Py_ssize_t rows, Py_ssize_t d,
                       double eps, int nthreads)
    void vp_ln_fwd_f32(const float *x, const float *g, const float *b, float *y,
                       float *mean, float *rstd, Py_ssize_t rows, Py_ssize_t d,
                       double eps, int nthreads)
    void vp_ln_bwd_f64(const double *gy, const double *x, const double *g,
                       const double *mean, const double *rstd, double *dx,
                       Py_ssize_t rows, Py_ssize_t d, int nthreads)
    void vp_ln_bwd_f32(const float *gy, const float *x, const float *g,
                       const float *mean, const float *rstd, float *dx,
                       Py_ssize_t rows, Py_ssize_t d, int nthreads)
    void vp_softmax_f64(const double *x, double *y, Py_ssize_t rows, Py_ssize_t n, int nthreads)
    void vp_softmax_f32(const float *x, float *y, Py_ssize_t rows, Py_ssize_t n, int nthreads)
    void vp_gelu_f64(const double *x, double *y, double *dy, Py_ssize_t size, int nthreads)
    void vp_gelu_f32(const float *x, float *y, float *dy, Py_ssize_t size, int nthreads)

def matmul(cnp.ndarray a, cnp.ndarray b, int nthreads=1):
    """Batched (nb, m, k) @ (nb, k, n)."""
    cdef Py_ssize_t nb = a.shape[0], m = a.shape[1], k = a.shape[2], n = b.shape[2]
    cdef cnp.ndarray c = np.empty((nb, m, n), dtype=a.dtype)
    if a.dtype == np.float64:
        with nogil:
            vp_matmul_f64(<double *>cnp.PyArray_DATA(a), <double *>cnp.PyArray_DATA(b), <double *>cnp.PyArray_DATA(c), nb, m, k, n, nthreads)
    else:
        with nogil:
            vp_matmul_f32(<float *>cnp.PyArray_DATA(a), <float *>cnp.PyArray_DATA(b), <float *>cnp.PyArray_DATA(c), nb, m, k, n, nthreads)
    return c

def layer_norm_forward(cnp.ndarray x, cnp.ndarray g, cnp.ndarray b, double eps, int nthreads=1):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray y = np.empty_like(x)
    cdef cnp.ndarray mean = np.empty(rows, dtype=x.dtype)
    cdef cnp.ndarray rstd = np.empty(rows, dtype=x.dtype)
    if x.dtype == np.float64:
        with nogil:
            vp_ln_fwd_f64(<double *>cnp.PyArray_DATA(x), <double *>cnp.PyArray_DATA(g), <double *>cnp.PyArray_DATA(b), <double *>cnp.PyArray_DATA(y),
                          <double *>cnp.PyArray_DATA(mean), <double *>cnp.PyArray_DATA(rstd), rows, d, eps, nthreads)
    else:
        with nogil:
            vp_ln_fwd_f32(<float *>cnp.PyArray_DATA(x), <float *>cnp.PyArray_DATA(g), <float *>cnp.PyArray_DATA(b), <float *>cnp.PyArray_DATA(y),
                          <float *>cnp.PyArray_DATA(mean), <float *>cnp.PyArray_DATA(rstd), rows, d, eps, nthreads)
    return y, mean, rstd

def layer_norm_backward(cnp.ndarray gy, cnp.ndarray x, cnp.ndarray g,
                        cnp.ndarray mean, cnp.ndarray rstd, int nthreads=1):
    cdef Py_ssize_t rows = x.shape[0], d = x.shape[1]
    cdef cnp.ndarray dx = np.empty_like(x)
    if x.dtype == np.float64:
        with nogil:
            vp_ln_bwd_f64(<double *>cnp.PyArray_DATA(gy), <double *>cnp.PyArray_DATA(x), <double *>cnp.PyArray_DATA(g),
                          <double *>cnp.PyArray_DATA(mean), <double *>cnp.PyArray_DATA(rstd), <double *>cnp.PyArray_DATA(dx),
                          rows, d, nthreads)
    else:
        with nogil:
            vp_ln_bwd_f32(<float *>cnp.PyArray_DATA(gy), <float *>cnp.PyArray_DATA(x), <float *>cnp.PyArray_DATA(g),
                          <float *>cnp.PyArray_DATA(mean), <float *>cnp.PyArray_DATA(rstd), <float *>cnp.PyArray_DATA(dx),
                          rows, d, nthreads)
    return dx

def softmax(cnp.ndarray x, int nthreads=1):
    cdef Py_ssize_t rows = x.shape[0], n = x.shape[1]
    cdef cnp.ndarray y = np.empty_like(x)
    if x.dtype == np.float64:
        with nogil:
            vp_softmax_f64(<double *>cnp.PyArray_DATA(x), <double *>cnp.PyArray_DATA(y), rows, n, nthreads)
    else:
        with nogil:
            vp_softmax_f32(<float *>cnp.PyArray_DATA(x), <float *>cnp.PyArray_DATA(y), rows, n, nthreads)
    return y

def gelu(cnp.ndarray x, bint with_grad=False, int nthreads=1):
    cdef Py_ssize_t size = x.size
    cdef cnp.ndarray y = np.empty_like(x)
    cdef cnp.ndarray dy = None
    cdef void *px = cnp.PyArray_DATA(x)
    cdef void *py = cnp.PyArray_DATA(y)
    cdef void *pdy = NULL
    if with_grad:
        dy = np.empty_like(x)
        pdy = cnp.PyArray_DATA(dy)
    if x.dtype == np.float64:
        with nogil:
            vp_gelu_f64(<double *>px, <double *>py, <double *>pdy, size, nthreads)
    else:
        with nogil:
            vp_gelu_f32(<float *>px, <float *>py, <float *>pdy, size, nthreads)
    return y, dy
