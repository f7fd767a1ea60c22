# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled MLP kernels.

Same contract as fedfair._mlp_numpy (the fallback): a flat float64
parameter vector packed per layer as (weight row-major [out, in],
bias [out]); act 0 = relu, 1 = tanh; linear output layer.

The point of this module is throughput on the small dense nets the
simulator trains: per-call numpy dispatch overhead dominates at these
sizes, so plain C loops win. See benchmarks/bench_kernels.py.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport tanh as ctanh

cnp.import_array()

RELU = 0
TANH = 1


cdef void _affine(const double[:, ::1] a, const double* w, const double* b,
                  double* w_t, double[:, ::1] out, Py_ssize_t n,
                  Py_ssize_t nin, Py_ssize_t nout) noexcept nogil:
    # Rank-1-update form over a transposed weight scratch: every inner loop
    # walks contiguous memory with no floating-point reduction, so the
    # compiler can vectorize it without reassociating sums.
    cdef Py_ssize_t i, j, k
    cdef double aik
    for j in range(nout):
        for k in range(nin):
            w_t[k * nout + j] = w[j * nin + k]
    for i in range(n):
        for j in range(nout):
            out[i, j] = b[j]
        for k in range(nin):
            aik = a[i, k]
            for j in range(nout):
                out[i, j] += aik * w_t[k * nout + j]


def forward(double[::1] flat, sizes, int act, cnp.ndarray X):
    cdef Py_ssize_t n_layers = len(sizes) - 1
    cdef Py_ssize_t n = X.shape[0]
    cdef Py_ssize_t layer, nin, nout, off, i, j
    cdef double[:, ::1] a_view, z_view
    cdef double[::1] scratch_view
    cdef double v

    acts = [X]
    a = np.ascontiguousarray(X, dtype=np.float64)
    scratch = np.empty(max(sizes[l] * sizes[l + 1] for l in range(n_layers)))
    scratch_view = scratch
    off = 0
    for layer in range(n_layers):
        nin = sizes[layer]
        nout = sizes[layer + 1]
        z = np.empty((n, nout), dtype=np.float64)
        a_view = a
        z_view = z
        with nogil:
            _affine(a_view, &flat[off], &flat[off + nout * nin], &scratch_view[0],
                    z_view, n, nin, nout)
            if layer != n_layers - 1:
                for i in range(n):
                    for j in range(nout):
                        v = z_view[i, j]
                        if act == 0:
                            z_view[i, j] = v if v > 0.0 else 0.0
                        else:
                            z_view[i, j] = ctanh(v)
        off += nout * nin + nout
        acts.append(z)
        a = z
    return acts


def backward(double[::1] flat, sizes, int act, acts, cnp.ndarray dout,
             bint want_param_grad=True, bint want_input_grad=False):
    cdef Py_ssize_t n_layers = len(sizes) - 1
    cdef Py_ssize_t n = dout.shape[0]
    cdef Py_ssize_t layer, nin, nout, off, i, j, k
    cdef double acc, av
    cdef double[:, ::1] d_view, a_view, da_view
    cdef double[::1] dflat_view

    offsets = []
    off = 0
    for layer in range(n_layers):
        nin = sizes[layer]
        nout = sizes[layer + 1]
        offsets.append((off, nin, nout))
        off += nout * nin + nout

    dflat = np.zeros(flat.shape[0], dtype=np.float64) if want_param_grad else None
    if want_param_grad:
        dflat_view = dflat

    d = np.ascontiguousarray(dout, dtype=np.float64)
    dX = None
    for layer in range(n_layers - 1, -1, -1):
        off, nin, nout = offsets[layer]
        a_prev = acts[layer]
        d_view = d
        a_view = a_prev
        if want_param_grad:
            with nogil:
                # dW[j,k] = sum_i d[i,j] * a_prev[i,k]; db[j] = sum_i d[i,j].
                # i-outer keeps every inner run contiguous.
                for i in range(n):
                    for j in range(nout):
                        acc = d_view[i, j]
                        for k in range(nin):
                            dflat_view[off + j * nin + k] += acc * a_view[i, k]
                        dflat_view[off + nout * nin + j] += acc
        if layer == 0 and not want_input_grad:
            break
        da = np.zeros((n, nin), dtype=np.float64)
        da_view = da
        with nogil:
            for i in range(n):
                for j in range(nout):
                    acc = d_view[i, j]
                    for k in range(nin):
                        da_view[i, k] += acc * flat[off + j * nin + k]
        if layer == 0:
            dX = da
            break
        a_cur = acts[layer]
        a_view = a_cur
        with nogil:
            for i in range(n):
                for k in range(nin):
                    av = a_view[i, k]
                    if act == 0:
                        da_view[i, k] = da_view[i, k] if av > 0.0 else 0.0
                    else:
                        da_view[i, k] = da_view[i, k] * (1.0 - av * av)
        d = da
    return dflat, dX
