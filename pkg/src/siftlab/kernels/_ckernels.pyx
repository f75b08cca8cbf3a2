# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Fused loops for the sparse update path. Index validity is checked by the caller."""
from cython cimport floating
from libc.math cimport sqrt
from libc.stdint cimport int64_t


def gather_add(floating[::1] acc, const floating[::1] grad_flat, const int64_t[::1] idx):
    cdef Py_ssize_t j, n = idx.shape[0]
    with nogil:
        for j in range(n):
            acc[j] = acc[j] + grad_flat[idx[j]]


def sparse_adamw(floating[::1] delta, const floating[::1] base, floating[::1] m,
                 floating[::1] v, const floating[::1] g, double lr, double beta1,
                 double beta2, double eps, double weight_decay, double bc1, double bc2):
    cdef Py_ssize_t j, n = delta.shape[0]
    cdef floating b1 = <floating>beta1
    cdef floating b2 = <floating>beta2
    cdef floating omb1 = <floating>(1.0 - beta1)
    cdef floating omb2 = <floating>(1.0 - beta2)
    cdef floating c1 = <floating>bc1
    cdef floating c2 = <floating>bc2
    cdef floating e = <floating>eps
    cdef floating step = <floating>lr
    cdef floating decay = <floating>(lr * weight_decay)
    cdef bint use_decay = weight_decay != 0.0
    cdef floating gj, mhat, vhat, denom
    with nogil:
        for j in range(n):
            gj = g[j]
            m[j] = m[j] * b1
            m[j] = m[j] + omb1 * gj
            v[j] = v[j] * b2
            v[j] = v[j] + omb2 * gj * gj
            mhat = m[j] / c1
            vhat = v[j] / c2
            if use_decay:
                delta[j] = delta[j] - decay * (base[j] + delta[j])
            denom = <floating>sqrt(vhat) + e
            delta[j] = delta[j] - step * mhat / denom


def scatter_merge(floating[::1] flat_param, const int64_t[::1] idx,
                  const floating[::1] base, const floating[::1] delta):
    cdef Py_ssize_t j, n = idx.shape[0]
    with nogil:
        for j in range(n):
            flat_param[idx[j]] = base[j] + delta[j]
