# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels. Bitwise twins of ``_kernels_py``; build with
``-ffp-contract=off`` so multiply-adds are never fused."""

import numpy as np
cimport numpy as cnp
from libc.math cimport frexp, isfinite
from libc.stdint cimport int64_t, uint64_t

cdef uint64_t MASK32 = 0xFFFFFFFFu

cnp.import_array()

NAME = "compiled"


def dense_forward(const double[:, ::1] x, const double[:, ::1] w, const double[::1] b):
    cdef Py_ssize_t n = x.shape[0], kdim = w.shape[0], jdim = w.shape[1]
    cdef Py_ssize_t r, k, j
    cdef double acc
    out = np.empty((n, jdim), dtype=np.float64)
    cdef double[:, ::1] z = out
    with nogil:
        for r in range(n):
            for j in range(jdim):
                acc = b[j]
                for k in range(kdim):
                    acc = acc + x[r, k] * w[k, j]
                z[r, j] = acc
    return out


def dense_backward_input(const double[:, ::1] delta, const double[:, ::1] w):
    cdef Py_ssize_t n = delta.shape[0], kdim = w.shape[0], jdim = w.shape[1]
    cdef Py_ssize_t r, k, j
    cdef double acc
    out = np.empty((n, kdim), dtype=np.float64)
    cdef double[:, ::1] dx = out
    with nogil:
        for r in range(n):
            for k in range(kdim):
                acc = 0.0
                for j in range(jdim):
                    acc = acc + delta[r, j] * w[k, j]
                dx[r, k] = acc
    return out


cdef inline int _add(int64_t[:, ::1] limbs, Py_ssize_t elem, double v) noexcept nogil:
    cdef int e
    cdef double m
    cdef int64_t m53, sign
    cdef uint64_t mag, lo, rest
    cdef int pos, idx, sh
    if v == 0.0:
        return 0
    if not isfinite(v):
        return 1
    m = frexp(v, &e)
    m53 = <int64_t>(m * 9007199254740992.0)
    if m53 < 0:
        sign = -1
        mag = <uint64_t>(-m53)
    else:
        sign = 1
        mag = <uint64_t>m53
    pos = e + 1074
    idx = pos >> 5
    sh = pos & 31
    lo = (mag & ((<uint64_t>1 << (32 - sh)) - 1)) << sh
    rest = mag >> (32 - sh)
    limbs[elem, idx] += sign * <int64_t>lo
    limbs[elem, idx + 1] += sign * <int64_t>(rest & MASK32)
    limbs[elem, idx + 2] += sign * <int64_t>(rest >> 32)
    return 0


def accumulate_rows(int64_t[:, ::1] limbs, const double[:, ::1] rows, Py_ssize_t offset):
    cdef Py_ssize_t n = rows.shape[0], width = rows.shape[1]
    cdef Py_ssize_t r, c
    cdef int bad = 0
    with nogil:
        for r in range(n):
            for c in range(width):
                bad |= _add(limbs, offset + c, rows[r, c])
    if bad:
        raise FloatingPointError("cannot accumulate non-finite values")


def accumulate_outer(int64_t[:, ::1] limbs, const double[:, ::1] x,
                     const double[:, ::1] delta, Py_ssize_t offset):
    cdef Py_ssize_t n = x.shape[0], kdim = x.shape[1], jdim = delta.shape[1]
    cdef Py_ssize_t r, k, j
    cdef int bad = 0
    cdef double xv
    with nogil:
        for r in range(n):
            for k in range(kdim):
                xv = x[r, k]
                for j in range(jdim):
                    bad |= _add(limbs, offset + k * jdim + j, xv * delta[r, j])
    if bad:
        raise FloatingPointError("cannot accumulate non-finite values")


def normalize(int64_t[:, ::1] limbs):
    cdef Py_ssize_t n = limbs.shape[0], width = limbs.shape[1]
    cdef Py_ssize_t r, i
    cdef int64_t carry
    with nogil:
        for r in range(n):
            for i in range(width - 1):
                carry = limbs[r, i] >> 32
                limbs[r, i] -= carry * 4294967296
                limbs[r, i + 1] += carry
