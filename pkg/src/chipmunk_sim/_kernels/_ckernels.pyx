# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled saturating MAC kernels."""

import numpy as np


def block_mac(int[::1] acc, const signed char[:, ::1] w, const signed char[::1] v,
              int lo=-32768, int hi=32767):
    """acc[u] += sum_j w[u, j] * v[j], saturating to [lo, hi] after every term.

    Columns are visited in ascending order; the update is in place.
    """
    cdef Py_ssize_t n = w.shape[0]
    cdef Py_ssize_t m = w.shape[1]
    cdef Py_ssize_t u, j
    cdef int a
    if acc.shape[0] != n or v.shape[0] != m:
        raise ValueError("block_mac shape mismatch")
    with nogil:
        for u in range(n):
            a = acc[u]
            for j in range(m):
                a = a + w[u, j] * v[j]
                if a > hi:
                    a = hi
                elif a < lo:
                    a = lo
            acc[u] = a


def sat_add(int[::1] acc, const int[::1] incoming, int lo=-32768, int hi=32767):
    """acc[u] = sat(incoming[u] + acc[u]) in place."""
    cdef Py_ssize_t n = acc.shape[0]
    cdef Py_ssize_t u
    cdef int a
    if incoming.shape[0] != n:
        raise ValueError("sat_add shape mismatch")
    with nogil:
        for u in range(n):
            a = incoming[u] + acc[u]
            if a > hi:
                a = hi
            elif a < lo:
                a = lo
            acc[u] = a
