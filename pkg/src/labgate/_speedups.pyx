# cython: language_level=3, boundscheck=False, wraparound=False
"""Compiled byte kernels. Semantics must match ``_purekernels`` exactly."""


def sum_mod256(const unsigned char[:] data):
    cdef Py_ssize_t i, n = data.shape[0]
    cdef unsigned int acc = 0
    for i in range(n):
        acc += data[i]
    return acc & 0xFF


def xor_all(const unsigned char[:] data):
    cdef Py_ssize_t i, n = data.shape[0]
    cdef unsigned char acc = 0
    for i in range(n):
        acc ^= data[i]
    return acc


def find_any(const unsigned char[:] data, const unsigned char[:] needles, Py_ssize_t start=0):
    """Index of the first byte at or after ``start`` that is in ``needles``, else -1."""
    cdef Py_ssize_t i, j, n = data.shape[0], m = needles.shape[0]
    cdef unsigned char c
    for i in range(start, n):
        c = data[i]
        for j in range(m):
            if c == needles[j]:
                return i
    return -1
