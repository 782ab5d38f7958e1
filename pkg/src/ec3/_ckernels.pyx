# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops. Must agree bit-for-bit with ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.stdlib cimport malloc, free
from libc.stdint cimport int64_t, uint8_t

cnp.import_array()

ctypedef struct Entry:
    double value
    Py_ssize_t index


cdef void _merge_sort(Entry* buf, Entry* tmp, Py_ssize_t K) noexcept nogil:
    # bottom-up, stable: equal values keep their (ascending index) order
    cdef Py_ssize_t width = 1, lo, mid, hi, i, j, k
    cdef Entry* src = buf
    cdef Entry* dst = tmp
    cdef Entry* swap
    while width < K:
        lo = 0
        while lo < K:
            mid = lo + width if lo + width < K else K
            hi = lo + 2 * width if lo + 2 * width < K else K
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if src[j].value > src[i].value:
                    dst[k] = src[j]
                    j += 1
                else:
                    dst[k] = src[i]
                    i += 1
                k += 1
            while i < mid:
                dst[k] = src[i]
                i += 1
                k += 1
            while j < hi:
                dst[k] = src[j]
                j += 1
                k += 1
            lo = hi
        swap = src
        src = dst
        dst = swap
        width *= 2
    if src != buf:
        for i in range(K):
            buf[i] = src[i]


cdef void _sort_entries(Entry* buf, Entry* tmp, Py_ssize_t K) noexcept nogil:
    cdef Py_ssize_t i, j
    cdef Entry e
    if K > 32:
        _merge_sort(buf, tmp, K)
        return
    # insertion sort is stable and fastest for small K
    for i in range(1, K):
        e = buf[i]
        j = i - 1
        while j >= 0 and buf[j].value < e.value:
            buf[j + 1] = buf[j]
            j -= 1
        buf[j + 1] = e


def aps_scores_batch(const double[:, ::1] probs):
    cdef Py_ssize_t n = probs.shape[0]
    cdef Py_ssize_t K = probs.shape[1]
    out = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] o = out
    cdef Entry* buf = <Entry*> malloc(2 * K * sizeof(Entry))
    if buf == NULL:
        raise MemoryError()
    cdef Entry* tmp = buf + K
    cdef Py_ssize_t i, k
    cdef double acc
    try:
        with nogil:
            for i in range(n):
                for k in range(K):
                    buf[k].value = probs[i, k]
                    buf[k].index = k
                _sort_entries(buf, tmp, K)
                acc = 0.0
                for k in range(K):
                    acc = acc + buf[k].value
                    o[i, buf[k].index] = acc
    finally:
        free(buf)
    return out


def wsc_min_windows(const uint8_t[:, ::1] sorted_hits, Py_ssize_t min_count):
    cdef Py_ssize_t D = sorted_hits.shape[0]
    cdef Py_ssize_t n = sorted_hits.shape[1]
    num = np.empty(D, dtype=np.int64)
    den = np.empty(D, dtype=np.int64)
    cdef int64_t[::1] num_v = num
    cdef int64_t[::1] den_v = den
    cdef int64_t* prefix = <int64_t*> malloc((n + 1) * sizeof(int64_t))
    if prefix == NULL:
        raise MemoryError()
    cdef Py_ssize_t d, i, L, L_max
    cdef int64_t s, best_s, best_h, best_L
    L_max = 2 * min_count - 1
    if L_max > n:
        L_max = n
    try:
        with nogil:
            for d in range(D):
                prefix[0] = 0
                for i in range(n):
                    prefix[i + 1] = prefix[i] + sorted_hits[d, i]
                best_h = -1
                best_L = 1
                for L in range(min_count, L_max + 1):
                    best_s = prefix[L] - prefix[0]
                    for i in range(1, n - L + 1):
                        s = prefix[i + L] - prefix[i]
                        if s < best_s:
                            best_s = s
                    if best_h < 0 or best_s * best_L < best_h * L:
                        best_h = best_s
                        best_L = L
                num_v[d] = best_h
                den_v[d] = best_L
    finally:
        free(prefix)
    return num, den
