# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: thresholded all-pairs cosine links and
connected-component labels. Must stay semantically identical to
``_fallback.py`` (same accumulation order, same canonical labels)."""

from libc.stdlib cimport free, malloc


def threshold_links(double[:, ::1] matrix, double tau):
    cdef Py_ssize_t n = matrix.shape[0]
    cdef Py_ssize_t d = matrix.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double s
    out = []
    for i in range(n):
        for j in range(i + 1, n):
            s = 0.0
            for k in range(d):
                s += matrix[i, k] * matrix[j, k]
            if s >= tau:
                out.append((i, j, s))
    return out


def component_labels(Py_ssize_t n, long long[::1] us, long long[::1] vs):
    cdef Py_ssize_t m = us.shape[0]
    cdef Py_ssize_t i, a, b, ra, rb
    cdef Py_ssize_t* parent = <Py_ssize_t*> malloc(n * sizeof(Py_ssize_t))
    if parent == NULL:
        raise MemoryError()
    try:
        for i in range(n):
            parent[i] = i
        for i in range(m):
            a = <Py_ssize_t> us[i]
            b = <Py_ssize_t> vs[i]
            ra = a
            while parent[ra] != ra:
                parent[ra] = parent[parent[ra]]
                ra = parent[ra]
            rb = b
            while parent[rb] != rb:
                parent[rb] = parent[parent[rb]]
                rb = parent[rb]
            if ra != rb:
                if ra < rb:
                    parent[rb] = ra
                else:
                    parent[ra] = rb
        labels = [0] * n
        for i in range(n):
            a = i
            while parent[a] != a:
                parent[a] = parent[parent[a]]
                a = parent[a]
            labels[i] = a
        return labels
    finally:
        free(parent)
