"""Pure-Python implementations of the hot kernels.

Semantics (including float summation order) match the Cython build in
``_native.pyx`` exactly, so the two backends are interchangeable and can
be compared bit-for-bit. See ``benchmarks/bench_kernels.py`` for the
speed difference.
"""

from __future__ import annotations


def threshold_links(matrix, tau):
    """All pairs (i, j, cosine) with i < j and cosine >= tau.

    ``matrix`` is a dense row-major table of unit-normalized embedding
    rows (anything supporting ``.tolist()`` or a list of lists). Cosines
    are accumulated left-to-right over the feature axis.
    """
    rows = matrix.tolist() if hasattr(matrix, "tolist") else [list(r) for r in matrix]
    n = len(rows)
    out = []
    for i in range(n):
        ri = rows[i]
        d = len(ri)
        for j in range(i + 1, n):
            rj = rows[j]
            s = 0.0
            for k in range(d):
                s += ri[k] * rj[k]
            if s >= tau:
                out.append((i, j, s))
    return out


def component_labels(n, pairs):
    """Connected-component label per node for an undirected edge list.

    The label of a node is the smallest node index in its component,
    which makes labels canonical regardless of edge order.
    """
    parent = list(range(n))

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for pair in pairs:
        a, b = pair[0], pair[1]
        ra, rb = find(a), find(b)
        if ra != rb:
            # keep the smaller index as the root so roots are canonical
            if ra < rb:
                parent[rb] = ra
            else:
                parent[ra] = rb
    return [find(i) for i in range(n)]
