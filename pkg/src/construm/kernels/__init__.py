"""Numeric kernels for hypergraph construction, with a compiled fast path.

Exact thresholded-link construction compares every pair of columns, which
is quadratic in the column count and dominates offline graph builds. A
Cython extension is used when it was built; otherwise a pure-Python
implementation with identical semantics is selected at import time.
``BACKEND`` reports which one is active.
"""

from __future__ import annotations

import os

import numpy as np

if os.environ.get("CONSTRUM_PURE_PYTHON"):
    _native = None
    BACKEND = "python"
else:
    try:
        from construm.kernels import _native

        BACKEND = "native"
    except ImportError:  # extension not built on this install
        _native = None
        BACKEND = "python"

from construm.kernels import _fallback


def _as_matrix(matrix) -> np.ndarray:
    m = np.ascontiguousarray(np.asarray(matrix, dtype=np.float64))
    if m.ndim != 2:
        raise ValueError(f"expected a 2-d matrix, got shape {m.shape}")
    return m


def threshold_links(matrix, tau: float, *, backend: str | None = None):
    """All pairs (i, j, cosine) with i < j and cosine >= tau.

    Rows of ``matrix`` must be unit-normalized embeddings; pairs are
    emitted in row-major order. ``backend`` forces "native" or "python"
    (used by the cross-backend tests and benchmark).
    """
    m = _as_matrix(matrix)
    if m.shape[0] < 2:
        return []
    impl = _select(backend)
    if impl is _native:
        return _native.threshold_links(m, float(tau))
    return _fallback.threshold_links(m, float(tau))


def component_labels(n: int, pairs, *, backend: str | None = None) -> list[int]:
    """Canonical component label (smallest member index) per node.

    ``pairs`` is any iterable of (i, j, ...) edge tuples over nodes
    0..n-1, e.g. the output of :func:`threshold_links`.
    """
    if n < 0:
        raise ValueError("n must be non-negative")
    impl = _select(backend)
    if impl is _native:
        edges = list(pairs)
        us = np.fromiter((e[0] for e in edges), dtype=np.int64, count=len(edges))
        vs = np.fromiter((e[1] for e in edges), dtype=np.int64, count=len(edges))
        return _native.component_labels(n, us, vs)
    return _fallback.component_labels(n, pairs)


def _select(backend: str | None):
    if backend is None:
        return _native if _native is not None else _fallback
    if backend == "native":
        if _native is None:
            raise RuntimeError("native kernels are not built on this install")
        return _native
    if backend == "python":
        return _fallback
    raise ValueError(f"unknown kernel backend {backend!r}")


def available_backends() -> tuple[str, ...]:
    return ("native", "python") if _native is not None else ("python",)
