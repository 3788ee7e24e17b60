"""Numeric hot kernels: character edit distance and pairwise cosine similarity.

Character-level edit distance dominates runtime when evaluating large
corpora, so the inner DP loop is JIT-compiled with numba. A vectorized
pure-numpy path is kept as a fallback and can be forced with
``TEXTWARD_NUMBA=0`` (it is also selected automatically when numba is not
importable). Both paths compute the plain Levenshtein distance with unit
costs and agree exactly; ``benchmarks/bench_kernels.py`` compares them.
"""

from __future__ import annotations

import os

import numpy as np


def _codepoints(s: str) -> np.ndarray:
    return np.frombuffer(s.encode("utf-32-le"), dtype=np.int32)


def _levenshtein_rows(a: np.ndarray, b: np.ndarray) -> int:
    # Two-row DP, scalar inner loop. Only ever executed under numba.
    n = a.shape[0]
    m = b.shape[0]
    prev = np.arange(m + 1, dtype=np.int64)
    cur = np.empty(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        cur[0] = i
        ai = a[i - 1]
        for j in range(1, m + 1):
            d = prev[j - 1] + (0 if b[j - 1] == ai else 1)
            if prev[j] + 1 < d:
                d = prev[j] + 1
            if cur[j - 1] + 1 < d:
                d = cur[j - 1] + 1
            cur[j] = d
        prev, cur = cur, prev
    return int(prev[m])


def _levenshtein_numpy(a: np.ndarray, b: np.ndarray) -> int:
    # Row DP with the left-neighbor dependency folded in as a prefix
    # minimum: min_k<=j (c[k] + (j - k)) == minimum.accumulate(c - j) + j.
    m = b.shape[0]
    offsets = np.arange(m + 1, dtype=np.int64)
    prev = offsets.copy()
    for i in range(1, a.shape[0] + 1):
        full = np.empty(m + 1, dtype=np.int64)
        full[0] = i
        full[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b != a[i - 1]))
        prev = np.minimum.accumulate(full - offsets) + offsets
    return int(prev[m])


def _env_wants_numba() -> bool:
    return os.environ.get("TEXTWARD_NUMBA", "1").strip().lower() not in ("0", "false", "off")


USING_NUMBA = False
_levenshtein_jit = None
if _env_wants_numba():
    try:
        from numba import njit

        _levenshtein_jit = njit(cache=True, nogil=True)(_levenshtein_rows)
        USING_NUMBA = True
    except ImportError:
        USING_NUMBA = False


def levenshtein(a: str, b: str) -> int:
    """Unit-cost edit distance between two strings."""
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    ca, cb = _codepoints(a), _codepoints(b)
    if USING_NUMBA:
        return int(_levenshtein_jit(ca, cb))
    return _levenshtein_numpy(ca, cb)


def unit_normalize(matrix: np.ndarray) -> np.ndarray:
    """Rows scaled to Euclidean norm 1; zero rows are left at zero."""
    m = np.asarray(matrix, dtype=np.float64)
    norms = np.linalg.norm(m, axis=1, keepdims=True)
    return m / np.where(norms == 0.0, 1.0, norms)


def pairwise_cosine(matrix: np.ndarray) -> np.ndarray:
    """Full cosine-similarity matrix of the rows, clipped to [-1, 1]."""
    unit = unit_normalize(matrix)
    return np.clip(unit @ unit.T, -1.0, 1.0)
