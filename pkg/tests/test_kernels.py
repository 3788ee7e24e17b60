"""Edit-distance kernel: oracle equivalence on both execution paths."""

from __future__ import annotations

import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import oracle_levenshtein
from textward import kernels

short_text = st.text(alphabet="abcdefgh ", max_size=24)


class TestLevenshtein:
    def test_known_values(self):
        assert kernels.levenshtein("kitten", "sitting") == 3
        assert kernels.levenshtein("", "") == 0
        assert kernels.levenshtein("abc", "") == 3
        assert kernels.levenshtein("", "abc") == 3
        assert kernels.levenshtein("same", "same") == 0
        assert kernels.levenshtein("flaw", "lawn") == 2

    def test_unicode_codepoints(self):
        assert kernels.levenshtein("café", "cafe") == 1
        assert kernels.levenshtein("日本語", "日本") == 1

    @given(short_text, short_text)
    @settings(max_examples=400)
    def test_matches_oracle(self, a, b):
        assert kernels.levenshtein(a, b) == oracle_levenshtein(a, b)

    @given(short_text, short_text)
    @settings(max_examples=150)
    def test_metric_properties(self, a, b):
        d = kernels.levenshtein(a, b)
        assert d == kernels.levenshtein(b, a)
        assert d >= abs(len(a) - len(b))
        assert d <= max(len(a), len(b))
        assert (d == 0) == (a == b)

    def test_numpy_fallback_equals_active_path(self, rng):
        for _ in range(200):
            a = "".join(rng.choice("abcdefgh") for _ in range(rng.randint(0, 20)))
            b = "".join(rng.choice("abcdefgh") for _ in range(rng.randint(0, 20)))
            aa, bb = kernels._codepoints(a), kernels._codepoints(b)
            assert kernels._levenshtein_numpy(aa, bb) == oracle_levenshtein(a, b)

    def test_env_flag_selects_fallback(self):
        # A fresh interpreter with the flag off must not load the jit path
        # and must still agree with this process on a fixed fixture.
        code = (
            "from textward import kernels;"
            "assert not kernels.USING_NUMBA;"
            "print(kernels.levenshtein('kitten', 'sitting'))"
        )
        out = subprocess.run(
            [sys.executable, "-c", code],
            env={"TEXTWARD_NUMBA": "0", "PATH": "/usr/bin:/bin:/usr/local/bin"},
            capture_output=True,
            text=True,
            check=True,
        )
        assert out.stdout.strip() == "3"


class TestVectorOps:
    def test_unit_normalize_rows(self):
        m = np.array([[3.0, 4.0], [0.0, 0.0], [0.0, 2.0]])
        u = kernels.unit_normalize(m)
        assert np.allclose(u[0], [0.6, 0.8])
        assert np.allclose(u[1], [0.0, 0.0])  # zero rows stay zero
        assert np.allclose(np.linalg.norm(u[2]), 1.0)

    def test_pairwise_cosine_bounds_and_diagonal(self, rng):
        m = np.array([[rng.uniform(-1, 1) for _ in range(8)] for _ in range(12)])
        sims = kernels.pairwise_cosine(m)
        assert sims.shape == (12, 12)
        assert np.all(sims <= 1.0) and np.all(sims >= -1.0)
        assert np.allclose(np.diag(sims), 1.0)
        assert np.allclose(sims, sims.T)

    def test_cosine_of_duplicates_is_one(self):
        m = np.array([[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]])
        sims = kernels.pairwise_cosine(m)
        assert sims[0, 1] == pytest.approx(1.0)
