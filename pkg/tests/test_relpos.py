"""Relative distance function and matrix: frozen values and properties."""

import numpy as np
import numpy.testing as npt
import pytest

from desklm.errors import ConfigError
from desklm.relpos import build_delta_matrix, delta, max_reach


def reference_delta(i, j, k):
    """Independent re-derivation, kept deliberately literal."""
    if i - j <= -k:
        return 0
    elif i - j >= k:
        return 2 * k - 1
    else:
        return i - j + k


def test_frozen_examples():
    assert delta(0, 9, 4) == 0
    assert delta(9, 0, 4) == 7
    assert delta(3, 3, 4) == 4
    assert delta(100, 97, 512) == 515


def test_matrix_frozen_example():
    dm = build_delta_matrix(3, 2)
    npt.assert_array_equal(dm.values, [[2, 1, 0], [3, 2, 1], [3, 3, 2]])


def test_exhaustive_against_reference():
    for k in range(1, 9):
        n = 4 * k
        dm = build_delta_matrix(n, k)
        for i in range(n):
            for j in range(n):
                assert dm.values[i, j] == reference_delta(i, j, k), (i, j, k)


def test_range_and_diagonal():
    for k in (1, 3, 8):
        for n in (1, 2, 17):
            dm = build_delta_matrix(n, k)
            assert dm.values.min() >= 0
            assert dm.values.max() <= 2 * k - 1
            npt.assert_array_equal(np.diag(dm.values), np.full(n, k))


def test_shift_invariance():
    k, n = 5, 40
    dm = build_delta_matrix(n, k).values
    for s in (1, 3, 11):
        npt.assert_array_equal(dm[s:, s:], dm[:-s, :-s])


def test_asymmetry_pairing_inside_window():
    # For |i - j| < k the two orientations always sum to 2k.
    for k in (2, 4, 7):
        n = 3 * k
        dm = build_delta_matrix(n, k).values
        for i in range(n):
            for j in range(n):
                if abs(i - j) < k:
                    assert dm[i, j] + dm[j, i] == 2 * k


def test_clipping_saturates():
    k, n = 3, 12
    dm = build_delta_matrix(n, k).values
    assert dm[0, 11] == 0          # far ahead
    assert dm[11, 0] == 2 * k - 1  # far behind
    # everything at distance >= k collapses into the same bin
    assert dm[0, 3] == dm[0, 8] == 0
    assert dm[8, 2] == dm[11, 1] == 2 * k - 1


def test_cache_returns_same_object():
    a = build_delta_matrix(16, 4)
    b = build_delta_matrix(16, 4)
    assert a is b
    with pytest.raises(ValueError):
        a.values[0, 0] = 9  # read-only


def test_max_reach_values():
    assert max_reach(512, 24) == 24528
    assert max_reach(512, 12) == 12264
    assert max_reach(1, 24) == 0
    assert max_reach(4, 2) == 12


def test_validation():
    with pytest.raises(ConfigError):
        delta(0, 0, 0)
    with pytest.raises(ConfigError):
        build_delta_matrix(0, 4)
    with pytest.raises(ConfigError):
        build_delta_matrix(4, -1)
    with pytest.raises(ConfigError):
        max_reach(3, 0)
