"""Shared test utilities: finite differences and tolerance checks.

The gradient checker here is the independent oracle for the tape: it
only ever calls forward evaluations and never touches the backward
machinery it is checking.
"""

from __future__ import annotations

import numpy as np


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued f() w.r.t. x, in place.

    f takes no arguments and must re-read x on every call; x is
    perturbed one entry at a time and restored afterwards.
    """
    g = np.zeros_like(x)
    flat = x.ravel()
    gflat = g.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return g


def assert_close(actual, expected, atol: float = 1e-6, rtol: float = 1e-4, label: str = ""):
    """Mixed bound: |a - e| <= max(atol, rtol * max(|a|, |e|)) entrywise."""
    actual = np.asarray(actual, dtype=np.float64)
    expected = np.asarray(expected, dtype=np.float64)
    assert actual.shape == expected.shape, (
        f"{label} shape mismatch {actual.shape} vs {expected.shape}"
    )
    diff = np.abs(actual - expected)
    bound = np.maximum(atol, rtol * np.maximum(np.abs(actual), np.abs(expected)))
    ok = diff <= bound
    if not ok.all():
        worst = np.unravel_index(np.argmax(diff - bound), diff.shape)
        raise AssertionError(
            f"{label} mismatch at {worst}: actual={actual[worst]!r} "
            f"expected={expected[worst]!r} diff={diff[worst]:.3e} bound={bound[worst]:.3e}"
        )
