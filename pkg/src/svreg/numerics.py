"""Small shared linear-algebra helpers used across the package."""

from __future__ import annotations

import numpy as np


class NumericalError(RuntimeError):
    """Raised when a linear-Gaussian computation breaks down numerically."""


def symmetrize(a: np.ndarray) -> np.ndarray:
    """Force exact symmetry; covariance recursions drift without this."""
    return 0.5 * (a + a.T)


def psd_sqrt(a: np.ndarray) -> np.ndarray:
    """Lower-triangular-ish square root of a PSD matrix.

    Cholesky when positive definite, eigendecomposition fallback for the
    merely semidefinite case (e.g. a zero process-noise block).
    """
    a = symmetrize(np.asarray(a, dtype=float))
    if a.shape[0] == 0:
        return a
    try:
        return np.linalg.cholesky(a)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(a)
        w = np.clip(w, 0.0, None)
        return v * np.sqrt(w)


def solve_psd(a: np.ndarray, b: np.ndarray, context: str = "") -> np.ndarray:
    """Solve a x = b for symmetric positive-definite a."""
    try:
        return np.linalg.solve(symmetrize(a), b)
    except np.linalg.LinAlgError as exc:
        cond = float(np.linalg.cond(a)) if np.all(np.isfinite(a)) else float("inf")
        raise NumericalError(
            f"singular system{' in ' + context if context else ''} (cond={cond:.3e})"
        ) from exc
