"""Exact discretization of the (r-1)-times integrated Wiener process.

The state vector stacks a function value and its first r-1 derivatives.
Between two epochs separated by ``delta`` the state follows a linear-Gaussian
step ``x' = G x + w`` with ``w ~ N(0, W)``.  Both matrices have finite closed
forms because the drift matrix (ones on the superdiagonal) is nilpotent:

    G[l, l+k] = delta^k / k!
    W[l, l']  = delta^(2r+1-l-l') / ((r-l)! (r-l')! (2r+1-l-l'))   (1-based l)

``W`` is the covariance of the integrated white noise driving the top
derivative; see :mod:`svreg.gp_kernels` for the equivalent kernel view.
"""

from __future__ import annotations

from dataclasses import dataclass
from math import factorial

import numpy as np


def _check_args(r: int, delta: float) -> float:
    if not isinstance(r, (int, np.integer)) or r < 1:
        raise ValueError(f"state order must be a positive integer, got {r!r}")
    delta = float(delta)
    if not np.isfinite(delta) or delta < 0:
        raise ValueError(f"time gap must be a finite nonnegative real, got {delta!r}")
    return delta


def transition_matrix(r: int, delta: float) -> np.ndarray:
    """Matrix exponential of the nilpotent drift times ``delta``.

    The exponential series terminates: the drift matrix C satisfies C^r = 0,
    so summing k = 0 .. r-1 is exact (the k = r term is identically zero).
    """
    delta = _check_args(r, delta)
    g = np.eye(r)
    for k in range(1, r):
        g += np.diag(np.full(r - k, delta**k / factorial(k)), k)
    return g


def process_noise(r: int, delta: float) -> np.ndarray:
    """Exact process-noise covariance accumulated over a gap of ``delta``.

    Closed form of the integral of exp(C(delta-u)) D D' exp(C'(delta-u)) over
    u in [0, delta] with D the last unit vector; validated against adaptive
    quadrature in the test suite.
    """
    delta = _check_args(r, delta)
    if delta == 0.0:
        return np.zeros((r, r))
    idx = np.arange(1, r + 1)
    expo = 2 * r + 1 - idx[:, None] - idx[None, :]
    fact = np.array([factorial(r - l) for l in idx], dtype=float)
    return delta**expo / (fact[:, None] * fact[None, :] * expo)


@dataclass(frozen=True)
class Transition:
    """One discretized step: order, gap and the (G, W) pair for that gap."""

    order: int
    delta: float
    G: np.ndarray
    W: np.ndarray


def make_transition(r: int, delta: float) -> Transition:
    """Bundle the transition and noise matrices for one time gap."""
    return Transition(order=r, delta=float(delta), G=transition_matrix(r, delta),
                      W=process_noise(r, delta))
