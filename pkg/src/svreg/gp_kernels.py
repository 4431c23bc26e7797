"""Closed-form kernels of the integrated-Wiener-process priors.

A curve of smoothing order r splits into two independent zero-mean Gaussian
pieces: a polynomial part spanned by phi_l(t) = t^l / l! for l < r (the
"null" part, carrying the random initial value and derivatives), and an
integrated-noise part with covariance

    green(r, s, t) = integral_0^min(s,t) G_r(s,u) G_r(t,u) du,
    G_r(s, u) = (s - u)_+^(r-1) / (r-1)!

Group mean curves use order p, subject deviation curves order q.  The
``direct_gp_posterior`` oracle conditions the full hierarchical model by
dense Gaussian algebra; it is the O(n^3) cross-check for the state-space
samplers and is only meant for small instances.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import comb, factorial
from typing import Mapping, Sequence

import numpy as np

from .numerics import NumericalError, symmetrize

_ORACLE_MAX_OBS = 200


def poly_basis(l: int, t: float) -> float:
    """Scaled monomial t^l / l!."""
    if l < 0:
        raise ValueError(f"basis degree must be nonnegative, got {l}")
    return float(t) ** l / factorial(l)


def null_kernel(r: int, s: float, t: float) -> float:
    """Covariance contributed by the random polynomial part of order r."""
    return sum(poly_basis(l, s) * poly_basis(l, t) for l in range(r))


def _green_pair(r: int, s: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Vectorized green(r, s, t); broadcasts over s and t."""
    s = np.asarray(s, dtype=float)
    t = np.asarray(t, dtype=float)
    lo = np.minimum(s, t)
    gap = np.abs(s - t)
    out = np.zeros(np.broadcast(s, t).shape)
    for j in range(r):
        out += comb(r - 1, j) * gap ** (r - 1 - j) * lo ** (r + j) / (r + j)
    return out / factorial(r - 1) ** 2


def green_kernel(r: int, s: float, t: float) -> float:
    """Integrated-noise covariance; exact polynomial closed form.

    Integrating the truncated-power product over [0, min(s, t)] and expanding
    around the smaller argument gives, for s <= t,

        sum_j C(r-1, j) (t-s)^(r-1-j) s^(r+j) / (r+j) / ((r-1)!)^2.

    The quadrature oracle in the tests pins this form down entrywise.
    """
    return float(_green_pair(r, s, t))


def gram(points: Sequence[float], r: int, kind: str = "green") -> np.ndarray:
    """Kernel matrix over sorted points (or the n x r basis matrix).

    kind "green" gives the pairwise integrated-noise covariance; kind "null"
    gives the polynomial basis matrix with columns phi_0 .. phi_{r-1}.
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim != 1:
        raise ValueError("points must be one-dimensional")
    if np.any(np.diff(pts) < 0):
        raise ValueError("points must be sorted ascending")
    if kind == "green":
        return _green_pair(r, pts[:, None], pts[None, :])
    if kind == "null":
        return poly_matrix(pts, r)
    raise ValueError(f"kind must be 'null' or 'green', got {kind!r}")


def poly_matrix(points: Sequence[float], r: int) -> np.ndarray:
    """n x r matrix of phi_l(t_i) = t_i^l / l!."""
    pts = np.asarray(points, dtype=float)
    cols = [pts**l / factorial(l) for l in range(r)]
    return np.stack(cols, axis=1)


def green_cross(r: int, rows: Sequence[float], cols: Sequence[float]) -> np.ndarray:
    """Rectangular green-kernel matrix between two point sets."""
    a = np.asarray(rows, dtype=float)
    b = np.asarray(cols, dtype=float)
    return _green_pair(r, a[:, None], b[None, :])


# ---------------------------------------------------------------------------
# Direct Gaussian-conditioning oracle for the hierarchical model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ObsPoint:
    """One scalar observation: subject, its group, time and value."""

    subject: object
    group: object
    time: float
    value: float


@dataclass(frozen=True)
class Target:
    """A requested posterior quantity.

    kind "mean" is the group curve at ``time`` (set ``group``); kind "dev" is
    a subject's deviation curve (set ``subject`` and ``group``); kind "traj"
    is their sum.
    """

    kind: str
    time: float
    subject: object = None
    group: object = None


@dataclass(frozen=True)
class GPModel:
    """Variance configuration of the hierarchical Gaussian process."""

    order_mean: int
    order_dev: int
    noise_var: float
    mean_init_var: float
    dev_init_var: float
    group_vol: Mapping[object, float] = field(default_factory=dict)
    subject_vol: Mapping[object, float] = field(default_factory=dict)


def _atom(kind: str, subject, group, time):
    has_mean = kind in ("mean", "traj")
    has_dev = kind in ("dev", "traj")
    if kind not in ("mean", "dev", "traj"):
        raise ValueError(f"unknown target kind {kind!r}")
    return (has_mean, has_dev, subject, group, float(time))


def _cov(model: GPModel, a, b) -> float:
    mean_a, dev_a, subj_a, grp_a, s = a
    mean_b, dev_b, subj_b, grp_b, t = b
    c = 0.0
    if mean_a and mean_b and grp_a == grp_b:
        c += model.mean_init_var * null_kernel(model.order_mean, s, t)
        c += model.group_vol[grp_a] * green_kernel(model.order_mean, s, t)
    if dev_a and dev_b and subj_a == subj_b:
        c += model.dev_init_var * null_kernel(model.order_dev, s, t)
        c += model.subject_vol[subj_a] * green_kernel(model.order_dev, s, t)
    return c


def observation_covariance(obs: Sequence[ObsPoint], model: GPModel) -> np.ndarray:
    """Joint covariance of the stacked observation vector, noise included."""
    atoms = [_atom("traj", o.subject, o.group, o.time) for o in obs]
    n = len(atoms)
    k = np.empty((n, n))
    for i in range(n):
        for j in range(i, n):
            k[i, j] = k[j, i] = _cov(model, atoms[i], atoms[j])
    return k + model.noise_var * np.eye(n)


def direct_gp_posterior(
    obs: Sequence[ObsPoint],
    targets: Sequence[Target],
    model: GPModel,
) -> tuple[np.ndarray, np.ndarray]:
    """Exact posterior mean and covariance of the targets given the data.

    Dense conditioning on the full joint Gaussian; capped at 200 observations
    because beyond that both cost and conditioning leave the oracle's
    contract.  A jitter of 1e-10 * mean diagonal is added before
    factorization.
    """
    if len(obs) > _ORACLE_MAX_OBS:
        raise ValueError(f"oracle limited to {_ORACLE_MAX_OBS} observations, got {len(obs)}")
    t_atoms = [_atom(t.kind, t.subject, t.group, t.time) for t in targets]
    nt = len(t_atoms)
    k_tt = np.empty((nt, nt))
    for i in range(nt):
        for j in range(i, nt):
            k_tt[i, j] = k_tt[j, i] = _cov(model, t_atoms[i], t_atoms[j])
    if not obs:
        return np.zeros(nt), k_tt

    o_atoms = [_atom("traj", o.subject, o.group, o.time) for o in obs]
    y = np.array([o.value for o in obs], dtype=float)
    k_oo = observation_covariance(obs, model)
    k_oo += (1e-10 * np.trace(k_oo) / len(obs)) * np.eye(len(obs))
    k_to = np.array([[_cov(model, ta, oa) for oa in o_atoms] for ta in t_atoms])
    try:
        chol = np.linalg.cholesky(k_oo)
    except np.linalg.LinAlgError as exc:
        raise NumericalError(
            "assembled observation covariance is not positive definite "
            f"(cond={np.linalg.cond(k_oo):.3e})"
        ) from exc
    alpha = np.linalg.solve(chol.T, np.linalg.solve(chol, y))
    v = np.linalg.solve(chol, k_to.T)
    mean = k_to @ alpha
    cov = symmetrize(k_tt - v.T @ v)
    return mean, cov
