"""Kalman filtering, fixed-interval smoothing and joint state simulation.

Works on linear-Gaussian state-space systems whose epochs may carry any
number of scalar observation rows (including none, for prediction-only
epochs).  Rows at one epoch are absorbed sequentially as scalar updates,
which is algebraically identical to a stacked vector update but never forms
an m x m innovation matrix.

``simulation_smoother`` draws one exact sample of the whole state sequence
conditional on the data via mean correction: simulate an unconditional state
path with pseudo-observations, smooth the real and the pseudo data, and
return ``x_plus - smooth(pseudo) + smooth(real)``.  Both smoothing passes
share one forward/backward sweep by carrying the real and pseudo values as
two columns through the same gain sequence.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .numerics import NumericalError, psd_sqrt, symmetrize
from .statespace import Transition

_LOG_2PI = math.log(2.0 * math.pi)


class ObsRow(NamedTuple):
    """One scalar measurement: loading vector, observed value, noise variance."""

    F: np.ndarray
    y: float
    var: float


@dataclass
class LinearGaussianSSM:
    """State-space system on a fixed epoch grid.

    ``times`` has one entry per epoch (index 0 is the initial epoch);
    ``transitions[j]`` spans ``times[j] -> times[j+1]`` and its process noise
    is scaled by ``noise_scale``.  ``obs[j]`` lists the rows observed at
    epoch j; missing data are simply absent rows.
    """

    times: np.ndarray
    state_dim: int
    transitions: Sequence[Transition]
    obs: Sequence[Sequence[ObsRow]]
    initial_mean: np.ndarray
    initial_cov: np.ndarray
    noise_scale: float = 1.0

    def validate(self) -> None:
        n = len(self.times)
        if len(self.transitions) != n - 1:
            raise ValueError("need exactly one transition per consecutive epoch pair")
        if len(self.obs) != n:
            raise ValueError("need one (possibly empty) observation list per epoch")
        for j, tr in enumerate(self.transitions):
            gap = self.times[j + 1] - self.times[j]
            if gap <= 0:
                raise ValueError(f"epochs must be strictly increasing (epoch {j})")
            if not math.isclose(tr.delta, gap, rel_tol=1e-9, abs_tol=1e-12):
                raise ValueError(f"transition {j} gap {tr.delta} != epoch gap {gap}")
        if self.noise_scale < 0:
            raise ValueError("noise_scale must be nonnegative")
        for j, rows in enumerate(self.obs):
            for row in rows:
                if row.var <= 0:
                    raise ValueError(f"observation variance must be positive (epoch {j})")


@dataclass
class SmootherOutput:
    """Filtered and (optionally) smoothed moments plus the data log-likelihood."""

    filtered_means: np.ndarray
    filtered_covs: np.ndarray
    loglik: float
    smoothed_means: Optional[np.ndarray] = None
    smoothed_covs: Optional[np.ndarray] = None


def _forward(ssm: LinearGaussianSSM, y_cols):
    """Forward pass over ``c`` data columns sharing one gain sequence.

    ``y_cols[j]`` is an (n_rows_j, c) array of observed values; only column 0
    contributes to the log-likelihood.
    """
    n = len(ssm.times)
    r = ssm.state_dim
    c = y_cols[0].shape[1]  # every block is (n_rows, c), including empty ones
    scale = ssm.noise_scale

    pred_m = np.empty((n, r, c))
    pred_p = np.empty((n, r, r))
    filt_m = np.empty((n, r, c))
    filt_p = np.empty((n, r, r))

    m = np.repeat(np.asarray(ssm.initial_mean, dtype=float)[:, None], c, axis=1)
    p = symmetrize(np.asarray(ssm.initial_cov, dtype=float))
    loglik = 0.0
    for j in range(n):
        if j > 0:
            g = ssm.transitions[j - 1].G
            m = g @ m
            p = symmetrize(g @ p @ g.T + scale * ssm.transitions[j - 1].W)
        pred_m[j] = m
        pred_p[j] = p
        for row, ys in zip(ssm.obs[j], y_cols[j]):
            f = row.F
            e = ys - f @ m
            pf = p @ f
            s = float(f @ pf + row.var)
            if s <= 0 or not math.isfinite(s):
                raise NumericalError(f"nonpositive innovation variance at epoch {j}")
            k = pf / s
            m = m + k[:, None] * e[None, :]
            p = symmetrize(p - np.outer(k, k) * s)
            loglik += -0.5 * (_LOG_2PI + math.log(s) + e[0] * e[0] / s)
        filt_m[j] = m
        filt_p[j] = p
    return pred_m, pred_p, filt_m, filt_p, loglik


def _backward(ssm: LinearGaussianSSM, pred_m, pred_p, filt_m, filt_p):
    n, r, c = filt_m.shape
    sm_m = np.empty_like(filt_m)
    sm_p = np.empty_like(filt_p)
    sm_m[n - 1] = filt_m[n - 1]
    sm_p[n - 1] = filt_p[n - 1]
    for j in range(n - 2, -1, -1):
        g = ssm.transitions[j].G
        try:
            gain = np.linalg.solve(pred_p[j + 1], g @ filt_p[j]).T
        except np.linalg.LinAlgError as exc:
            raise NumericalError(f"singular predicted covariance at epoch {j + 1}") from exc
        sm_m[j] = filt_m[j] + gain @ (sm_m[j + 1] - pred_m[j + 1])
        sm_p[j] = symmetrize(filt_p[j] + gain @ (sm_p[j + 1] - pred_p[j + 1]) @ gain.T)
    return sm_m, sm_p


def _real_columns(ssm: LinearGaussianSSM):
    return [np.array([[row.y] for row in rows], dtype=float).reshape(len(rows), 1)
            for rows in ssm.obs]


def kalman_filter(ssm: LinearGaussianSSM) -> SmootherOutput:
    """Forward recursion: filtered moments and the observation log-likelihood."""
    ssm.validate()
    _, _, filt_m, filt_p, loglik = _forward(ssm, _real_columns(ssm))
    return SmootherOutput(filtered_means=filt_m[:, :, 0], filtered_covs=filt_p,
                          loglik=loglik)


def kalman_smooth(ssm: LinearGaussianSSM) -> SmootherOutput:
    """Filter plus fixed-interval (RTS) backward pass."""
    ssm.validate()
    pred_m, pred_p, filt_m, filt_p, loglik = _forward(ssm, _real_columns(ssm))
    sm_m, sm_p = _backward(ssm, pred_m, pred_p, filt_m, filt_p)
    return SmootherOutput(filtered_means=filt_m[:, :, 0], filtered_covs=filt_p,
                          loglik=loglik, smoothed_means=sm_m[:, :, 0],
                          smoothed_covs=sm_p)


def simulation_smoother(ssm: LinearGaussianSSM, rng: np.random.Generator) -> np.ndarray:
    """One joint draw of all states conditional on all observations.

    Returns an (n_epochs, state_dim) array.  Scalar systems with at most one
    row per epoch take a plain-float fast path; both paths implement the same
    mean-correction algorithm.
    """
    ssm.validate()
    if ssm.state_dim == 1 and all(len(rows) <= 1 for rows in ssm.obs):
        return _simulation_smoother_scalar(ssm, rng)
    return _simulation_smoother_general(ssm, rng)


def _simulation_smoother_general(ssm: LinearGaussianSSM, rng: np.random.Generator) -> np.ndarray:
    n = len(ssm.times)
    r = ssm.state_dim
    scale = ssm.noise_scale
    sqrt_scale = math.sqrt(scale)

    x = np.empty((n, r))
    x[0] = ssm.initial_mean + psd_sqrt(ssm.initial_cov) @ rng.standard_normal(r)
    for j in range(1, n):
        tr = ssm.transitions[j - 1]
        x[j] = tr.G @ x[j - 1] + sqrt_scale * (psd_sqrt(tr.W) @ rng.standard_normal(r))

    y_cols = []
    for j, rows in enumerate(ssm.obs):
        block = np.empty((len(rows), 2))
        for i, row in enumerate(rows):
            block[i, 0] = row.y
            block[i, 1] = row.F @ x[j] + math.sqrt(row.var) * rng.standard_normal()
        y_cols.append(block)

    pred_m, pred_p, filt_m, filt_p, _ = _forward(ssm, y_cols)
    sm_m, _ = _backward(ssm, pred_m, pred_p, filt_m, filt_p)
    return x - sm_m[:, :, 1] + sm_m[:, :, 0]


def _simulation_smoother_scalar(ssm: LinearGaussianSSM, rng: np.random.Generator) -> np.ndarray:
    """Mean-correction draw for state_dim 1 in plain floats (hot path)."""
    n = len(ssm.times)
    scale = ssm.noise_scale
    gs = [float(tr.G[0, 0]) for tr in ssm.transitions]
    qs = [scale * float(tr.W[0, 0]) for tr in ssm.transitions]
    rows = [obs[0] if len(obs) else None for obs in ssm.obs]
    n_obs = sum(row is not None for row in rows)

    z = rng.standard_normal(n + n_obs)
    zi = 0

    m0 = float(ssm.initial_mean[0])
    p0 = float(ssm.initial_cov[0, 0])
    x = [0.0] * n
    x[0] = m0 + math.sqrt(p0) * z[zi]
    zi += 1
    for j in range(1, n):
        x[j] = gs[j - 1] * x[j - 1] + math.sqrt(qs[j - 1]) * z[zi]
        zi += 1

    pred_a = [0.0] * n
    pred_b = [0.0] * n
    pred_p = [0.0] * n
    filt_a = [0.0] * n
    filt_b = [0.0] * n
    filt_p = [0.0] * n
    ma, mb, p = m0, m0, p0
    for j in range(n):
        if j > 0:
            g = gs[j - 1]
            ma = g * ma
            mb = g * mb
            p = g * g * p + qs[j - 1]
        pred_a[j] = ma
        pred_b[j] = mb
        pred_p[j] = p
        row = rows[j]
        if row is not None:
            f = float(row.F[0])
            yp = f * x[j] + math.sqrt(row.var) * z[zi]
            zi += 1
            s = f * f * p + row.var
            if s <= 0.0 or not math.isfinite(s):
                raise NumericalError(f"nonpositive innovation variance at epoch {j}")
            k = p * f / s
            ma += k * (row.y - f * ma)
            mb += k * (yp - f * mb)
            p -= k * k * s
        filt_a[j] = ma
        filt_b[j] = mb
        filt_p[j] = p

    sa = filt_a[n - 1]
    sb = filt_b[n - 1]
    out = np.empty((n, 1))
    out[n - 1, 0] = x[n - 1] - sb + sa
    for j in range(n - 2, -1, -1):
        pp = pred_p[j + 1]
        if pp <= 0.0:
            raise NumericalError(f"singular predicted covariance at epoch {j + 1}")
        gain = filt_p[j] * gs[j] / pp
        sa = filt_a[j] + gain * (sa - pred_a[j + 1])
        sb = filt_b[j] + gain * (sb - pred_b[j + 1])
        out[j, 0] = x[j] - sb + sa
    return out
