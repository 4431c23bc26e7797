"""Synthetic data generation, evaluation metrics and the two-stage baseline.

Case I draws curves from the model itself: order-2 group means with
volatility 10, order-1 subject deviations whose log-volatilities follow a
linear regression on two covariates, unit observation noise, a 20-point
design grid and 20% completely-at-random deletion.

Case II uses fixed smooth group means with small random harmonic deviations,
i.e. homogeneous volatility and no covariate effects.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .data import Dataset, Subject
from .statespace import make_transition

log = logging.getLogger(__name__)

CASE1_BETA = np.array([0.0, 0.6, 2.0])
_GRID = 0.2 * np.arange(1, 21)
_RETAIN_PROB = 0.8


@dataclass(frozen=True)
class SimTruth:
    """Ground truth for one simulated dataset (full design grid, no deletion)."""

    grid: np.ndarray           # (T,) design grid
    mean_curves: np.ndarray    # (g, T) group mean values
    dev_curves: np.ndarray     # (m, T) subject deviation values
    groups: np.ndarray         # (m,) 1-based group labels
    covariates: np.ndarray     # (m, k) design matrix with intercept
    subject_vol: Optional[np.ndarray]  # (m,) true volatilities, None for case II
    beta: Optional[np.ndarray]         # true regression coefficients, None for case II
    retained: np.ndarray       # (m, T) bool retention mask

    def trajectory(self, i: int) -> np.ndarray:
        """True mean + deviation at subject i's retained times."""
        mask = self.retained[i]
        return (self.mean_curves[self.groups[i] - 1] + self.dev_curves[i])[mask]


def simulate_iwp(rng: np.random.Generator, order: int, variances,
                 times: Sequence[float]) -> np.ndarray:
    """Exact paths of integrated Wiener processes started at zero state.

    ``variances`` is one volatility per path; returns (n_paths, len(times),
    order) state arrays at the given strictly-positive times.
    """
    variances = np.atleast_1d(np.asarray(variances, dtype=float))
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or np.any(np.diff(times) <= 0) or times[0] <= 0:
        raise ValueError("times must be strictly increasing and positive")
    n_paths = len(variances)
    scale = np.sqrt(variances)[:, None]
    out = np.empty((n_paths, len(times), order))
    x = np.zeros((n_paths, order))
    t_prev = 0.0
    for j, t in enumerate(times):
        tr = make_transition(order, t - t_prev)
        chol = np.linalg.cholesky(tr.W)
        z = rng.standard_normal((n_paths, order))
        x = x @ tr.G.T + scale * (z @ chol.T)
        out[:, j] = x
        t_prev = t
    return out


def _retention_masks(rng: np.random.Generator, m: int, n_times: int) -> np.ndarray:
    """Per-point Bernoulli retention, redrawn per subject until >= 2 points survive."""
    masks = np.empty((m, n_times), dtype=bool)
    for i in range(m):
        while True:
            mask = rng.random(n_times) < _RETAIN_PROB
            if mask.sum() >= 2:
                masks[i] = mask
                break
    return masks


def _assemble(grid, mean_curves, dev_curves, noise, groups, covariates, masks):
    m = len(groups)
    subjects = []
    width = max(3, len(str(m)))
    for i in range(m):
        mask = masks[i]
        y = mean_curves[groups[i] - 1] + dev_curves[i] + noise[i]
        subjects.append(Subject(
            id=f"S{i + 1:0{width}d}",
            group=int(groups[i]),
            times=grid[mask].copy(),
            values=y[mask],
            covariates=covariates[i].copy(),
        ))
    return Dataset.build(subjects)


def gen_case1(seed: int, m: int = 100) -> tuple[Dataset, SimTruth]:
    """Heterogeneous-volatility design sampled from the model itself."""
    rng = np.random.default_rng(seed)
    grid = _GRID.copy()
    groups = rng.integers(1, 3, size=m)
    x1 = (rng.random(m) < 0.4).astype(float)
    x2 = rng.normal(0.0, 0.5, size=m)
    covariates = np.column_stack([np.ones(m), x1, x2])
    logvol = covariates @ CASE1_BETA + rng.standard_normal(m)
    vol = np.exp(logvol)

    mean_curves = simulate_iwp(rng, 2, np.full(2, 10.0), grid)[:, :, 0]
    dev_curves = simulate_iwp(rng, 1, vol, grid)[:, :, 0]
    noise = rng.normal(0.0, 1.0, size=(m, len(grid)))
    masks = _retention_masks(rng, m, len(grid))

    dataset = _assemble(grid, mean_curves, dev_curves, noise, groups, covariates, masks)
    truth = SimTruth(grid=grid, mean_curves=mean_curves, dev_curves=dev_curves,
                     groups=groups, covariates=covariates, subject_vol=vol,
                     beta=CASE1_BETA.copy(), retained=masks)
    return dataset, truth


def gen_case2(seed: int, m: int = 100) -> tuple[Dataset, SimTruth]:
    """Homogeneous-volatility design: smooth means, harmonic random deviations."""
    rng = np.random.default_rng(seed)
    grid = _GRID.copy()
    groups = rng.integers(1, 3, size=m)
    a1 = rng.normal(0.0, 2.0, size=m)
    a2 = rng.normal(0.0, 1.0, size=m)
    noise = rng.normal(0.0, 1.0, size=(m, len(grid)))
    masks = _retention_masks(rng, m, len(grid))

    mean_curves = np.stack([10.0 * (grid + np.sin(grid)),
                            10.0 * (grid + np.cos(grid))])
    cos_part = np.cos(np.pi * grid / 10.0)
    sin_part = np.sin(np.pi * grid / 10.0)
    c1 = np.where(groups == 1, 0.6, 0.5)
    c2 = np.where(groups == 1, 0.2, 0.3)
    dev_curves = (c1 * a1)[:, None] * cos_part + (c2 * a2)[:, None] * sin_part

    covariates = np.ones((m, 1))
    dataset = _assemble(grid, mean_curves, dev_curves, noise, groups, covariates, masks)
    truth = SimTruth(grid=grid, mean_curves=mean_curves, dev_curves=dev_curves,
                     groups=groups, covariates=covariates, subject_vol=None,
                     beta=None, retained=masks)
    return dataset, truth


# ---------------------------------------------------------------------------
# evaluation metrics
# ---------------------------------------------------------------------------

def ase_trajectory(estimates: Sequence[np.ndarray], truths: Sequence[np.ndarray]) -> float:
    """Across-subject mean of per-subject mean squared curve error."""
    if len(estimates) != len(truths):
        raise ValueError("estimate and truth lists differ in length")
    per_subject = []
    for est, tru in zip(estimates, truths):
        est = np.asarray(est, dtype=float)
        tru = np.asarray(tru, dtype=float)
        if est.shape != tru.shape:
            raise ValueError("estimate and truth shapes differ")
        per_subject.append(float(np.mean((est - tru) ** 2)))
    return float(np.mean(per_subject))


def ase_logvol(estimates: np.ndarray, truths: np.ndarray) -> float:
    """Mean squared error of log volatilities."""
    est = np.asarray(estimates, dtype=float)
    tru = np.asarray(truths, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth shapes differ")
    return float(np.mean((np.log(est) - np.log(tru)) ** 2))


def se_beta(estimate: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Coefficient-wise squared errors."""
    est = np.asarray(estimate, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if est.shape != tru.shape:
        raise ValueError("estimate and truth shapes differ")
    return (est - tru) ** 2


def empirical_volatility(values: Sequence[float], times: Sequence[float]) -> float:
    """Mean squared increment per unit time, averaged over the series length."""
    v = np.asarray(values, dtype=float)
    t = np.asarray(times, dtype=float)
    if len(v) < 2 or v.shape != t.shape:
        raise ValueError("need at least two aligned points")
    gaps = np.diff(t)
    if np.any(gaps <= 0):
        raise ValueError("times must be strictly increasing")
    return float(np.sum(np.diff(v) ** 2 / gaps) / len(v))


@dataclass(frozen=True)
class TwoStageResult:
    beta: np.ndarray
    p_values: np.ndarray
    n_excluded: int


def two_stage_beta(dev_curves: Sequence[np.ndarray], times: Sequence[np.ndarray],
                   X: np.ndarray) -> TwoStageResult:
    """OLS of log empirical volatility on covariates, with t-test p-values.

    Subjects with zero empirical volatility are excluded (their log is
    undefined); the exclusion count is reported and logged.
    """
    X = np.asarray(X, dtype=float)
    vols = np.array([empirical_volatility(u, t) for u, t in zip(dev_curves, times)])
    keep = vols > 0
    n_excluded = int(np.count_nonzero(~keep))
    if n_excluded:
        log.warning("two-stage regression: excluded %d subjects with zero "
                    "empirical volatility", n_excluded)
    z = np.log(vols[keep])
    xk = X[keep]
    n, k = xk.shape
    if n <= k:
        raise ValueError("too few usable subjects for the regression")
    if np.linalg.matrix_rank(xk) < k:
        raise ValueError("covariate matrix is rank deficient")
    xtx_inv = np.linalg.inv(xk.T @ xk)
    beta = xtx_inv @ (xk.T @ z)
    resid = z - xk @ beta
    s2 = float(resid @ resid) / (n - k)
    se = np.sqrt(s2 * np.diag(xtx_inv))
    with np.errstate(divide="ignore", invalid="ignore"):
        tstat = np.where(se > 0, beta / se, np.inf)
    p_values = 2.0 * stats.t.sf(np.abs(tstat), df=n - k)
    return TwoStageResult(beta=beta, p_values=p_values, n_excluded=n_excluded)
