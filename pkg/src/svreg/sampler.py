"""MCMC for the hierarchical curve model with subject-specific volatilities.

One iteration cycles through:

  (1) a joint simulation-smoother draw of each subject's deviation curve
      (value and derivatives on the subject's own epochs),
  (2) a joint draw of each group's mean curve on the merged grid,
  (3) conjugate inverse-gamma draws of the observation noise, the
      deviation-initial-state variance and the group-curve volatilities,
      plus a Metropolis-Hastings draw of every subject volatility,
  (4) the volatility regression: (beta, residual variance) of the
      log-volatilities on the covariates under a flat/Jeffreys prior.

Chains are deterministic functions of (seed, config, data).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np

from .data import Dataset
from .numerics import NumericalError
from .smoother import LinearGaussianSSM, ObsRow, simulation_smoother
from .statespace import make_transition


@dataclass(frozen=True)
class ModelConfig:
    """Model orders, hyperpriors and chain-length settings."""

    p: int = 2
    q: int = 1
    a: float = 0.01
    b: float = 0.01
    mean_init_var: float = 1e4
    n_iter: int = 15000
    burn_in: int = 5000
    thin: int = 5
    seed: int = 0

    def __post_init__(self) -> None:
        if self.p < 1 or self.q < 1:
            raise ValueError("curve orders p and q must be >= 1")
        if self.a <= 0 or self.b <= 0:
            raise ValueError("inverse-gamma hyperparameters must be positive")
        if self.mean_init_var <= 0:
            raise ValueError("mean_init_var must be positive")
        if self.n_iter < 1 or self.burn_in < 0 or self.burn_in >= self.n_iter:
            raise ValueError("need 0 <= burn_in < n_iter")
        if self.thin < 1:
            raise ValueError("thin must be >= 1")


class ChainData:
    """Everything about (dataset, config) that is constant along the chain.

    Precomputes the per-interval transition/noise matrices for every subject
    and for the merged grid, the flat observation layout, and the covariate
    factorizations used by the regression step.
    """

    def __init__(self, dataset: Dataset, config: ModelConfig):
        self.dataset = dataset
        self.config = config
        self.m = len(dataset.subjects)
        self.g = dataset.n_groups
        p, q = config.p, config.q

        grid = dataset.merged_grid
        if grid[0] <= 0:
            raise ValueError("observation times must be strictly positive")
        self.n = len(grid)
        self.grid0 = np.concatenate(([0.0], grid))
        self.mean_transitions = [
            make_transition(p, self.grid0[j + 1] - self.grid0[j]) for j in range(self.n)
        ]
        self.mean_G = np.stack([tr.G for tr in self.mean_transitions])
        self.mean_L = np.linalg.cholesky(np.stack([tr.W for tr in self.mean_transitions]))

        self.sub_times0 = []
        self.sub_transitions = []
        self.sub_G = []
        self.sub_L = []
        self.sub_pos = []
        self.n_obs = np.array([len(s.times) for s in dataset.subjects])
        for s in dataset.subjects:
            t0 = np.concatenate(([0.0], s.times))
            trs = [make_transition(q, t0[j + 1] - t0[j]) for j in range(len(s.times))]
            self.sub_times0.append(t0)
            self.sub_transitions.append(trs)
            self.sub_G.append(np.stack([tr.G for tr in trs]))
            self.sub_L.append(np.linalg.cholesky(np.stack([tr.W for tr in trs])))
            pos = np.searchsorted(grid, s.times) + 1
            self.sub_pos.append(pos)

        # flat observation layout, ordered by subject
        self.N = int(self.n_obs.sum())
        self.values_flat = np.concatenate([s.values for s in dataset.subjects])
        self.obs_pos = np.concatenate(self.sub_pos)
        self.obs_group = np.repeat([s.group - 1 for s in dataset.subjects], self.n_obs)
        bounds = np.concatenate(([0], np.cumsum(self.n_obs)))
        self.slices = [slice(bounds[i], bounds[i + 1]) for i in range(self.m)]
        self.group_of = np.array([s.group - 1 for s in dataset.subjects])
        self.group_obs_idx = [np.flatnonzero(self.obs_group == k) for k in range(self.g)]
        self.group_counts = [
            np.bincount(self.obs_pos[idx], minlength=self.n + 1)
            for idx in self.group_obs_idx
        ]

        self.X = np.stack([s.covariates for s in dataset.subjects])
        self.kk = self.X.shape[1]
        if np.linalg.matrix_rank(self.X) < self.kk:
            raise ValueError("covariate matrix is rank deficient")
        xtx = self.X.T @ self.X
        self.xtx_inv = np.linalg.inv(xtx)
        self.xtx_inv_chol = np.linalg.cholesky(self.xtx_inv)

        self.e1_p = np.zeros(p)
        self.e1_p[0] = 1.0
        self.e1_q = np.zeros(q)
        self.e1_q[0] = 1.0
        self.eye_p = np.eye(p)
        self.eye_q = np.eye(q)


@dataclass
class ChainState:
    """One point of the chain: latent curves plus all variance components."""

    group_states: list    # per group: (n+1, p) value+derivative rows
    dev_states: list      # per subject: (n_i+1, q)
    noise_var: float      # observation noise variance
    dev_init_var: float   # variance of the deviation initial states
    group_vol: np.ndarray  # (g,) group-curve volatilities
    subject_vol: np.ndarray  # (m,) subject volatilities
    beta: np.ndarray      # volatility-regression coefficients
    logvol_resid_var: float  # residual variance of the log-volatility regression

    def copy(self) -> "ChainState":
        return ChainState(
            group_states=[s.copy() for s in self.group_states],
            dev_states=[s.copy() for s in self.dev_states],
            noise_var=self.noise_var,
            dev_init_var=self.dev_init_var,
            group_vol=self.group_vol.copy(),
            subject_vol=self.subject_vol.copy(),
            beta=self.beta.copy(),
            logvol_resid_var=self.logvol_resid_var,
        )


def init_state(data: ChainData) -> ChainState:
    """Deterministic starting point: group curves at empirical group means."""
    group_states = []
    for k in range(data.g):
        idx = data.group_obs_idx[k]
        sums = np.bincount(data.obs_pos[idx], weights=data.values_flat[idx],
                           minlength=data.n + 1)
        counts = data.group_counts[k]
        first = np.zeros(data.n + 1)
        seen = counts > 0
        if seen.any():
            # fill unobserved epochs (incl. epoch 0) from neighbours
            first = np.interp(data.grid0, data.grid0[seen], sums[seen] / counts[seen])
        states = np.zeros((data.n + 1, data.config.p))
        states[:, 0] = first
        group_states.append(states)
    dev_states = [np.zeros((n_i + 1, data.config.q)) for n_i in data.n_obs]
    return ChainState(
        group_states=group_states,
        dev_states=dev_states,
        noise_var=1.0,
        dev_init_var=1.0,
        group_vol=np.ones(data.g),
        subject_vol=np.ones(data.m),
        beta=np.zeros(data.kk),
        logvol_resid_var=1.0,
    )


def _mean_at_obs(state: ChainState, data: ChainData) -> np.ndarray:
    out = np.empty(data.N)
    for k in range(data.g):
        idx = data.group_obs_idx[k]
        out[idx] = state.group_states[k][:, 0][data.obs_pos[idx]]
    return out


def _dev_at_obs(state: ChainState, data: ChainData) -> np.ndarray:
    return np.concatenate([state.dev_states[i][1:, 0] for i in range(data.m)])


def _quad_form(states: np.ndarray, g_stack: np.ndarray, l_stack: np.ndarray) -> float:
    """Sum of increment quadratic forms d' W^-1 d via the noise Cholesky factors."""
    pred = np.einsum("jab,jb->ja", g_stack, states[:-1])
    d = states[1:] - pred
    x = np.linalg.solve(l_stack, d[:, :, None])[:, :, 0]
    return float(np.sum(x * x))


def _invgamma(rng: np.random.Generator, shape, scale):
    return scale / rng.gamma(shape)


def sample_U(state: ChainState, data: ChainData, rng: np.random.Generator) -> list:
    """Step (1): redraw every subject's deviation curve given the group curves."""
    resid = data.values_flat - _mean_at_obs(state, data)
    q = data.config.q
    for i in range(data.m):
        r = resid[data.slices[i]]
        obs = [[]]
        obs.extend([[ObsRow(data.e1_q, float(v), state.noise_var)] for v in r])
        ssm = LinearGaussianSSM(
            times=data.sub_times0[i],
            state_dim=q,
            transitions=data.sub_transitions[i],
            obs=obs,
            initial_mean=np.zeros(q),
            initial_cov=state.dev_init_var * data.eye_q,
            noise_scale=float(state.subject_vol[i]),
        )
        try:
            state.dev_states[i] = simulation_smoother(ssm, rng)
        except NumericalError as exc:
            raise NumericalError(
                f"deviation draw failed for subject {data.dataset.subjects[i].id}: {exc}"
            ) from exc
    return state.dev_states


def sample_M(state: ChainState, data: ChainData, rng: np.random.Generator) -> list:
    """Step (2): redraw every group's mean curve on the merged grid.

    All group members observed at one merged epoch share the same loading and
    noise variance, so their rows are collapsed to the sufficient statistic
    (their mean, with variance noise_var / count) before filtering.
    """
    resid = data.values_flat - _dev_at_obs(state, data)
    p = data.config.p
    for k in range(data.g):
        idx = data.group_obs_idx[k]
        sums = np.bincount(data.obs_pos[idx], weights=resid[idx], minlength=data.n + 1)
        counts = data.group_counts[k]
        obs = []
        for j in range(data.n + 1):
            c = counts[j]
            if c:
                obs.append([ObsRow(data.e1_p, sums[j] / c, state.noise_var / c)])
            else:
                obs.append([])
        ssm = LinearGaussianSSM(
            times=data.grid0,
            state_dim=p,
            transitions=data.mean_transitions,
            obs=obs,
            initial_mean=np.zeros(p),
            initial_cov=data.config.mean_init_var * data.eye_p,
            noise_scale=float(state.group_vol[k]),
        )
        try:
            state.group_states[k] = simulation_smoother(ssm, rng)
        except NumericalError as exc:
            raise NumericalError(f"mean-curve draw failed for group {k + 1}: {exc}") from exc
    return state.group_states


def sample_sigma_eps(state: ChainState, data: ChainData, rng: np.random.Generator) -> float:
    """Step (3a): conjugate draw of the observation noise variance."""
    resid = data.values_flat - _mean_at_obs(state, data) - _dev_at_obs(state, data)
    rss = float(resid @ resid)
    state.noise_var = float(_invgamma(rng, data.config.a + 0.5 * data.N,
                                      data.config.b + 0.5 * rss))
    return state.noise_var


def sample_sigma_U0(state: ChainState, data: ChainData, rng: np.random.Generator) -> float:
    """Step (3b): conjugate draw of the deviation initial-state variance."""
    init = np.stack([state.dev_states[i][0] for i in range(data.m)])
    ss = float(np.sum(init * init))
    shape = data.config.a + 0.5 * data.m * data.config.q
    state.dev_init_var = float(_invgamma(rng, shape, data.config.b + 0.5 * ss))
    return state.dev_init_var


def sample_sigma_Mk(state: ChainState, data: ChainData, rng: np.random.Generator) -> np.ndarray:
    """Step (3c): conjugate draw of each group-curve volatility."""
    qf = np.array([
        _quad_form(state.group_states[k], data.mean_G, data.mean_L) for k in range(data.g)
    ])
    shape = data.config.a + 0.5 * data.n * data.config.p
    scales = data.config.b + 0.5 * qf
    state.group_vol = scales / rng.gamma(shape, size=data.g)
    return state.group_vol


def _mh_log_ratio(prop, cur, mu, s2, n_dims, qf, a_u, b_u):
    """Log acceptance ratio for the subject-volatility move (vectorized).

    Log-normal prior times Gaussian increment likelihood over inverse-gamma
    proposal; the noise-matrix determinants cancel between numerator and
    denominator.
    """
    lp = np.log(prop)
    lc = np.log(cur)
    prior = -(lp - lc) - ((lp - mu) ** 2 - (lc - mu) ** 2) / (2.0 * s2)
    like = -0.5 * n_dims * (lp - lc) - 0.5 * qf * (1.0 / prop - 1.0 / cur)
    proposal = -(a_u + 1.0) * (lc - lp) - b_u * (1.0 / cur - 1.0 / prop)
    return prior + like + proposal


def sample_sigma_Ui_mh(state: ChainState, data: ChainData,
                       rng: np.random.Generator) -> tuple[np.ndarray, int]:
    """Step (3d): Metropolis-Hastings update of every subject volatility.

    Proposals come from the inverse-gamma pseudo-posterior that ignores the
    log-normal regression prior; the acceptance ratio reinstates it.  Returns
    the per-subject acceptance flags and the count of non-finite log-ratios
    (rejected outright).
    """
    cfg = data.config
    qf = np.array([
        _quad_form(state.dev_states[i], data.sub_G[i], data.sub_L[i])
        for i in range(data.m)
    ])
    a_u = cfg.a + 0.5 * data.n_obs * cfg.q
    b_u = cfg.b + 0.5 * qf
    prop = b_u / rng.gamma(a_u)
    cur = state.subject_vol
    mu = data.X @ state.beta
    log_ratio = _mh_log_ratio(prop, cur, mu, state.logvol_resid_var,
                              data.n_obs * cfg.q, qf, a_u, b_u)
    log_u = np.log(rng.random(data.m))
    finite = np.isfinite(log_ratio)
    accept = finite & (log_u < log_ratio)
    state.subject_vol = np.where(accept, prop, cur)
    return accept, int(np.count_nonzero(~finite))


def sample_beta_sigma2(state: ChainState, data: ChainData,
                       rng: np.random.Generator) -> tuple[np.ndarray, float]:
    """Step (4): regression of log-volatilities on covariates, flat prior."""
    if data.m <= data.kk:
        raise ValueError("volatility regression needs more subjects than covariates")
    z = np.log(state.subject_vol)
    bhat = data.xtx_inv @ (data.X.T @ z)
    resid = z - data.X @ bhat
    dof = data.m - data.kk
    # the floor only binds when every volatility equals its neighbour exactly
    s2hat = max(float(resid @ resid) / dof, 1e-300)
    tau = rng.chisquare(dof)
    s2 = dof * s2hat / tau
    state.logvol_resid_var = float(s2)
    state.beta = bhat + math.sqrt(s2) * (data.xtx_inv_chol @ rng.standard_normal(data.kk))
    return state.beta, state.logvol_resid_var


@dataclass
class PosteriorDraws:
    """Thinned retained draws plus Metropolis bookkeeping."""

    config: ModelConfig
    subject_ids: list
    groups: np.ndarray            # (m,) 1-based group labels
    merged_grid0: np.ndarray      # merged grid with the initial epoch prepended
    subject_pos: list             # per subject: merged-grid row of each observation
    noise_var: np.ndarray         # (T,)
    dev_init_var: np.ndarray      # (T,)
    logvol_resid_var: np.ndarray  # (T,)
    group_vol: np.ndarray         # (T, g)
    subject_vol: np.ndarray       # (T, m)
    beta: np.ndarray              # (T, kk)
    group_states: list            # per group: (T, n+1, p)
    dev_states: list              # per subject: (T, n_i+1, q)
    mh_accepts: np.ndarray        # (m,) accepted moves over all iterations
    mh_accept_by_iter: np.ndarray  # (n_iter,) accepted moves per iteration
    mh_nonfinite: int

    @property
    def n_retained(self) -> int:
        return len(self.noise_var)

    def acceptance_rates(self) -> np.ndarray:
        return self.mh_accepts / self.config.n_iter

    def trajectory_draws(self, i: int) -> np.ndarray:
        """(T, n_i) draws of the fitted curve (mean + deviation) at subject i's times."""
        k = self.groups[i] - 1
        return (self.group_states[k][:, self.subject_pos[i], 0]
                + self.dev_states[i][:, 1:, 0])

    def mean_curve_draws(self, i: int) -> np.ndarray:
        k = self.groups[i] - 1
        return self.group_states[k][:, self.subject_pos[i], 0]

    def param_draws(self, include_subject_vol: bool = True) -> dict:
        """Scalar parameter chains keyed by their report names."""
        out = {"sigma2_eps": self.noise_var}
        for k in range(self.group_vol.shape[1]):
            out[f"sigma2_M[{k + 1}]"] = self.group_vol[:, k]
        out["sigma2_U0"] = self.dev_init_var
        out["sigma2_logvol"] = self.logvol_resid_var
        for l in range(self.beta.shape[1]):
            out[f"beta[{l}]"] = self.beta[:, l]
        if include_subject_vol:
            for i in range(self.subject_vol.shape[1]):
                out[f"sigma2_U[{i + 1}]"] = self.subject_vol[:, i]
        return out


def run_chain(config: ModelConfig, dataset: Dataset, *,
              init: Optional[ChainState] = None,
              sample_variances: bool = True) -> PosteriorDraws:
    """Run the full cycle for ``config.n_iter`` iterations and keep the thinned tail.

    ``sample_variances=False`` freezes every variance component and the
    regression at their initial values and only redraws the curves (used for
    fixed-volatility comparisons).
    """
    data = ChainData(dataset, config)
    if sample_variances and data.m <= data.kk:
        raise ValueError("volatility regression needs more subjects than covariates")
    rng = np.random.default_rng(config.seed)
    state = init.copy() if init is not None else init_state(data)

    n_ret = (config.n_iter - config.burn_in) // config.thin
    noise_var = np.empty(n_ret)
    dev_init_var = np.empty(n_ret)
    logvol_resid_var = np.empty(n_ret)
    group_vol = np.empty((n_ret, data.g))
    subject_vol = np.empty((n_ret, data.m))
    beta = np.empty((n_ret, data.kk))
    group_states = [np.empty((n_ret, data.n + 1, config.p)) for _ in range(data.g)]
    dev_states = [np.empty((n_ret, n_i + 1, config.q)) for n_i in data.n_obs]
    mh_accepts = np.zeros(data.m, dtype=int)
    mh_accept_by_iter = np.zeros(config.n_iter, dtype=np.int32)
    mh_nonfinite = 0

    ridx = 0
    for it in range(1, config.n_iter + 1):
        try:
            sample_U(state, data, rng)
            sample_M(state, data, rng)
            if sample_variances:
                sample_sigma_eps(state, data, rng)
                sample_sigma_U0(state, data, rng)
                sample_sigma_Mk(state, data, rng)
                accept, nf = sample_sigma_Ui_mh(state, data, rng)
                mh_accepts += accept
                mh_accept_by_iter[it - 1] = int(np.count_nonzero(accept))
                mh_nonfinite += nf
                sample_beta_sigma2(state, data, rng)
        except NumericalError as exc:
            raise NumericalError(f"iteration {it}: {exc}") from exc
        if it > config.burn_in and (it - config.burn_in) % config.thin == 0:
            noise_var[ridx] = state.noise_var
            dev_init_var[ridx] = state.dev_init_var
            logvol_resid_var[ridx] = state.logvol_resid_var
            group_vol[ridx] = state.group_vol
            subject_vol[ridx] = state.subject_vol
            beta[ridx] = state.beta
            for k in range(data.g):
                group_states[k][ridx] = state.group_states[k]
            for i in range(data.m):
                dev_states[i][ridx] = state.dev_states[i]
            ridx += 1

    return PosteriorDraws(
        config=config,
        subject_ids=[s.id for s in dataset.subjects],
        groups=np.array([s.group for s in dataset.subjects]),
        merged_grid0=data.grid0,
        subject_pos=data.sub_pos,
        noise_var=noise_var,
        dev_init_var=dev_init_var,
        logvol_resid_var=logvol_resid_var,
        group_vol=group_vol,
        subject_vol=subject_vol,
        beta=beta,
        group_states=group_states,
        dev_states=dev_states,
        mh_accepts=mh_accepts,
        mh_accept_by_iter=mh_accept_by_iter,
        mh_nonfinite=mh_nonfinite,
    )


# ---------------------------------------------------------------------------
# posterior summaries
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ParamSummary:
    name: str
    mean: float
    mode: float
    sd: float
    hpd_lo: float
    hpd_hi: float


def hpd_interval(samples: np.ndarray, prob: float = 0.95) -> tuple[float, float]:
    """Shortest interval containing ``prob`` of the draws."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = len(x)
    keep = int(math.floor(prob * n))
    if keep >= n:
        keep = n - 1
    if keep < 1:
        raise ValueError("too few draws for an HPD interval")
    widths = x[keep:] - x[: n - keep]
    i = int(np.argmin(widths))
    return float(x[i]), float(x[i + keep])


def kde_mode(samples: np.ndarray, grid_size: int = 512) -> float:
    """Mode of a Gaussian KDE with the normal-reference bandwidth."""
    x = np.asarray(samples, dtype=float)
    sd = float(np.std(x))
    if sd == 0.0:
        return float(x[0])
    iqr = float(np.subtract(*np.percentile(x, [75, 25])))
    spread = min(sd, iqr / 1.34) if iqr > 0 else sd
    bw = 1.06 * spread * len(x) ** (-0.2)
    grid = np.linspace(x.min(), x.max(), grid_size)
    dens = np.zeros(grid_size)
    for start in range(0, len(x), 8192):
        chunk = x[start:start + 8192]
        z = (grid[:, None] - chunk[None, :]) / bw
        dens += np.exp(-0.5 * z * z).sum(axis=1)
    return float(grid[int(np.argmax(dens))])


def summarize(draws) -> list:
    """Mean / mode / SD / 95% HPD for each scalar parameter chain.

    Accepts a :class:`PosteriorDraws` or a mapping of name -> 1-D array.
    """
    if isinstance(draws, PosteriorDraws):
        params = draws.param_draws()
    elif isinstance(draws, Mapping):
        params = draws
    else:
        raise TypeError("expected PosteriorDraws or a name -> samples mapping")
    rows = []
    for name, samples in params.items():
        x = np.asarray(samples, dtype=float)
        if x.ndim != 1:
            raise ValueError(f"parameter {name!r} must be a 1-D chain")
        if len(x) < 100:
            raise ValueError("need at least 100 retained draws to summarize")
        lo, hi = hpd_interval(x)
        rows.append(ParamSummary(
            name=name,
            mean=float(np.mean(x)),
            mode=kde_mode(x),
            sd=float(np.std(x, ddof=1)),
            hpd_lo=lo,
            hpd_hi=hi,
        ))
    return rows
