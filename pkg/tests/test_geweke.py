"""Joint-distribution (successive- vs marginal-conditional) consistency check.

The production regression step uses an improper flat prior, which has no
marginal-conditional counterpart, so this harness swaps in a proper
normal-inverse-gamma prior for (beta, residual variance) on both arms.  All
other conditionals are the production ones.  The successive-conditional chain
alternates one full parameter sweep with a data regeneration; its stationary
marginals must match plain prior simulation.

Hyperparameter choice matters here: the volatility move is an independence
sampler whose importance weight grows like exp(b / vol) as vol -> 0, so a
large prior scale b freezes the chain once a volatility wanders small.  The
toy uses shape 4 / scale 0.25: finite prior variance for the moment
comparison and a freeze region the chain never visits.
"""

import math

import numpy as np
import pytest

from svreg.data import Dataset, Subject
from svreg.sampler import (ChainData, ModelConfig, init_state, sample_M,
                           sample_U, sample_sigma_Mk, sample_sigma_U0,
                           sample_sigma_Ui_mh, sample_sigma_eps)
from svreg.statespace import make_transition

A0, B0 = 4.0, 0.25        # inverse-gamma hyperparameters everywhere
V0 = 0.5                  # prior scale of beta relative to the residual variance
TIMES = np.array([0.5, 1.0, 1.5, 2.0])
XCOL = np.array([0.0, 1.0, 0.0, 1.0])
M_SUBJ = 4


def toy_dataset():
    subjects = [
        Subject(id=f"s{i}", group=1, times=TIMES.copy(), values=np.zeros(4),
                covariates=np.array([1.0, XCOL[i]]))
        for i in range(M_SUBJ)
    ]
    return Dataset(subjects=subjects, n_groups=1, merged_grid=TIMES.copy())


def config():
    return ModelConfig(p=2, q=1, a=A0, b=B0, mean_init_var=1.0,
                       n_iter=2, burn_in=1, thin=1, seed=0)


def draw_invgamma(rng, a, b, size=None):
    return b / rng.gamma(a, size=size)


def draw_beta_sigma2_prior(rng, kk):
    s2 = float(draw_invgamma(rng, A0, B0))
    beta = math.sqrt(s2 * V0) * rng.standard_normal(kk)
    return beta, s2


def conjugate_beta_sigma2(state, data, rng):
    """Normal-inverse-gamma posterior update (test-local proper prior)."""
    z = np.log(state.subject_vol)
    x = data.X
    v0_inv = np.eye(data.kk) / V0
    vn_inv = v0_inv + x.T @ x
    vn = np.linalg.inv(vn_inv)
    mn = vn @ (x.T @ z)
    a_n = A0 + 0.5 * data.m
    b_n = B0 + 0.5 * float(z @ z - mn @ vn_inv @ mn)
    s2 = float(draw_invgamma(rng, a_n, b_n))
    beta = mn + math.sqrt(s2) * (np.linalg.cholesky(vn) @ rng.standard_normal(data.kk))
    state.beta = beta
    state.logvol_resid_var = s2
    return beta, s2


def prior_state_and_data(rng, data):
    """One exact draw of all parameters and data from the model."""
    cfg = data.config
    state = init_state(data)
    state.noise_var = float(draw_invgamma(rng, A0, B0))
    state.dev_init_var = float(draw_invgamma(rng, A0, B0))
    state.group_vol = draw_invgamma(rng, A0, B0, size=1)
    state.beta, state.logvol_resid_var = draw_beta_sigma2_prior(rng, data.kk)
    state.subject_vol = np.exp(data.X @ state.beta
                               + math.sqrt(state.logvol_resid_var)
                               * rng.standard_normal(data.m))

    trans = [make_transition(cfg.p, d) for d in np.diff(data.grid0)]
    m_states = np.empty((len(data.grid0), cfg.p))
    m_states[0] = math.sqrt(cfg.mean_init_var) * rng.standard_normal(cfg.p)
    for j, tr in enumerate(trans):
        chol = np.linalg.cholesky(tr.W)
        m_states[j + 1] = (tr.G @ m_states[j]
                           + math.sqrt(state.group_vol[0]) * (chol @ rng.standard_normal(cfg.p)))
    state.group_states[0] = m_states

    for i in range(data.m):
        t0 = data.sub_times0[i]
        u = np.empty((len(t0), cfg.q))
        u[0] = math.sqrt(state.dev_init_var) * rng.standard_normal(cfg.q)
        for j, tr in enumerate(data.sub_transitions[i]):
            chol = np.linalg.cholesky(tr.W)
            u[j + 1] = (tr.G @ u[j]
                        + math.sqrt(state.subject_vol[i]) * (chol @ rng.standard_normal(cfg.q)))
        state.dev_states[i] = u

    regenerate_data(state, data, rng)
    return state


def regenerate_data(state, data, rng):
    mean_at = np.concatenate([
        state.group_states[0][:, 0][data.obs_pos[data.slices[i]]] for i in range(data.m)
    ])
    dev_at = np.concatenate([state.dev_states[i][1:, 0] for i in range(data.m)])
    data.values_flat[:] = (mean_at + dev_at
                           + math.sqrt(state.noise_var) * rng.standard_normal(data.N))


def stats_vector(state, data):
    return np.array([
        state.noise_var,
        state.noise_var ** 2,
        state.beta[0],
        state.beta[1],
        state.beta[1] ** 2,
        state.dev_init_var,
        state.group_vol[0],
        float(np.mean(np.log(state.subject_vol))),
    ])


def batch_means_se(x, n_batches=50):
    n = (len(x) // n_batches) * n_batches
    batches = x[:n].reshape(n_batches, -1).mean(axis=1)
    return batches.std(ddof=1) / math.sqrt(n_batches)


@pytest.mark.slow
def test_successive_conditional_matches_marginal_conditional():
    n_sweeps = 50_000
    dataset = toy_dataset()
    cfg = config()

    # marginal-conditional arm: iid draws from the prior + data law
    rng = np.random.default_rng(314)
    data_mc = ChainData(dataset, cfg)
    mc = np.empty((n_sweeps, 8))
    for j in range(n_sweeps):
        state = prior_state_and_data(rng, data_mc)
        mc[j] = stats_vector(state, data_mc)

    # successive-conditional arm: Gibbs sweep then data regeneration
    rng = np.random.default_rng(2718)
    data_sc = ChainData(dataset, cfg)
    state = prior_state_and_data(rng, data_sc)
    sc = np.empty((n_sweeps, 8))
    for j in range(n_sweeps):
        sample_U(state, data_sc, rng)
        sample_M(state, data_sc, rng)
        sample_sigma_eps(state, data_sc, rng)
        sample_sigma_U0(state, data_sc, rng)
        sample_sigma_Mk(state, data_sc, rng)
        sample_sigma_Ui_mh(state, data_sc, rng)
        conjugate_beta_sigma2(state, data_sc, rng)
        regenerate_data(state, data_sc, rng)
        sc[j] = stats_vector(state, data_sc)

    labels = ["E[noise_var]", "E[noise_var^2]", "E[beta0]", "E[beta1]",
              "E[beta1^2]", "E[dev_init_var]", "E[group_vol]", "E[mean log vol]"]
    for col, label in enumerate(labels):
        se = math.sqrt(mc[:, col].std(ddof=1) ** 2 / n_sweeps
                       + batch_means_se(sc[:, col]) ** 2)
        diff = abs(mc[:, col].mean() - sc[:, col].mean())
        assert diff < 4 * se, f"{label}: |{mc[:, col].mean():.4f} - {sc[:, col].mean():.4f}| >= 4*{se:.4f}"
