import numpy as np
import pytest

from blipmeta.onestage import OneStageModel, build_problem, run_onestage
from blipmeta.simgen import Scenario, simulate_replicate
from blipmeta.stageone import fit_site, summarize_site
from blipmeta.stagetwo import PriorConfig, assemble_likelihood, run_mcmc

from conftest import linear_site


def one_site(binary_spec, n=300, seed=0):
    rng = np.random.default_rng(seed)
    x = np.column_stack([rng.normal(size=n), rng.binomial(1, 0.4, n)])
    a = rng.binomial(1, 0.5, n).astype(float)
    return linear_site(binary_spec, "s1", x, ("x1", "x2"), a, np.array([1.0, 0.5, -0.3]),
                       np.array([0.8, -0.4]), 0.7, rng)


def test_single_site_matches_least_squares(binary_spec):
    d = one_site(binary_spec)
    fit = fit_site(binary_spec, d).fit
    n, p = d.n, len(fit.coefficients)
    # oracle: normal linear model with a vague prior; coefficients are t about the LS fit
    beta_hat = fit.coefficients
    se = np.sqrt(np.diag(fit.xtx_inv) * fit.rss / (n - p - 2))
    model = OneStageModel(binary_spec, (d,), PriorConfig.normal(binary_spec.n_psi))
    post = run_onestage(model, n_chains=2, n_warmup=1000, n_kept=5000, seed=1, fixed_sigma=1e-8)
    draws = np.concatenate([post.draws["theta"][c] for c in range(2)])
    mean = draws.mean(axis=0)
    sd = draws.std(axis=0, ddof=1)
    mcse = sd / np.sqrt(len(draws) / 4)
    assert np.all(np.abs(mean - beta_hat) < 4 * mcse)
    np.testing.assert_allclose(sd, se, rtol=0.06)
    # residual variance centres on rss / n
    r = np.concatenate(post.draws["resid"][:, :, 0])
    assert np.mean(r) == pytest.approx(fit.rss / (n - p - 2), rel=0.05)


def test_problem_layout(binary_spec):
    d = one_site(binary_spec)
    d2 = one_site(binary_spec, seed=2)
    d2 = type(d2)("s2", d2.covariates, d2.columns, d2.treatment, d2.outcome)
    model = OneStageModel(binary_spec, (d, d2), PriorConfig.normal(binary_spec.n_psi))
    prob = build_problem(model)
    assert prob.labels == tuple(binary_spec.param_labels)
    assert prob.P == binary_spec.p + binary_spec.n_psi
    assert prob.sample_resid
    assert np.all(prob.n_obs == 300)
    assert prob.site_ids == ("s1", "s2")


def test_psi_means_are_reported_after_beta(binary_spec):
    d = one_site(binary_spec)
    model = OneStageModel(binary_spec, (d,), PriorConfig.normal(binary_spec.n_psi))
    post = run_onestage(model, n_chains=1, n_warmup=200, n_kept=200, seed=0)
    assert post.psi_labels == tuple(binary_spec.psi_labels)
    assert post.mean().shape == (binary_spec.n_psi,)


def _path_gap(n_mean, seed):
    sc = Scenario(K=4, n_mean=n_mean, seed=seed)
    rep = simulate_replicate(sc, 0)
    spec = sc.spec
    sums = []
    for d in rep.datasets:
        s = fit_site(spec, d)
        sums.append(summarize_site(spec, s.fit, s.mapping, d.site_id))
    priors = PriorConfig.normal(spec.n_psi)
    two = run_mcmc(assemble_likelihood(sums, spec.psi_labels), priors, 2, 500, 2000, seed=0)
    one = run_onestage(OneStageModel(spec, tuple(rep.datasets), priors), 2, 500, 2000, seed=0)
    return np.abs(one.rao_blackwell()[0] - two.rao_blackwell()[0])


def test_paths_converge_as_sites_grow():
    # summaries carry marginal sds only, so the paths agree asymptotically rather than exactly
    small = np.mean([_path_gap(150, s) for s in range(3)], axis=0)
    large = np.mean([_path_gap(6000, s) for s in range(3)], axis=0)
    assert np.all(large < small), (small, large)
    assert np.all(large < 0.05)


def test_rejects_bad_chain_arguments(binary_spec):
    model = OneStageModel(binary_spec, (one_site(binary_spec),), PriorConfig.normal(binary_spec.n_psi))
    with pytest.raises(ValueError):
        run_onestage(model, n_chains=0)
