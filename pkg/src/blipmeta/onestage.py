"""Full individual-level hierarchical regression, the comparator to the two-stage path.

Each site enters through its OLS sufficient statistics on the retained
columns: the estimate, ``(X'X)^-1`` and the residual sum of squares. Given
the site's residual variance these carry the same likelihood for the site
parameters as the raw rows, so the one-stage posterior is exact.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import gibbs
from .model import ModelSpec, SiteDataset
from .posterior import PooledPosterior
from .rng import substream
from .stageone import RANK_TOL, fit_site
from .stagetwo import DEFAULT_MEAN_VARIANCE, PriorConfig, _prior_arrays


@dataclass(frozen=True)
class OneStageModel:
    spec: ModelSpec
    datasets: tuple[SiteDataset, ...]
    priors: PriorConfig
    beta_variance: float = DEFAULT_MEAN_VARIANCE
    beta_sigma_scale: float = 1.0
    resid_scale: float = 1.0


def build_problem(model: OneStageModel, fixed_sigma: float | Sequence[float] | None = None,
                  tol: float = RANK_TOL) -> gibbs.Problem:
    spec = model.spec
    P = spec.p + spec.n_psi
    xi, L, C, n_obs, rss, s2 = [], [], [], [], [], []
    for d in model.datasets:
        site = fit_site(spec, d, tol)
        xi.append(site.fit.coefficients)
        L.append(site.mapping.param_matrix(spec))
        C.append(site.fit.xtx_inv)
        n_obs.append(site.fit.n_obs)
        rss.append(site.fit.rss)
        s2.append(max(site.fit.residual_variance, 1e-12))
    xi_a, L_a, C_a = gibbs.pad_sites(xi, L, C, P)
    kind, var, sign = _prior_arrays(model.priors, spec.n_psi)
    p = spec.p
    prior_kind = np.concatenate([np.full(p, gibbs.NORMAL), kind])
    prior_var = np.concatenate([np.full(p, model.beta_variance), var])
    prior_sign = np.concatenate([np.zeros(p, dtype=int), sign])
    scale = np.concatenate([np.full(p, model.beta_sigma_scale),
                            np.full(spec.n_psi, model.priors.variance_prior_scale)])
    fixed = np.full(P, np.nan) if fixed_sigma is None else np.broadcast_to(
        np.asarray(fixed_sigma, dtype=float), (P,)).copy()
    return gibbs.Problem(
        labels=tuple(spec.param_labels), xi=xi_a, L=L_a, C=C_a, prior_kind=prior_kind,
        prior_var=prior_var, prior_sign=prior_sign, sigma_scale=scale, fixed_sigma=fixed,
        n_obs=np.array(n_obs, dtype=float), rss=np.array(rss, dtype=float),
        resid_scale=model.resid_scale, init_resid=np.array(s2),
        site_ids=tuple(d.site_id for d in model.datasets))


def run_onestage(model: OneStageModel, n_chains: int = 2, n_warmup: int = 1000,
                 n_kept: int = 1000, seed: int = 0,
                 fixed_sigma: float | Sequence[float] | None = None) -> PooledPosterior:
    """Sample (beta, psi), site parameters and every variance jointly.

    The returned container carries treatment-free means ahead of the blip
    means (``psi_offset = p``); residual variances are in ``draws["resid"]``.
    """
    if n_chains < 1 or n_kept < 1 or n_warmup < 0:
        raise ValueError("need n_chains >= 1, n_kept >= 1, n_warmup >= 0")
    problem = build_problem(model, fixed_sigma)
    chains = [gibbs.run_chain(problem, n_warmup, n_kept, substream(seed, c))
              for c in range(n_chains)]
    draws = {k: np.stack([c[k] for c in chains]) for k in chains[0]}
    p = model.spec.p
    return PooledPosterior(
        labels=problem.labels, draws=draws, n_chains=n_chains, n_warmup=n_warmup,
        n_kept=n_kept, seed=seed, site_ids=problem.site_ids, psi_offset=p,
        horseshoe=tuple(int(t) - p for t in np.flatnonzero(problem.horseshoe)),
        intercepts=model.spec.blip_intercepts)
