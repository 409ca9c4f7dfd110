"""Data-generating mechanisms for the multisite simulation study.

Four settings share one skeleton: per-site covariate laws keyed by
``site_id % 3``, a treatment mechanism, site-specific parameters drawn
around the common truth, and a linear outcome with N(0, sigma_eps^2) noise.
Every random quantity comes from a substream keyed by
``(replicate, site, purpose)`` so datasets are bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from .model import ModelSpec, SiteDataset, term_matrix
from .rng import substream


class Setting(str, Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"
    SPARSE = "sparse"
    MANY_COVARIATES = "many_covariates"


class Heterogeneity(str, Enum):
    COMMON_EFFECT = "common_effect"
    COMMON_RULE = "common_rule"
    VARYING_EFFECTS = "varying_effects"


class ScenarioError(ValueError):
    pass


COMMON_RULE_RATIO = -5.0


def heterogeneity_variance(i2: float, sigma_eps2: float) -> float:
    """Between-site variance giving heterogeneity fraction ``i2`` against residual variance."""
    if not 0 <= i2 < 1:
        raise ScenarioError(f"I^2 must lie in [0, 1), got {i2}")
    return i2 * sigma_eps2 / (1.0 - i2)


# -- model specs and default truths -----------------------------------------

def default_spec(setting: Setting, n_covariates: int = 10) -> ModelSpec:
    setting = Setting(setting)
    if setting is Setting.BINARY:
        return ModelSpec("binary", ["1", "x1", "x2"], ["1", "x1"])
    if setting is Setting.CONTINUOUS:
        return ModelSpec("continuous_quadratic", ["1", "x1", "x2"], ["1", "x1"], ["1"])
    if setting is Setting.SPARSE:
        terms = ["1", "x1", "x2[2]", "x2[3]"]
        return ModelSpec("binary", terms, terms)
    terms = ["1"] + [f"x{j}" for j in range(1, n_covariates + 1)]
    return ModelSpec("binary", terms, terms)


def default_truth(setting: Setting, n_covariates: int = 10) -> tuple[np.ndarray, np.ndarray]:
    """Common (beta, psi) in the toolkit's parameter order (linear block, then quadratic)."""
    setting = Setting(setting)
    if setting is Setting.BINARY:
        return np.array([4.0, 1.0, 1.0]), np.array([2.5, -0.5])
    if setting is Setting.CONTINUOUS:
        # a + a*x1 - 2a^2, so the optimal dose is (1 + x1) / 4
        return np.array([4.0, 1.0, 1.0]), np.array([1.0, 1.0, -2.0])
    if setting is Setting.SPARSE:
        return np.array([4.0, 1.0, 1.0, -1.0]), np.array([1.0, 1.0, -2.5, 2.0])
    if n_covariates < 3:
        raise ScenarioError("the many-covariates setting needs at least 3 covariates")
    beta = np.ones(n_covariates + 1)
    beta[0] = 4.0
    psi = np.zeros(n_covariates + 1)
    psi[:4] = (2.5, -0.5, 2.0, -1.0)
    return beta, psi


@dataclass(frozen=True)
class Scenario:
    setting: Setting = Setting.BINARY
    K: int = 10
    n_mean: int = 200
    confounding_scenario: int = 1
    heterogeneity: Heterogeneity = Heterogeneity.COMMON_EFFECT
    i2: float = 0.1
    sigma_eps2: float = 0.25
    n_covariates: int = 10
    beta: tuple[float, ...] | None = None
    psi: tuple[float, ...] | None = None
    dose_bounds: tuple[float, float] = (-np.inf, np.inf)
    seed: int = 0
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "setting", Setting(self.setting))
        object.__setattr__(self, "heterogeneity", Heterogeneity(self.heterogeneity))
        if self.K < 1 or self.n_mean < 1:
            raise ScenarioError("K and n_mean must be positive")
        if not 1 <= self.confounding_scenario <= 6:
            raise ScenarioError("confounding_scenario must be 1..6")
        if self.heterogeneity is Heterogeneity.COMMON_RULE and self.setting is not Setting.BINARY:
            raise ScenarioError("the common-rule structure is defined for the binary setting only")
        heterogeneity_variance(self.i2, self.sigma_eps2)
        lo, hi = self.dose_bounds
        if not lo < hi:
            raise ScenarioError("dose_bounds must satisfy lo < hi")
        beta, psi = default_truth(self.setting, self.n_covariates)
        if self.beta is not None and len(self.beta) != len(beta):
            raise ScenarioError(f"beta needs {len(beta)} entries")
        if self.psi is not None and len(self.psi) != len(psi):
            raise ScenarioError(f"psi needs {len(psi)} entries")

    @property
    def spec(self) -> ModelSpec:
        return default_spec(self.setting, self.n_covariates)

    @property
    def true_beta(self) -> np.ndarray:
        b = default_truth(self.setting, self.n_covariates)[0]
        return b if self.beta is None else np.array(self.beta, dtype=float)

    @property
    def true_psi(self) -> np.ndarray:
        p = default_truth(self.setting, self.n_covariates)[1]
        return p if self.psi is None else np.array(self.psi, dtype=float)

    @property
    def sigma_b2(self) -> float:
        return heterogeneity_variance(self.i2, self.sigma_eps2)

    @property
    def columns(self) -> tuple[str, ...]:
        return self.spec.covariates

    def site_ids(self) -> list[str]:
        width = max(2, len(str(self.K)))
        return [f"site{i:0{width}d}" for i in range(1, self.K + 1)]

    def to_dict(self) -> dict:
        d = {
            "setting": self.setting.value, "K": self.K, "n_mean": self.n_mean,
            "confounding_scenario": self.confounding_scenario,
            "heterogeneity": self.heterogeneity.value, "i2": self.i2,
            "sigma_eps2": self.sigma_eps2, "n_covariates": self.n_covariates,
            "beta": [float(b) for b in self.true_beta], "psi": [float(p) for p in self.true_psi],
            "seed": self.seed, "name": self.name,
        }
        lo, hi = self.dose_bounds
        if np.isfinite(lo) or np.isfinite(hi):
            d["dose_bounds"] = [lo, hi]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "Scenario":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ScenarioError(f"unknown scenario keys: {sorted(unknown)}")
        kw = dict(d)
        for key in ("beta", "psi", "dose_bounds"):
            if key in kw and kw[key] is not None:
                kw[key] = tuple(float(v) for v in kw[key])
        return cls(**kw)

    def with_seed(self, seed: int) -> "Scenario":
        return replace(self, seed=seed)


# -- covariates ----------------------------------------------------------------

_X1_BINARY = {0: "normal", 1: "beta", 2: "uniform"}
_X2_PROB = {0: 0.5, 1: 0.3, 2: 0.7}
_X3_RATE = {0: 1.0, 1: 1.7, 2: 0.7}


def _x1_x2(group: int, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    law = _X1_BINARY[group]
    if law == "normal":
        x1 = rng.normal(5.0, 1.0, n)
    elif law == "beta":
        x1 = 6.0 * rng.beta(4.0, 4.0, n) + 2.0
    else:
        x1 = rng.uniform(2.0, 8.0, n)
    x2 = (rng.uniform(size=n) < _X2_PROB[group]).astype(float)
    return x1, x2


def gen_covariates(setting: Setting, site_id: int, n: int, rng: np.random.Generator,
                   n_covariates: int = 10) -> tuple[np.ndarray, tuple[str, ...]]:
    """Covariate matrix for one site; ``site_id`` is the 1-based site number."""
    setting = Setting(setting)
    group = site_id % 3
    if setting in (Setting.BINARY, Setting.CONTINUOUS):
        x1, x2 = _x1_x2(group, n, rng)
        return np.column_stack([x1, x2]), ("x1", "x2")
    if setting is Setting.SPARSE:
        if group == 0:
            x1 = np.ones(n)
            level = rng.choice([2, 3], n)
        elif group == 1:
            x1 = np.zeros(n)
            level = rng.choice([1, 3], n)
        else:
            x1 = (rng.uniform(size=n) < 0.5).astype(float)
            level = rng.choice([1, 2, 3], n)
        return (np.column_stack([x1, level == 2, level == 3]).astype(float),
                ("x1", "x2[2]", "x2[3]"))
    x1, x2 = _x1_x2(group, n, rng)
    x3 = rng.exponential(1.0 / _X3_RATE[group], n)
    rest = rng.standard_normal((n, n_covariates - 3))
    cols = tuple(f"x{j}" for j in range(1, n_covariates + 1))
    return np.column_stack([x1, x2, x3, rest]), cols


# -- treatment -----------------------------------------------------------------

def propensity_coefficients(confounding_scenario: int, site_id: int,
                            rng: np.random.Generator) -> np.ndarray:
    """(alpha0, alpha1, alpha2) for one site under the given confounding scenario."""
    s = confounding_scenario
    odd = site_id % 2 == 1
    if s == 1:
        return np.array([0.1, 0.1, 0.1])
    if s == 2:
        return np.array([0.01, 0.01, 0.01])
    if s == 3:
        return rng.uniform(0.06, 0.14, 3)
    if s == 4:
        return rng.uniform(0.006, 0.014, 3)
    if s == 5:
        a0, a1, a2 = rng.uniform(0.3, 0.7), rng.uniform(0.06, 0.14), rng.uniform(0.3, 0.7)
    elif s == 6:
        a0, a1, a2 = rng.uniform(0.03, 0.07), rng.uniform(0.006, 0.014), rng.uniform(0.03, 0.07)
    else:
        raise ScenarioError("confounding_scenario must be 1..6")
    return np.array([a0, 0.0, a2]) if odd else np.array([a0, a1, 0.0])


def gen_treatment(setting: Setting, x: np.ndarray, rng: np.random.Generator,
                  alpha: Sequence[float] | None = None) -> np.ndarray:
    """Binary setting: logistic in (x1, x2); continuous: N(x1, 1); otherwise Bernoulli(0.5)."""
    setting = Setting(setting)
    n = x.shape[0]
    if setting is Setting.BINARY:
        if alpha is None:
            raise ScenarioError("binary setting needs propensity coefficients")
        prob = expit(alpha[0] + alpha[1] * x[:, 0] + alpha[2] * x[:, 1])
        return (rng.uniform(size=n) < prob).astype(float)
    if setting is Setting.CONTINUOUS:
        return rng.normal(x[:, 0], 1.0)
    return (rng.uniform(size=n) < 0.5).astype(float)


# -- site parameters and outcome -------------------------------------------------

def gen_site_parameters(scenario: Scenario, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """One site's (beta_i, psi_i) around the common truth."""
    beta, psi = scenario.true_beta, scenario.true_psi
    h = scenario.heterogeneity
    if h is Heterogeneity.COMMON_EFFECT:
        return beta.copy(), psi.copy()
    sd = np.sqrt(scenario.sigma_b2)
    beta_i = rng.normal(beta, sd)
    if h is Heterogeneity.VARYING_EFFECTS:
        return beta_i, rng.normal(psi, sd)
    psi1 = rng.normal(psi[1], sd)
    return beta_i, np.array([COMMON_RULE_RATIO * psi1, psi1])


def true_mean(spec: ModelSpec, beta: np.ndarray, psi: np.ndarray, x: np.ndarray,
              columns: Sequence[str], a: np.ndarray) -> np.ndarray:
    """E[Y | x, a] = beta'x_tf + a psi1'g1 + a^2 psi2'g2."""
    mean = term_matrix(spec.treatment_free_terms, x, columns) @ beta
    mean = mean + a * (term_matrix(spec.blip_terms_linear, x, columns) @ psi[:spec.q])
    if spec.q2:
        mean = mean + a**2 * (term_matrix(spec.blip_terms_quadratic, x, columns) @ psi[spec.q:])
    return mean


def gen_outcome(spec: ModelSpec, beta: np.ndarray, psi: np.ndarray, x: np.ndarray,
                columns: Sequence[str], a: np.ndarray, rng: np.random.Generator,
                sigma_eps2: float = 0.25) -> np.ndarray:
    mean = true_mean(spec, beta, psi, x, columns, a)
    return mean + rng.normal(0.0, np.sqrt(sigma_eps2), len(mean))


# -- a full replicate --------------------------------------------------------------

def site_sample_size(n_mean: int, rng: np.random.Generator) -> int:
    return max(10, int(np.rint(rng.uniform(0.6 * n_mean, 1.4 * n_mean))))


@dataclass
class Replicate:
    scenario: Scenario
    index: int
    datasets: list[SiteDataset]
    site_beta: np.ndarray
    site_psi: np.ndarray
    alphas: np.ndarray | None
    log: dict = field(default_factory=dict)


def simulate_replicate(scenario: Scenario, replicate: int = 0) -> Replicate:
    seed = scenario.seed
    spec = scenario.spec
    datasets, betas, psis, alphas = [], [], [], []
    for i, sid in enumerate(scenario.site_ids(), start=1):
        n = site_sample_size(scenario.n_mean, substream(seed, replicate, i, "site_n"))
        beta_i, psi_i = gen_site_parameters(scenario, substream(seed, replicate, i, "theta"))
        x, cols = gen_covariates(scenario.setting, i, n, substream(seed, replicate, i, "covariates"),
                                 scenario.n_covariates)
        alpha = None
        if scenario.setting is Setting.BINARY:
            alpha = propensity_coefficients(scenario.confounding_scenario, i,
                                            substream(seed, replicate, i, "alpha"))
            alphas.append(alpha)
        a = gen_treatment(scenario.setting, x, substream(seed, replicate, i, "treatment"), alpha)
        y = gen_outcome(spec, beta_i, psi_i, x, cols, a, substream(seed, replicate, i, "noise"),
                        scenario.sigma_eps2)
        datasets.append(SiteDataset(sid, x, cols, a, y))
        betas.append(beta_i)
        psis.append(psi_i)
    alpha_arr = np.array(alphas) if alphas else None
    log = {"site_n": [d.n for d in datasets]}
    if alpha_arr is not None:
        log["alphas"] = alpha_arr.round(6).tolist()
    return Replicate(scenario, replicate, datasets, np.array(betas), np.array(psis), alpha_arr, log)


def draw_cohort(scenario: Scenario, size: int, rng: np.random.Generator) -> np.ndarray:
    """Covariates from the equal-weight mixture of the K site laws."""
    site = rng.integers(1, scenario.K + 1, size)
    counts = np.bincount(site, minlength=scenario.K + 1)
    parts = [gen_covariates(scenario.setting, i, int(counts[i]), rng, scenario.n_covariates)[0]
             for i in range(1, scenario.K + 1) if counts[i]]
    return np.vstack(parts)
