"""Treatment rules from pooled blip estimates, and their value on a known truth."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .model import ModelSpec, TreatmentKind, term_matrix
from .posterior import PooledPosterior
from .rng import substream
from .simgen import Scenario, draw_cohort, true_mean


class RuleError(ValueError):
    pass


class UndefinedRuleError(RuleError):
    """Both blip blocks vanish at a row, so every dose is equally good."""


class NonConcaveRuleError(RuleError):
    """The quadratic blip is not concave at a row and the dose range is unbounded."""


@dataclass(frozen=True)
class Rule:
    spec: ModelSpec
    psi: np.ndarray

    def __post_init__(self):
        psi = np.asarray(self.psi, dtype=float).copy()
        if psi.shape != (self.spec.n_psi,):
            raise RuleError(f"rule needs {self.spec.n_psi} blip parameters, got {psi.shape}")
        psi.setflags(write=False)
        object.__setattr__(self, "psi", psi)

    @property
    def kind(self) -> TreatmentKind:
        return self.spec.treatment_kind

    @property
    def linear(self) -> np.ndarray:
        return self.psi[:self.spec.q]

    @property
    def quadratic(self) -> np.ndarray:
        return self.psi[self.spec.q:]

    def contrasts(self, x, columns: Sequence[str] | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Per-row linear and quadratic blip coefficients (psi1'g1(x), psi2'g2(x))."""
        X, cols = _rows(x, columns)
        lin = term_matrix(self.spec.blip_terms_linear, X, cols) @ self.linear
        if self.spec.q2:
            quad = term_matrix(self.spec.blip_terms_quadratic, X, cols) @ self.quadratic
        else:
            quad = np.zeros(len(lin))
        return lin, quad

    def to_dict(self) -> dict:
        return {"labels": self.spec.psi_labels, "psi": [float(v) for v in self.psi]}


def _rows(x, columns):
    if isinstance(x, Mapping):
        cols = tuple(x)
        return np.array([[float(x[c]) for c in cols]]), cols
    X = np.atleast_2d(np.asarray(x, dtype=float))
    if columns is None:
        raise RuleError("array input needs column names")
    return X, tuple(columns)


def rule_from_posterior(spec: ModelSpec, posterior: PooledPosterior, point: str = "mean",
                        selected: Sequence[int] | None = None) -> Rule:
    """Point rule from posterior means or medians.

    Horseshoe-tagged parameters outside ``selected`` are set to zero; when
    ``selected`` is omitted the 95% credible-interval selection is applied.
    """
    if point == "mean":
        psi = posterior.mean()
    elif point == "median":
        psi = posterior.median()
    else:
        raise RuleError(f"point must be 'mean' or 'median', not {point!r}")
    psi = np.array(psi, dtype=float)
    if posterior.horseshoe:
        if selected is None:
            from .stagetwo import select_interactions
            selected = select_interactions(posterior)
        for t in posterior.horseshoe:
            if t not in selected:
                psi[t] = 0.0
    return Rule(spec, psi)


def decide_binary(rule: Rule, x, columns: Sequence[str] | None = None):
    """Treat (1) iff the blip is strictly positive; a mapping gives a scalar."""
    if rule.kind is not TreatmentKind.BINARY:
        raise RuleError("decide_binary needs a binary-treatment rule")
    lin, _ = rule.contrasts(x, columns)
    d = (lin > 0).astype(int)
    return int(d[0]) if isinstance(x, Mapping) else d


@dataclass(frozen=True)
class DoseDecision:
    doses: np.ndarray
    clipped_low: int
    clipped_high: int
    nonconcave_rows: tuple[int, ...]

    @property
    def dose(self) -> float:
        if len(self.doses) != 1:
            raise RuleError("dose is only defined for a single row")
        return float(self.doses[0])


def decide_dose(rule: Rule, x, bounds: tuple[float, float] = (-np.inf, np.inf),
                columns: Sequence[str] | None = None) -> DoseDecision:
    """Maximize a*lin + a^2*quad over ``bounds`` row by row."""
    if rule.kind is not TreatmentKind.CONTINUOUS_QUADRATIC:
        raise RuleError("decide_dose needs a continuous-quadratic rule")
    lo, hi = map(float, bounds)
    if not lo < hi:
        raise RuleError("dose bounds must satisfy lo < hi")
    lin, quad = rule.contrasts(x, columns)
    zero = (lin == 0) & (quad == 0)
    if zero.any():
        raise UndefinedRuleError(f"blip is identically zero at row {int(np.flatnonzero(zero)[0])}")
    concave = quad < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        raw = np.where(concave, -lin / (2.0 * np.where(concave, quad, -1.0)), np.nan)
    doses = np.clip(raw, lo, hi)
    low = int(np.sum(concave & (raw < lo)))
    high = int(np.sum(concave & (raw > hi)))
    flagged = np.flatnonzero(~concave)
    if flagged.size:
        if not (np.isfinite(lo) and np.isfinite(hi)):
            raise NonConcaveRuleError(
                f"blip is not concave at row {int(flagged[0])} and the dose range is unbounded")
        at_lo = lo * lin[flagged] + lo**2 * quad[flagged]
        at_hi = hi * lin[flagged] + hi**2 * quad[flagged]
        doses[flagged] = np.where(at_hi > at_lo, hi, lo)
    return DoseDecision(doses, low, high, tuple(int(i) for i in flagged))


def true_rule(scenario: Scenario) -> Rule:
    return Rule(scenario.spec, scenario.true_psi)


def apply_rule(rule: Rule, x: np.ndarray, columns: Sequence[str],
               bounds: tuple[float, float] = (-np.inf, np.inf)) -> tuple[np.ndarray, DoseDecision | None]:
    if rule.kind is TreatmentKind.BINARY:
        return decide_binary(rule, x, columns).astype(float), None
    dec = decide_dose(rule, x, bounds, columns)
    return dec.doses, dec


@dataclass(frozen=True)
class RuleEvaluation:
    value_estimate: float
    value_true: float
    dvf: float
    cohort_size: int
    seed: int
    agreement: float
    clipped_low: int = 0
    clipped_high: int = 0
    nonconcave_rows: int = 0

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass(frozen=True)
class Cohort:
    x: np.ndarray
    columns: tuple[str, ...]
    seed: int


def make_cohort(scenario: Scenario, size: int, seed: int) -> Cohort:
    rng = substream(seed, "cohort")
    return Cohort(draw_cohort(scenario, size, rng), scenario.columns, seed)


def value(rule: Rule, scenario: Scenario, cohort: Cohort) -> tuple[float, np.ndarray, DoseDecision | None]:
    """Mean noiseless outcome if every cohort member followed ``rule``."""
    a, dec = apply_rule(rule, cohort.x, cohort.columns, scenario.dose_bounds)
    mean = true_mean(scenario.spec, scenario.true_beta, scenario.true_psi, cohort.x, cohort.columns, a)
    return float(mean.mean()), a, dec


def evaluate_on_cohort(rule_est: Rule, scenario: Scenario, cohort: Cohort) -> RuleEvaluation:
    v_true, a_true, _ = value(true_rule(scenario), scenario, cohort)
    v_est, a_est, dec = value(rule_est, scenario, cohort)
    return RuleEvaluation(
        value_estimate=v_est, value_true=v_true, dvf=v_true - v_est,
        cohort_size=len(cohort.x), seed=cohort.seed,
        agreement=float(np.mean(np.isclose(a_true, a_est))),
        clipped_low=dec.clipped_low if dec else 0, clipped_high=dec.clipped_high if dec else 0,
        nonconcave_rows=len(dec.nonconcave_rows) if dec else 0)


def evaluate_rule(rule_est: Rule, truth: Scenario, cohort_size: int = 100_000,
                  seed: int = 0) -> RuleEvaluation:
    """dVF of ``rule_est`` on a fresh cohort from the scenario's site-law mixture."""
    return evaluate_on_cohort(rule_est, truth, make_cohort(truth, cohort_size, seed))


def dose_draws(spec: ModelSpec, posterior: PooledPosterior, x, columns=None,
               bounds: tuple[float, float] = (-np.inf, np.inf)) -> np.ndarray:
    """Per-draw optimal dose for each row: shape (draws, rows)."""
    out = [decide_dose(Rule(spec, psi), x, bounds, columns).doses for psi in posterior.psi_draws()]
    return np.array(out)
