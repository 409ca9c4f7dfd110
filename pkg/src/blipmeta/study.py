"""Replicated simulation studies: generate, fit, pool, extract the rule, evaluate."""

from __future__ import annotations

import csv
import io
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .federation import canonical_json
from .gibbs import PrecisionError
from .itr import Cohort, RuleError, evaluate_on_cohort, make_cohort, rule_from_posterior
from .model import ModelError
from .onestage import OneStageModel, run_onestage
from .rng import child_seed
from .simgen import Scenario, ScenarioError, simulate_replicate
from .sparsity import UnmappableSparsityError
from .stageone import DegenerateSiteError, SaturatedFitError, fit_site, summarize_site
from .stagetwo import (LikelihoodError, PriorConfig, assemble_likelihood, run_mcmc,
                       select_interactions)

log = logging.getLogger(__name__)

DEFAULT_REPLICATES = 200
FULL_SCALE_REPLICATES = 2000
MAX_FAILURE_RATE = 0.05

# failures a single replicate may raise without invalidating the study
REPLICATE_ERRORS = (ModelError, UnmappableSparsityError, DegenerateSiteError, SaturatedFitError,
                    LikelihoodError, PrecisionError, RuleError, np.linalg.LinAlgError)


class StudyAborted(RuntimeError):
    pass


@dataclass(frozen=True)
class StudyConfig:
    scenario: Scenario
    replicates: int = DEFAULT_REPLICATES
    priors: Mapping = field(default_factory=dict)
    n_chains: int = 2
    n_warmup: int = 1000
    n_kept: int = 1000
    cohort_size: int = 100_000
    point: str = "mean"
    onestage: bool = False
    workers: int = 1
    max_failure_rate: float = MAX_FAILURE_RATE

    @property
    def name(self) -> str:
        s = self.scenario
        if s.name:
            return s.name
        parts = [s.setting.value, s.heterogeneity.value]
        if s.setting.value == "binary":
            parts.append(f"s{s.confounding_scenario}")
        if s.heterogeneity.value != "common_effect":
            parts.append(f"i2_{s.i2:g}")
        parts.append(f"n{s.n_mean}")
        return "-".join(parts)

    def prior_config(self) -> PriorConfig:
        spec = self.scenario.spec
        return PriorConfig.from_dict(self.priors, spec.psi_labels, spec.blip_intercepts)


@dataclass
class ReplicateResult:
    replicate: int
    method: str
    ok: bool
    estimates: np.ndarray | None = None
    selected: tuple[int, ...] | None = None
    dvf: float = float("nan")
    max_rhat: float = float("nan")
    error: str = ""
    log: dict = field(default_factory=dict)


@dataclass
class StudyResult:
    config: StudyConfig
    labels: tuple[str, ...]
    truth: np.ndarray
    results: list[ReplicateResult]
    metrics: list[dict]

    @property
    def failures(self) -> int:
        return sum(not r.ok for r in self.results if r.method == "two_stage")


def _two_stage(cfg: StudyConfig, rep, cohort: Cohort, seed: int) -> ReplicateResult:
    spec = cfg.scenario.spec
    summaries = []
    for d in rep.datasets:
        site = fit_site(spec, d)
        summaries.append(summarize_site(spec, site.fit, site.mapping, d.site_id))
    graph = assemble_likelihood(summaries, spec.psi_labels, spec.blip_intercepts)
    post = run_mcmc(graph, cfg.prior_config(), cfg.n_chains, cfg.n_warmup, cfg.n_kept, seed)
    return _finish(cfg, rep, cohort, post, "two_stage")


def _one_stage(cfg: StudyConfig, rep, cohort: Cohort, seed: int) -> ReplicateResult:
    spec = cfg.scenario.spec
    model = OneStageModel(spec, tuple(rep.datasets), cfg.prior_config())
    post = run_onestage(model, cfg.n_chains, cfg.n_warmup, cfg.n_kept, seed)
    return _finish(cfg, rep, cohort, post, "one_stage")


def _finish(cfg, rep, cohort, post, method) -> ReplicateResult:
    selected = tuple(select_interactions(post)) if post.horseshoe else None
    rule = rule_from_posterior(cfg.scenario.spec, post, cfg.point, selected)
    ev = evaluate_on_cohort(rule, cfg.scenario, cohort)
    rhat = [v for v in post.rhat().values() if np.isfinite(v)]
    return ReplicateResult(rep.index, method, True, post.mean(), selected, ev.dvf,
                           max(rhat) if rhat else float("nan"), log=rep.log)


def run_replicate(cfg: StudyConfig, index: int, cohort: Cohort) -> list[ReplicateResult]:
    seed = cfg.scenario.seed
    methods = [("two_stage", _two_stage)] + ([("one_stage", _one_stage)] if cfg.onestage else [])
    out = []
    try:
        rep = simulate_replicate(cfg.scenario, index)
    except (ScenarioError, *REPLICATE_ERRORS) as e:
        return [ReplicateResult(index, m, False, error=f"{type(e).__name__}: {e}") for m, _ in methods]
    for m, fn in methods:
        try:
            out.append(fn(cfg, rep, cohort, child_seed(seed, index, "mcmc" if m == "two_stage" else "onestage")))
        except REPLICATE_ERRORS as e:
            out.append(ReplicateResult(index, m, False, error=f"{type(e).__name__}: {e}", log=rep.log))
    return out


def _run_chunk(args):
    cfg, indices, cohort = args
    return [r for i in indices for r in run_replicate(cfg, i, cohort)]


def run_study(cfg: StudyConfig, progress=None) -> StudyResult:
    """Run every replicate and aggregate.

    A replicate that fails with a model-level error is recorded and skipped;
    more than ``max_failure_rate`` of failures aborts the study.
    """
    if cfg.replicates < 1:
        raise ValueError("replicates must be positive")
    cohort = make_cohort(cfg.scenario, cfg.cohort_size, child_seed(cfg.scenario.seed, "cohort"))
    allowed = int(np.floor(cfg.max_failure_rate * cfg.replicates))
    results: list[ReplicateResult] = []

    def absorb(batch):
        results.extend(batch)
        failed = sum(not r.ok for r in results if r.method == "two_stage")
        for r in batch:
            if not r.ok:
                log.warning("replicate %d (%s) failed: %s", r.replicate, r.method, r.error)
        if failed > allowed:
            raise StudyAborted(f"{failed} of {cfg.replicates} replicates failed "
                               f"(limit {cfg.max_failure_rate:.0%})")
        if progress:
            progress(len({r.replicate for r in results}), cfg.replicates)

    if cfg.workers <= 1:
        for i in range(cfg.replicates):
            absorb(run_replicate(cfg, i, cohort))
    else:
        chunks = [list(range(cfg.replicates))[w::cfg.workers] for w in range(cfg.workers)]
        with ProcessPoolExecutor(cfg.workers) as pool:
            for batch in pool.map(_run_chunk, [(cfg, c, cohort) for c in chunks]):
                absorb(batch)
        results.sort(key=lambda r: (r.replicate, r.method != "two_stage"))

    spec = cfg.scenario.spec
    labels = tuple(spec.psi_labels)
    truth = cfg.scenario.true_psi
    metrics = aggregate(cfg.name, labels, truth, results,
                        horseshoe=bool(cfg.prior_config().horseshoe_indices()),
                        intercepts=spec.blip_intercepts)
    return StudyResult(cfg, labels, truth, results, metrics)


# -- aggregation --------------------------------------------------------------------

METRIC_FIELDS = ("scenario", "method", "subset", "parameter", "true", "mean", "relative_bias",
                 "sd", "selection", "n")


def _summ(values: np.ndarray, true: float) -> tuple[float, float, float]:
    true = float(true)
    if len(values) == 0:
        return float("nan"), float("nan"), float("nan")
    mean = float(np.mean(values))
    sd = float(np.std(values, ddof=1)) if len(values) > 1 else float("nan")
    rb = float((mean - true) / true) if true != 0 else float("nan")
    return mean, rb, sd


def aggregate(name: str, labels: Sequence[str], truth: np.ndarray,
              results: Iterable[ReplicateResult], horseshoe: bool = False,
              intercepts: Sequence[int] = (0,)) -> list[dict]:
    """Long-format metric rows per method, subset and parameter (plus a dVF row).

    ``full`` uses every successful replicate. For horseshoe runs ``selected``
    conditions each parameter on replicates where it was selected, and the
    dVF row on replicates where every truly nonzero interaction was selected.
    """
    rows = []
    results = list(results)
    for method in sorted({r.method for r in results}, key=lambda m: m != "two_stage"):
        ok = [r for r in results if r.method == method and r.ok]
        if not ok:
            continue
        est = np.array([r.estimates for r in ok])
        dvf = np.array([r.dvf for r in ok])
        sel = None
        if horseshoe:
            sel = np.array([[t in r.selected for t in range(len(labels))] for r in ok])
        for t, lab in enumerate(labels):
            mean, rb, sd = _summ(est[:, t], truth[t])
            prop = float(sel[:, t].mean()) if sel is not None and t not in intercepts else float("nan")
            rows.append(dict(scenario=name, method=method, subset="full", parameter=lab,
                             true=float(truth[t]), mean=mean, relative_bias=rb, sd=sd,
                             selection=prop, n=len(ok)))
        mean, _, sd = _summ(dvf, 0.0)
        rows.append(dict(scenario=name, method=method, subset="full", parameter="dVF", true=0.0,
                         mean=mean, relative_bias=float("nan"), sd=sd, selection=float("nan"),
                         n=len(ok)))
        if sel is None:
            continue
        for t, lab in enumerate(labels):
            if t in intercepts:
                mask = np.ones(len(ok), dtype=bool)
            else:
                mask = sel[:, t]
            mean, rb, sd = _summ(est[mask, t], truth[t])
            rows.append(dict(scenario=name, method=method, subset="selected", parameter=lab,
                             true=float(truth[t]), mean=mean, relative_bias=rb, sd=sd,
                             selection=float(mask.mean()), n=int(mask.sum())))
        nonzero = [t for t in range(len(labels)) if t not in intercepts and truth[t] != 0]
        correct = sel[:, nonzero].all(axis=1) if nonzero else np.ones(len(ok), dtype=bool)
        mean, _, sd = _summ(dvf[correct], 0.0)
        rows.append(dict(scenario=name, method=method, subset="selected", parameter="dVF", true=0.0,
                         mean=mean, relative_bias=float("nan"), sd=sd,
                         selection=float(correct.mean()), n=int(correct.sum())))
    return rows


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if not np.isfinite(v) else repr(v)
    return str(v)


def metrics_csv(rows: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_FIELDS)
    for r in rows:
        w.writerow([_fmt(r[f]) for f in METRIC_FIELDS])
    return buf.getvalue()


def replicates_csv(result: StudyResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    labels = result.labels
    w.writerow(["replicate", "method", "ok", *labels, *[f"selected[{l}]" for l in labels],
                "dvf", "max_rhat", "error"])
    for r in result.results:
        est = r.estimates if r.estimates is not None else np.full(len(labels), np.nan)
        sel = ["" if r.selected is None else int(t in r.selected) for t in range(len(labels))]
        w.writerow([r.replicate, r.method, int(r.ok), *map(_fmt, map(float, est)), *sel,
                    _fmt(float(r.dvf)), _fmt(float(r.max_rhat)), r.error])
    return buf.getvalue()


def read_metrics_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    out = []
    for r in rows:
        d = dict(r)
        for k in ("true", "mean", "relative_bias", "sd", "selection"):
            d[k] = float(d[k])
        d["n"] = int(d["n"])
        out.append(d)
    return out


def report(paths: Sequence[str | Path]) -> dict:
    """Merge metrics CSVs into ``{scenario: {method: {subset: {parameter: metrics}}}}``."""
    out: dict = {}
    for p in sorted(map(str, paths)):
        for r in read_metrics_csv(p):
            cell = out.setdefault(r["scenario"], {}).setdefault(r["method"], {}).setdefault(r["subset"], {})
            cell[r["parameter"]] = {k: (None if isinstance(r[k], float) and not np.isfinite(r[k]) else r[k])
                                    for k in ("true", "mean", "relative_bias", "sd", "selection", "n")}
    return out


def report_bytes(paths: Sequence[str | Path]) -> bytes:
    return canonical_json(report(paths)) + b"\n"
