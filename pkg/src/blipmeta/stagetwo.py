"""Coordinator-side Bayesian hierarchical pooling of site summaries."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import gibbs
from .federation import SiteSummary
from .posterior import PooledPosterior
from .rng import substream
from .sparsity import validate_identifiability

DEFAULT_MEAN_VARIANCE = 10_000.0


class LikelihoodError(ValueError):
    pass


@dataclass(frozen=True)
class MeanPrior:
    kind: str = "normal"          # normal | truncated_normal | horseshoe
    variance: float = DEFAULT_MEAN_VARIANCE
    sign: int = 0                 # +1 / -1 for truncated_normal

    def __post_init__(self):
        if self.kind not in ("normal", "truncated_normal", "horseshoe"):
            raise ValueError(f"unknown mean prior {self.kind!r}")
        if not self.variance > 0:
            raise ValueError("prior variance must be positive")
        if self.kind == "truncated_normal" and self.sign not in (1, -1):
            raise ValueError("truncated_normal needs sign +1 or -1")


@dataclass(frozen=True)
class PriorConfig:
    mean_priors: tuple[MeanPrior, ...]
    variance_prior_scale: float = 1.0

    def __post_init__(self):
        if not self.variance_prior_scale > 0:
            raise ValueError("half-Cauchy scale must be positive")

    @classmethod
    def normal(cls, n_psi: int, scale: float = 1.0, variance: float = DEFAULT_MEAN_VARIANCE):
        return cls(tuple(MeanPrior("normal", variance) for _ in range(n_psi)), scale)

    @classmethod
    def horseshoe(cls, n_psi: int, intercepts: Sequence[int] = (0,), scale: float = 1.0,
                  main_variance: float = DEFAULT_MEAN_VARIANCE):
        """Horseshoe on every interaction, normal on the treatment main effect(s)."""
        return cls(tuple(MeanPrior("normal", main_variance) if t in intercepts else MeanPrior("horseshoe")
                         for t in range(n_psi)), scale)

    @classmethod
    def from_dict(cls, cfg: Mapping, labels: Sequence[str], intercepts: Sequence[int] = (0,)):
        """Build from a ``[priors]`` config block keyed by psi labels."""
        scale = float(cfg.get("variance_scale", 1.0))
        variance = float(cfg.get("default_variance", DEFAULT_MEAN_VARIANCE))
        if cfg.get("horseshoe_interactions", False):
            base = cls.horseshoe(len(labels), intercepts, scale, variance)
        else:
            base = cls.normal(len(labels), scale, variance)
        priors = list(base.mean_priors)
        for label, o in dict(cfg.get("overrides", {})).items():
            if label not in labels:
                raise ValueError(f"prior override for unknown parameter {label!r}")
            sign = o.get("sign", 0)
            sign = {"+": 1, "-": -1}.get(sign, sign)
            priors[list(labels).index(label)] = MeanPrior(o.get("kind", "normal"),
                                                          float(o.get("variance", variance)), int(sign))
        return cls(tuple(priors), scale)

    def horseshoe_indices(self) -> tuple[int, ...]:
        return tuple(t for t, p in enumerate(self.mean_priors) if p.kind == "horseshoe")


@dataclass(frozen=True)
class SiteBlock:
    site_id: str
    labels: tuple[str, ...]
    xi: np.ndarray
    sd: np.ndarray
    L: np.ndarray  # (entries, n_psi)

    @property
    def effects(self) -> tuple[int, ...]:
        """psi indices for which this site gets a site-level effect."""
        return tuple(int(t) for t in np.flatnonzero(np.any(self.L != 0, axis=0)))


@dataclass(frozen=True)
class LikelihoodGraph:
    psi_labels: tuple[str, ...]
    sites: tuple[SiteBlock, ...]
    flagged: tuple[int, ...]
    intercepts: tuple[int, ...] = (0,)

    @property
    def n_psi(self) -> int:
        return len(self.psi_labels)

    def nodes(self) -> list[tuple[str, str, dict[int, float], float, float]]:
        """One observation node per transmitted entry: (site, label, weights, estimate, sd)."""
        out = []
        for s in self.sites:
            for lab, row, x, sd in zip(s.labels, s.L, s.xi, s.sd):
                out.append((s.site_id, lab, {int(t): float(row[t]) for t in np.flatnonzero(row)},
                            float(x), float(sd)))
        return out


def assemble_likelihood(summaries: Sequence[SiteSummary], psi_labels: Sequence[str],
                        intercepts: Sequence[int] = (0,)) -> LikelihoodGraph:
    n_psi = len(psi_labels)
    seen = set()
    blocks = []
    for s in sorted(summaries, key=lambda s: s.site_id):
        if s.site_id in seen:
            raise LikelihoodError(f"duplicate site {s.site_id}")
        seen.add(s.site_id)
        L = np.zeros((len(s.entries), n_psi))
        for k, e in enumerate(s.entries):
            if not e.sd > 0:
                raise LikelihoodError(f"site {s.site_id} entry {e.label} has sd {e.sd}; "
                                      "a saturated stage-one fit cannot enter the likelihood")
            for t, w in e.map_row:
                if not 0 <= t < n_psi:
                    raise LikelihoodError(f"site {s.site_id} maps to unknown psi index {t}")
                L[k, t] = w
        blocks.append(SiteBlock(
            s.site_id, tuple(e.label for e in s.entries),
            np.array([e.estimate for e in s.entries]), np.array([e.sd for e in s.entries]), L))
    report = validate_identifiability(
        ([dict(e.map_row) for e in s.entries] for s in summaries), n_psi)
    return LikelihoodGraph(tuple(psi_labels), tuple(blocks), report.flagged, tuple(intercepts))


def _prior_arrays(priors: PriorConfig, n: int):
    if len(priors.mean_priors) != n:
        raise ValueError(f"prior config covers {len(priors.mean_priors)} parameters, model has {n}")
    kind = np.array([{"normal": gibbs.NORMAL, "truncated_normal": gibbs.TRUNCATED,
                      "horseshoe": gibbs.HORSESHOE}[p.kind] for p in priors.mean_priors])
    var = np.array([p.variance for p in priors.mean_priors], dtype=float)
    sign = np.array([p.sign for p in priors.mean_priors])
    return kind, var, sign


def build_problem(graph: LikelihoodGraph, priors: PriorConfig,
                  fixed_sigma: float | Sequence[float] | None = None) -> gibbs.Problem:
    P = graph.n_psi
    xi, L, C = gibbs.pad_sites([s.xi for s in graph.sites], [s.L for s in graph.sites],
                               [np.diag(s.sd**2) for s in graph.sites], P)
    kind, var, sign = _prior_arrays(priors, P)
    fixed = np.full(P, np.nan) if fixed_sigma is None else np.broadcast_to(
        np.asarray(fixed_sigma, dtype=float), (P,)).copy()
    return gibbs.Problem(
        labels=graph.psi_labels, xi=xi, L=L, C=C, prior_kind=kind, prior_var=var,
        prior_sign=sign, sigma_scale=np.full(P, priors.variance_prior_scale),
        fixed_sigma=fixed, site_ids=tuple(s.site_id for s in graph.sites))


def sample(problem: gibbs.Problem, n_chains: int, n_warmup: int, n_kept: int, seed: int) -> dict:
    """Run chains sequentially, each on its own substream, and stack by chain order."""
    chains = [gibbs.run_chain(problem, n_warmup, n_kept, substream(seed, c))
              for c in range(n_chains)]
    return {k: np.stack([c[k] for c in chains]) for k in chains[0]}


def run_mcmc(graph: LikelihoodGraph, priors: PriorConfig, n_chains: int = 2,
             n_warmup: int = 1000, n_kept: int = 1000, seed: int = 0,
             fixed_sigma: float | Sequence[float] | None = None) -> PooledPosterior:
    """Sample the pooled posterior.

    ``fixed_sigma`` pins between-site SDs (0 makes every site share the
    common mean exactly); ``None`` samples them under the half-Cauchy prior.
    """
    if n_chains < 1 or n_kept < 1 or n_warmup < 0:
        raise ValueError("need n_chains >= 1, n_kept >= 1, n_warmup >= 0")
    problem = build_problem(graph, priors, fixed_sigma)
    draws = sample(problem, n_chains, n_warmup, n_kept, seed)
    return PooledPosterior(
        labels=graph.psi_labels, draws=draws, n_chains=n_chains, n_warmup=n_warmup,
        n_kept=n_kept, seed=seed, site_ids=problem.site_ids,
        horseshoe=priors.horseshoe_indices(), intercepts=graph.intercepts,
        extra={"flagged": [graph.psi_labels[t] for t in graph.flagged]})


def select_interactions(posterior: PooledPosterior, level: float = 0.95) -> list[int]:
    """Indices whose equal-tailed credible interval excludes zero.

    Candidates are the horseshoe-tagged indices, or every non-intercept
    index when no horseshoe prior is in use. Intercepts are never candidates.
    """
    n_psi = len(posterior.psi_labels)
    candidates = posterior.horseshoe or tuple(t for t in range(n_psi) if t not in posterior.intercepts)
    alpha = (1.0 - level) / 2.0
    lo, hi = posterior.quantile([alpha, 1.0 - alpha])
    return [t for t in candidates if t not in posterior.intercepts and (lo[t] > 0 or hi[t] < 0)]
