"""Reparametrization maps for sites where some coefficients are inestimable.

When a site lacks variation in a covariate (every patient has ``x1 = 1``) or
lacks a categorical reference level, stage one can only estimate linear
combinations of the site parameters. Each retained coefficient ``xi_r`` is
then ``theta_r + sum_d c[d, r] * theta_d`` where ``c[d, :]`` expresses the
dropped design column ``d`` in terms of the retained columns of the same
block. Those coefficients are exact (0/1/-1 for indicators, the constant
value for a constant numeric covariate), so the map reproduces the
expectation algebra for every pattern the toolkit supports.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .model import CoefKind, CoefficientIndex, DesignMatrix, ModelSpec, SiteDataset

# residual of a dropped column on retained same-block columns, relative to its norm
DEPENDENCY_TOL = 1e-7


class UnmappableSparsityError(ValueError):
    """A dropped column cannot be explained by the retained columns of its block."""


@dataclass(frozen=True)
class MapRow:
    column: CoefficientIndex
    label: str
    targets: tuple[tuple[CoefficientIndex, float], ...]


@dataclass(frozen=True)
class ReparamMap:
    rows: tuple[MapRow, ...]
    context: dict = field(default_factory=dict, compare=False)

    def blip_rows(self) -> tuple[MapRow, ...]:
        return tuple(r for r in self.rows if r.column.kind is not CoefKind.TREATMENT_FREE)

    def psi_map(self, spec: ModelSpec) -> list[tuple[str, dict[int, float]]]:
        """Blip rows as ``(label, {psi_index: weight})``."""
        return [(r.label, {spec.psi_index(c): w for c, w in r.targets}) for r in self.blip_rows()]

    def param_matrix(self, spec: ModelSpec) -> np.ndarray:
        """Dense map from the full (beta, psi) vector to the retained coefficients."""
        L = np.zeros((len(self.rows), spec.p + spec.n_psi))
        for i, r in enumerate(self.rows):
            for c, w in r.targets:
                L[i, spec.param_index(c)] = w
        return L

    @property
    def is_identity(self) -> bool:
        return all(len(r.targets) == 1 and r.targets[0] == (r.column, 1.0) for r in self.rows)


def _snap(w: float) -> float:
    w = float(np.round(w, 10))
    if abs(w - round(w)) < 1e-9:
        w = float(round(w))
    return 0.0 if w == 0 else w


def site_context(spec: ModelSpec, data: SiteDataset) -> dict:
    """Record which covariates are constant and which categorical levels are absent."""
    constants: dict[str, float] = {}
    for name in spec.covariates:
        col = data.column(name)
        if np.all(col == col[0]):
            constants[name] = float(col[0])
    absent: dict[str, list[str]] = {}
    reference_absent: list[str] = []
    by_var: dict[str, list] = {}
    for t in spec.treatment_free_terms:
        if t.is_indicator:
            by_var.setdefault(t.variable, []).append(t)
    for var, terms in by_var.items():
        cols = np.column_stack([data.column(t.name) for t in terms])
        missing = [t.level for t, c in zip(terms, cols.T) if not c.any()]
        if missing:
            absent[var] = missing
        if np.all(cols.sum(axis=1) == 1):
            reference_absent.append(var)
    return {"constants": constants, "absent_levels": absent, "reference_absent": sorted(reference_absent)}


def derive_reparam(spec: ModelSpec, design: DesignMatrix, retained: Sequence[int],
                   dropped: Sequence[int], context: dict | None = None) -> ReparamMap:
    """Build the per-site map from retained coefficients to global parameters.

    ``retained``/``dropped`` are design column positions from
    :func:`blipmeta.stageone.detect_estimable`.
    """
    X = design.values
    cols = design.columns
    retained = list(retained)
    dropped = list(dropped)
    for kind in (CoefKind.BLIP_LINEAR, CoefKind.BLIP_QUADRATIC):
        intercept = [j for j in dropped if cols[j].kind is kind and cols[j].position == 0]
        if intercept:
            raise UnmappableSparsityError(
                f"treatment column {design.labels[intercept[0]]!r} is inestimable "
                "(treatment sparsity is not supported)")

    rows: dict[int, dict[CoefficientIndex, float]] = {j: {cols[j]: 1.0} for j in retained}
    for kind in CoefKind:
        r_k = [j for j in retained if cols[j].kind is kind]
        for d in (j for j in dropped if cols[j].kind is kind):
            xd = X[:, d]
            norm = np.linalg.norm(xd)
            if norm == 0:
                continue
            if not r_k:
                raise UnmappableSparsityError(f"column {design.labels[d]!r} has no retained basis")
            c, *_ = np.linalg.lstsq(X[:, r_k], xd, rcond=None)
            resid = np.linalg.norm(X[:, r_k] @ c - xd)
            if resid > DEPENDENCY_TOL * norm:
                raise UnmappableSparsityError(
                    f"dropped column {design.labels[d]!r} is not a combination of retained "
                    f"{kind.value} columns")
            for j, w in zip(r_k, c):
                w = _snap(w)
                if w != 0.0:
                    rows[j][cols[d]] = rows[j].get(cols[d], 0.0) + w

    out = []
    for j in retained:
        targets = tuple(sorted(((k, w) for k, w in rows[j].items() if w != 0.0),
                               key=lambda kw: spec.param_index(kw[0])))
        out.append(MapRow(cols[j], design.labels[j], targets))
    return ReparamMap(tuple(out), dict(context or {}))


@dataclass(frozen=True)
class IdentifiabilityReport:
    n_psi: int
    flagged: tuple[int, ...]

    @property
    def ok(self) -> bool:
        return not self.flagged


def validate_identifiability(site_rows: Iterable[Iterable[Mapping[int, float]]],
                             n_psi: int) -> IdentifiabilityReport:
    """Flag psi indices that appear in no row of any site's map."""
    seen: set[int] = set()
    for rows in site_rows:
        for row in rows:
            seen.update(k for k, w in row.items() if w != 0)
    return IdentifiabilityReport(n_psi, tuple(t for t in range(n_psi) if t not in seen))
