"""Per-site least squares, inestimable-column detection and site summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .federation import SiteSummary, SummaryEntry
from .model import CoefKind, CoefficientIndex, DesignMatrix, ModelSpec, SiteDataset, build_design_matrix
from .sparsity import ReparamMap, derive_reparam, site_context

RANK_TOL = 1e-8


class DegenerateSiteError(ValueError):
    """Every design column was dropped."""


class SaturatedFitError(ValueError):
    """No residual degrees of freedom, so standard deviations are undefined."""


def detect_estimable(design: np.ndarray | DesignMatrix, tol: float = RANK_TOL) -> tuple[tuple[int, ...], tuple[int, ...]]:
    """Scan columns in order, dropping any that lie in the span of those already kept.

    A column is kept when the norm of its component orthogonal to the kept
    columns exceeds ``tol`` times its own norm. All-zero columns are dropped.
    """
    X = np.asarray(design.values if isinstance(design, DesignMatrix) else design, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("design needs at least one row")
    basis = np.empty((X.shape[0], 0))
    retained, dropped = [], []
    for j in range(X.shape[1]):
        col = X[:, j]
        norm = np.linalg.norm(col)
        if norm == 0.0:
            dropped.append(j)
            continue
        r = col.copy()
        for _ in range(2):  # second pass restores orthogonality lost to rounding
            r -= basis @ (basis.T @ r)
        rn = np.linalg.norm(r)
        if rn <= tol * norm:
            dropped.append(j)
        else:
            retained.append(j)
            basis = np.column_stack([basis, r / rn])
    if not retained:
        raise DegenerateSiteError("all design columns are inestimable")
    return tuple(retained), tuple(dropped)


@dataclass(frozen=True)
class SiteFit:
    estimable_columns: tuple[CoefficientIndex, ...]
    coefficients: np.ndarray
    residual_variance: float
    coefficient_sds: np.ndarray
    n_obs: int
    dof: int
    xtx_inv: np.ndarray
    rss: float
    labels: tuple[str, ...] = ()

    @property
    def covariance(self) -> np.ndarray:
        return self.residual_variance * self.xtx_inv


def fit_ols(design: np.ndarray, outcome: np.ndarray,
            columns: tuple[CoefficientIndex, ...] = (), labels: tuple[str, ...] = ()) -> SiteFit:
    """Least squares on a full-column-rank design via Householder QR."""
    X = np.asarray(design, dtype=float)
    y = np.asarray(outcome, dtype=float)
    n, k = X.shape
    dof = n - k
    if dof < 1:
        raise SaturatedFitError(f"{n} observations for {k} coefficients")
    Q, R = np.linalg.qr(X, mode="reduced")
    coef = solve_triangular(R, Q.T @ y)
    resid = y - X @ coef
    rss = float(resid @ resid)
    sigma2 = rss / dof
    R_inv = solve_triangular(R, np.eye(k))
    xtx_inv = R_inv @ R_inv.T
    sds = np.sqrt(sigma2 * np.diag(xtx_inv))
    return SiteFit(tuple(columns), coef, sigma2, sds, n, dof, xtx_inv, rss, tuple(labels))


@dataclass(frozen=True)
class SiteStageOne:
    """Everything stage one knows about a site; only ``summary`` leaves the site."""

    design: DesignMatrix
    retained: tuple[int, ...]
    dropped: tuple[int, ...]
    fit: SiteFit
    mapping: ReparamMap


def fit_site(spec: ModelSpec, data: SiteDataset, tol: float = RANK_TOL) -> SiteStageOne:
    design = build_design_matrix(spec, data)
    retained, dropped = detect_estimable(design, tol)
    mapping = derive_reparam(spec, design, retained, dropped, site_context(spec, data))
    cols = tuple(design.columns[j] for j in retained)
    labels = tuple(design.labels[j] for j in retained)
    fit = fit_ols(design.values[:, retained], data.outcome, cols, labels)
    return SiteStageOne(design, retained, dropped, fit, mapping)


def summarize_site(spec: ModelSpec, fit: SiteFit, mapping: ReparamMap, site_id: str) -> SiteSummary:
    """Keep only blip coefficients, each with its sd and its map row."""
    rows = {r.column: r for r in mapping.blip_rows()}
    entries = []
    for ci, est, sd in zip(fit.estimable_columns, fit.coefficients, fit.coefficient_sds):
        if ci.kind is CoefKind.TREATMENT_FREE:
            continue
        row = rows[ci]
        entries.append(SummaryEntry(
            label=row.label, estimate=float(est), sd=float(sd),
            map_row=tuple((spec.psi_index(c), w) for c, w in row.targets)))
    return SiteSummary(site_id=site_id, model_fingerprint=spec.fingerprint(),
                       n_obs=fit.n_obs, dof=fit.dof, entries=tuple(entries))
