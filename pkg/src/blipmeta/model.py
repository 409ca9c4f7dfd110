"""Model specifications, site datasets and design-matrix construction."""

from __future__ import annotations

import csv
import hashlib
import json
import re
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class ModelError(ValueError):
    """Invalid model specification or dataset."""


class MissingColumnError(ModelError):
    pass


class NonFiniteDataError(ModelError):
    pass


class TreatmentKind(str, Enum):
    BINARY = "binary"
    CONTINUOUS_QUADRATIC = "continuous_quadratic"


class CoefKind(str, Enum):
    TREATMENT_FREE = "treatment_free"
    BLIP_LINEAR = "blip_linear"
    BLIP_QUADRATIC = "blip_quadratic"


_INDICATOR = re.compile(r"^(?P<var>[^\[\]]+)\[(?P<level>[^\[\]]+)\]$")


@dataclass(frozen=True)
class Term:
    """One covariate term: the intercept, a numeric column, or a level indicator.

    Terms are written as strings in configs: ``"1"`` is the intercept,
    ``"x1"`` a numeric column and ``"x2[3]"`` the indicator column for level
    3 of the categorical variable ``x2``. The string is also the data column
    name.
    """

    name: str

    @classmethod
    def parse(cls, text: str) -> "Term":
        text = str(text).strip()
        if not text:
            raise ModelError("empty term descriptor")
        return cls(text)

    @property
    def is_intercept(self) -> bool:
        return self.name == "1"

    @property
    def variable(self) -> str | None:
        m = _INDICATOR.match(self.name)
        return m.group("var") if m else None

    @property
    def level(self) -> str | None:
        m = _INDICATOR.match(self.name)
        return m.group("level") if m else None

    @property
    def is_indicator(self) -> bool:
        return self.variable is not None

    def __str__(self) -> str:
        return self.name


@dataclass(frozen=True)
class CoefficientIndex:
    kind: CoefKind
    position: int


def _terms(items: Iterable[str | Term]) -> tuple[Term, ...]:
    return tuple(t if isinstance(t, Term) else Term.parse(t) for t in items)


@dataclass(frozen=True)
class ModelSpec:
    """Outcome model: treatment-free terms plus a linear (and optionally quadratic) blip.

    Global blip parameters are indexed linear block first, then quadratic
    block, so ``psi_index`` of quadratic position ``t`` is ``q + t``.
    """

    treatment_kind: TreatmentKind
    treatment_free_terms: tuple[Term, ...]
    blip_terms_linear: tuple[Term, ...]
    blip_terms_quadratic: tuple[Term, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "treatment_kind", TreatmentKind(self.treatment_kind))
        object.__setattr__(self, "treatment_free_terms", _terms(self.treatment_free_terms))
        object.__setattr__(self, "blip_terms_linear", _terms(self.blip_terms_linear))
        object.__setattr__(self, "blip_terms_quadratic", _terms(self.blip_terms_quadratic))
        self._validate()

    def _validate(self):
        if not self.blip_terms_linear or not self.blip_terms_linear[0].is_intercept:
            raise ModelError("the first linear blip term must be the intercept '1'")
        if self.treatment_kind is TreatmentKind.BINARY and self.blip_terms_quadratic:
            raise ModelError("binary treatment cannot have a quadratic blip block")
        if self.treatment_kind is TreatmentKind.CONTINUOUS_QUADRATIC:
            if not self.blip_terms_quadratic or not self.blip_terms_quadratic[0].is_intercept:
                raise ModelError("the first quadratic blip term must be the intercept '1'")
        for name, terms in (("treatment_free_terms", self.treatment_free_terms),
                            ("blip_terms_linear", self.blip_terms_linear),
                            ("blip_terms_quadratic", self.blip_terms_quadratic)):
            if len(set(terms)) != len(terms):
                raise ModelError(f"duplicate term in {name}")
        predictive = set(self.treatment_free_terms)
        for t in self.blip_terms_linear + self.blip_terms_quadratic:
            if t not in predictive:
                raise ModelError(f"blip term {t} is not a treatment-free term")

    # -- sizes and labels ---------------------------------------------------

    @property
    def p(self) -> int:
        return len(self.treatment_free_terms)

    @property
    def q(self) -> int:
        return len(self.blip_terms_linear)

    @property
    def q2(self) -> int:
        return len(self.blip_terms_quadratic)

    @property
    def n_psi(self) -> int:
        return self.q + self.q2

    @property
    def n_columns(self) -> int:
        return self.p + self.q + self.q2

    @property
    def covariates(self) -> tuple[str, ...]:
        return tuple(t.name for t in self.treatment_free_terms if not t.is_intercept)

    def terms_of(self, kind: CoefKind) -> tuple[Term, ...]:
        return {
            CoefKind.TREATMENT_FREE: self.treatment_free_terms,
            CoefKind.BLIP_LINEAR: self.blip_terms_linear,
            CoefKind.BLIP_QUADRATIC: self.blip_terms_quadratic,
        }[CoefKind(kind)]

    def columns(self) -> list[CoefficientIndex]:
        """Canonical column order: treatment-free, then a-block, then a^2-block."""
        cols = [CoefficientIndex(CoefKind.TREATMENT_FREE, s) for s in range(self.p)]
        cols += [CoefficientIndex(CoefKind.BLIP_LINEAR, t) for t in range(self.q)]
        cols += [CoefficientIndex(CoefKind.BLIP_QUADRATIC, t) for t in range(self.q2)]
        return cols

    def label(self, ci: CoefficientIndex) -> str:
        term = self.terms_of(ci.kind)[ci.position]
        if ci.kind is CoefKind.TREATMENT_FREE:
            return term.name
        prefix = "a" if ci.kind is CoefKind.BLIP_LINEAR else "a^2"
        return prefix if term.is_intercept else f"{prefix}:{term.name}"

    def psi_index(self, ci: CoefficientIndex) -> int:
        if ci.kind is CoefKind.BLIP_LINEAR:
            return ci.position
        if ci.kind is CoefKind.BLIP_QUADRATIC:
            return self.q + ci.position
        raise ModelError("treatment-free coefficients have no psi index")

    def param_index(self, ci: CoefficientIndex) -> int:
        """Index into the full parameter vector (beta..., psi...)."""
        if ci.kind is CoefKind.TREATMENT_FREE:
            return ci.position
        return self.p + self.psi_index(ci)

    def psi_columns(self) -> list[CoefficientIndex]:
        return [c for c in self.columns() if c.kind is not CoefKind.TREATMENT_FREE]

    @property
    def psi_labels(self) -> list[str]:
        return [self.label(c) for c in self.psi_columns()]

    @property
    def blip_intercepts(self) -> tuple[int, ...]:
        """psi indices of the treatment main effects (never subject to selection)."""
        return (0,) if self.q2 == 0 else (0, self.q)

    @property
    def param_labels(self) -> list[str]:
        return [self.label(c) for c in self.columns()]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        return {
            "treatment_kind": self.treatment_kind.value,
            "treatment_free_terms": [t.name for t in self.treatment_free_terms],
            "blip_terms_linear": [t.name for t in self.blip_terms_linear],
            "blip_terms_quadratic": [t.name for t in self.blip_terms_quadratic],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        try:
            return cls(
                treatment_kind=d["treatment_kind"],
                treatment_free_terms=d["treatment_free_terms"],
                blip_terms_linear=d["blip_terms_linear"],
                blip_terms_quadratic=d.get("blip_terms_quadratic", ()),
            )
        except KeyError as e:
            raise ModelError(f"model config is missing {e.args[0]!r}") from None

    def canonical_bytes(self) -> bytes:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()

    def fingerprint(self) -> str:
        return "sha256:" + hashlib.sha256(self.canonical_bytes()).hexdigest()


@dataclass(frozen=True)
class SiteDataset:
    site_id: str
    covariates: np.ndarray
    columns: tuple[str, ...]
    treatment: np.ndarray
    outcome: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X.reshape(-1, 1) if len(self.columns) == 1 else X.reshape(-1, len(self.columns))
        a = np.asarray(self.treatment, dtype=float).ravel()
        y = np.asarray(self.outcome, dtype=float).ravel()
        cols = tuple(str(c) for c in self.columns)
        if X.shape[1] != len(cols):
            raise ModelError("covariate matrix width does not match column names")
        n = X.shape[0]
        if n < 1 or a.shape[0] != n or y.shape[0] != n:
            raise ModelError("covariates, treatment and outcome need the same n >= 1")
        for arr, what in ((X, "covariates"), (a, "treatment"), (y, "outcome")):
            if not np.all(np.isfinite(arr)):
                raise NonFiniteDataError(f"site {self.site_id}: non-finite {what}")
        for j, c in enumerate(cols):
            if _INDICATOR.match(c) and not np.all((X[:, j] == 0) | (X[:, j] == 1)):
                raise ModelError(f"site {self.site_id}: indicator column {c} is not 0/1")
        for arr in (X, a, y):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatment", a)
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "columns", cols)

    @property
    def n(self) -> int:
        return self.covariates.shape[0]

    def column(self, name: str) -> np.ndarray:
        try:
            return self.covariates[:, self.columns.index(name)]
        except ValueError:
            raise MissingColumnError(f"site {self.site_id}: no covariate column {name!r}") from None

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow([*self.columns, "a", "y"])
            for row, a, y in zip(self.covariates, self.treatment, self.outcome):
                w.writerow([repr(float(v)) for v in row] + [repr(float(a)), repr(float(y))])

    @classmethod
    def from_csv(cls, path: str | Path, site_id: str | None = None,
                 treatment: str = "a", outcome: str = "y") -> "SiteDataset":
        path = Path(path)
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows:
            raise ModelError(f"{path}: empty file")
        header, body = rows[0], rows[1:]
        for needed in (treatment, outcome):
            if needed not in header:
                raise MissingColumnError(f"{path}: no {needed!r} column")
        data = np.array(body, dtype=float).reshape(len(body), len(header))
        cov_cols = [c for c in header if c not in (treatment, outcome)]
        idx = [header.index(c) for c in cov_cols]
        return cls(
            site_id=site_id or path.name.split(".")[0],
            covariates=data[:, idx],
            columns=tuple(cov_cols),
            treatment=data[:, header.index(treatment)],
            outcome=data[:, header.index(outcome)],
        )


def term_values(term: Term, covariates: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    n = covariates.shape[0]
    if term.is_intercept:
        return np.ones(n)
    try:
        return covariates[:, list(columns).index(term.name)]
    except ValueError:
        raise MissingColumnError(f"no covariate column {term.name!r}") from None


def term_matrix(terms: Sequence[Term], covariates: np.ndarray, columns: Sequence[str]) -> np.ndarray:
    covariates = np.atleast_2d(np.asarray(covariates, dtype=float))
    if not terms:
        return np.empty((covariates.shape[0], 0))
    return np.column_stack([term_values(t, covariates, columns) for t in terms])


@dataclass(frozen=True)
class DesignMatrix:
    values: np.ndarray
    columns: tuple[CoefficientIndex, ...]
    labels: tuple[str, ...] = field(default=())

    @property
    def shape(self):
        return self.values.shape


def build_design_matrix(spec: ModelSpec, data: SiteDataset) -> DesignMatrix:
    """Columns ``[f(x) | a * g1(x) | a^2 * g2(x)]`` in canonical order."""
    try:
        tf = term_matrix(spec.treatment_free_terms, data.covariates, data.columns)
        g1 = term_matrix(spec.blip_terms_linear, data.covariates, data.columns)
        g2 = term_matrix(spec.blip_terms_quadratic, data.covariates, data.columns)
    except MissingColumnError as e:
        raise MissingColumnError(f"site {data.site_id}: {e}") from None
    a = data.treatment[:, None]
    X = np.hstack([tf, a * g1, a**2 * g2])
    if not np.all(np.isfinite(X)):
        raise NonFiniteDataError(f"site {data.site_id}: non-finite design entries")
    X.setflags(write=False)
    cols = tuple(spec.columns())
    return DesignMatrix(X, cols, tuple(spec.label(c) for c in cols))
