import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from blipmeta.model import ModelSpec, SiteDataset, build_design_matrix
from blipmeta.stageone import (DegenerateSiteError, SaturatedFitError, detect_estimable,
                               fit_ols, fit_site, summarize_site)
from conftest import linear_site


def svd_oracle(X, y):
    """Least squares and coefficient sds from the SVD, independent of QR."""
    U, s, Vt = np.linalg.svd(X, full_matrices=False)
    coef = Vt.T @ ((U.T @ y) / s)
    resid = y - X @ coef
    dof = X.shape[0] - X.shape[1]
    sigma2 = resid @ resid / dof
    cov = (Vt.T / s**2) @ Vt
    return coef, np.sqrt(sigma2 * np.diag(cov)), sigma2


def test_hand_solved_two_column_fit():
    X = np.array([[1, 0], [1, 0], [1, 1], [1, 1]], dtype=float)
    fit = fit_ols(X, np.array([1, 3, 4, 6.0]))
    # X'X = [[4, 2], [2, 2]]; intercept mean(1, 3), contrast mean(4, 6) - mean(1, 3)
    np.testing.assert_allclose(fit.coefficients, [2, 3], atol=1e-12)
    assert fit.residual_variance == pytest.approx(2.0)
    assert fit.dof == 2


def test_treatment_contrast_example():
    spec = ModelSpec("binary", ["1"], ["1"])
    d = SiteDataset("s", np.empty((4, 0)), (), [0, 0, 1, 1], [1, 3, 4, 6])
    site = fit_site(spec, d)
    np.testing.assert_allclose(site.fit.coefficients, [2, 3], atol=1e-12)
    assert site.fit.residual_variance == pytest.approx(2.0)
    assert site.fit.coefficient_sds[1] == pytest.approx(np.sqrt(2.0))


def test_zero_residual_fit():
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    fit = fit_ols(X, 2 + 3 * np.arange(6.0))
    assert fit.residual_variance == pytest.approx(0.0, abs=1e-20)
    np.testing.assert_allclose(fit.coefficient_sds, 0.0, atol=1e-10)


def test_matches_svd_oracle_on_random_design():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(50, 3))
    y = rng.normal(size=50)
    fit = fit_ols(X, y)
    coef, sds, s2 = svd_oracle(X, y)
    np.testing.assert_allclose(fit.coefficients, coef, rtol=1e-10)
    np.testing.assert_allclose(fit.coefficient_sds, sds, rtol=1e-10)
    assert fit.residual_variance == pytest.approx(s2, rel=1e-10)


def test_saturated_fit_rejected():
    with pytest.raises(SaturatedFitError):
        fit_ols(np.eye(3), np.ones(3))


def test_constant_covariate_drops_main_and_interaction(binary_spec):
    rng = np.random.default_rng(1)
    x = np.column_stack([np.ones(40), rng.normal(size=40)])
    d = SiteDataset("s", x, ("x1", "x2"), rng.integers(0, 2, 40), rng.normal(size=40))
    site = fit_site(binary_spec, d)
    assert [site.design.labels[j] for j in site.dropped] == ["x1", "a:x1"]


def test_full_rank_drops_nothing(binary_spec):
    rng = np.random.default_rng(2)
    d = SiteDataset("s", rng.normal(size=(30, 2)), ("x1", "x2"), rng.integers(0, 2, 30), rng.normal(size=30))
    assert fit_site(binary_spec, d).dropped == ()


def _greedy_rank_oracle(X):
    keep = []
    for j in range(X.shape[1]):
        if np.linalg.matrix_rank(X[:, keep + [j]]) > len(keep):
            keep.append(j)
    return keep


def test_absent_reference_level_against_rank_oracle():
    # six rows, X2 at levels 2 and 3 only, so the intercept absorbs one indicator
    x2_2 = np.array([1, 1, 1, 0, 0, 0.0])
    x2_3 = 1 - x2_2
    a = np.array([0, 1, 0, 1, 0, 1.0])
    x1 = np.array([0.3, -1.2, 0.8, 2.0, -0.4, 1.1])
    X = np.column_stack([np.ones(6), x1, x2_2, x2_3, a, a * x1, a * x2_2, a * x2_3])
    retained, dropped = detect_estimable(X)
    assert list(retained) == _greedy_rank_oracle(X)
    assert dropped == (3, 7)
    # maximal: no subset of size len(retained)+1 is independent
    rank = len(retained)
    assert np.linalg.matrix_rank(X[:, list(retained)]) == rank
    for cols in itertools.combinations(range(8), rank + 1):
        assert np.linalg.matrix_rank(X[:, list(cols)]) <= rank


def test_all_zero_design_is_degenerate():
    with pytest.raises(DegenerateSiteError):
        detect_estimable(np.zeros((4, 2)))


def test_summary_keeps_only_blip_entries(binary_spec):
    rng = np.random.default_rng(4)
    x = np.column_stack([rng.normal(5, 1, 60), rng.integers(0, 2, 60)])
    a = rng.integers(0, 2, 60).astype(float)
    d = linear_site(binary_spec, "s", x, ("x1", "x2"), a, np.array([4, 1, 1.0]),
                    np.array([2.5, -0.5]), 0.5, rng)
    site = fit_site(binary_spec, d)
    s = summarize_site(binary_spec, site.fit, site.mapping, "s")
    assert [e.label for e in s.entries] == ["a", "a:x1"]
    assert [e.map_row for e in s.entries] == [((0, 1.0),), ((1, 1.0),)]


def test_summary_for_constant_binary_covariate():
    spec = ModelSpec("binary", ["1", "x1"], ["1", "x1"])
    rng = np.random.default_rng(5)
    d = SiteDataset("s", np.ones((30, 1)), ("x1",), rng.integers(0, 2, 30), rng.normal(size=30))
    site = fit_site(spec, d)
    s = summarize_site(spec, site.fit, site.mapping, "s")
    assert len(s.entries) == 1
    assert s.entries[0].map_row == ((0, 1.0), (1, 1.0))


def test_summary_for_absent_reference_category():
    spec = ModelSpec("binary", ["1", "x2[2]", "x2[3]"], ["1", "x2[2]", "x2[3]"])
    rng = np.random.default_rng(6)
    lv = rng.choice([2, 3], 80)
    x = np.column_stack([lv == 2, lv == 3]).astype(float)
    d = SiteDataset("s", x, ("x2[2]", "x2[3]"), rng.integers(0, 2, 80), rng.normal(size=80))
    site = fit_site(spec, d)
    s = summarize_site(spec, site.fit, site.mapping, "s")
    rows = {e.label: dict(e.map_row) for e in s.entries}
    # the scan keeps x2[2] and drops x2[3], so level 3 is the implicit reference
    assert rows == {"a": {0: 1.0, 2: 1.0}, "a:x2[2]": {1: 1.0, 2: -1.0}}
    # same identified functionals as taking level 2 as the reference: (psi0+psi1, psi2-psi1)
    ours = np.array([[1, 0, 1], [0, 1, -1.0]])
    level2 = np.array([[1, 1, 0], [0, -1, 1.0]])
    assert np.linalg.matrix_rank(np.vstack([ours, level2])) == 2


@settings(max_examples=40, deadline=None)
@given(c=st.floats(0.01, 100), seed=st.integers(0, 10_000))
def test_outcome_scaling(c, seed):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(20), rng.normal(size=(20, 2))])
    y = rng.normal(size=20)
    f1, f2 = fit_ols(X, y), fit_ols(X, c * y)
    np.testing.assert_allclose(f2.coefficients, c * f1.coefficients, rtol=1e-9, atol=1e-12)
    np.testing.assert_allclose(f2.coefficient_sds, c * f1.coefficient_sds, rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 10_000), which=st.integers(0, 2))
def test_duplicated_column_leaves_estimates(seed, which):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(25), rng.normal(size=(25, 2))])
    y = rng.normal(size=25)
    Xd = np.column_stack([X, X[:, which]])
    kept, dropped = detect_estimable(Xd)
    assert dropped == (3,)
    np.testing.assert_allclose(fit_ols(Xd[:, kept], y).coefficients, fit_ols(X, y).coefficients,
                               rtol=1e-10, atol=1e-12)


def test_duplicated_covariate_in_site_pipeline():
    spec1 = ModelSpec("binary", ["1", "x1"], ["1", "x1"])
    spec2 = ModelSpec("binary", ["1", "x1", "x1b"], ["1", "x1"])
    rng = np.random.default_rng(8)
    x1 = rng.normal(size=50)
    a = rng.integers(0, 2, 50)
    y = rng.normal(size=50)
    f1 = fit_site(spec1, SiteDataset("s", x1[:, None], ("x1",), a, y)).fit
    f2 = fit_site(spec2, SiteDataset("s", np.column_stack([x1, x1]), ("x1", "x1b"), a, y)).fit
    np.testing.assert_allclose(f2.coefficients, f1.coefficients, rtol=1e-10, atol=1e-12)
