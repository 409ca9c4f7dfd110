import numpy as np
import pytest

from blipmeta.model import (CoefKind, MissingColumnError, ModelError, ModelSpec,
                            NonFiniteDataError, SiteDataset, build_design_matrix)


def test_intercept_only_design():
    spec = ModelSpec("binary", ["1"], ["1"])
    d = SiteDataset("s", np.empty((2, 0)), (), [0, 1], [1.0, 2.0])
    X = build_design_matrix(spec, d)
    np.testing.assert_array_equal(X.values, [[1, 0], [1, 1]])


def test_binary_row_expansion(binary_spec):
    d = SiteDataset("s", [[5.0, 1.0]], ("x1", "x2"), [1], [0.0])
    X = build_design_matrix(binary_spec, d)
    np.testing.assert_array_equal(X.values, [[1, 5, 1, 1, 5]])
    assert X.labels == ("1", "x1", "x2", "a", "a:x1")


def test_quadratic_row_expansion(quad_spec):
    d = SiteDataset("s", [[2.0, 0.0]], ("x1", "x2"), [3], [0.0])
    X = build_design_matrix(quad_spec, d)
    np.testing.assert_array_equal(X.values, [[1, 2, 0, 3, 6, 9, 18]])
    assert X.labels[-2:] == ("a^2", "a^2:x1")


def test_column_map_is_a_bijection(quad_spec):
    cols = quad_spec.columns()
    assert len(cols) == quad_spec.n_columns == 7
    assert len(set(cols)) == len(cols)
    assert [quad_spec.param_index(c) for c in cols] == list(range(7))
    assert [c.kind for c in cols[-2:]] == [CoefKind.BLIP_QUADRATIC] * 2


def test_binary_has_no_quadratic_block(binary_spec):
    assert binary_spec.q2 == 0
    with pytest.raises(ModelError):
        ModelSpec("binary", ["1", "x1"], ["1"], ["1"])


def test_psi_indexing_puts_quadratic_after_linear(quad_spec):
    assert quad_spec.psi_labels == ["a", "a:x1", "a^2", "a^2:x1"]
    assert quad_spec.blip_intercepts == (0, 2)


@pytest.mark.parametrize("tf, blip", [
    (["1", "x1"], ["x1"]),            # intercept not first
    (["1"], ["1", "x1"]),             # blip term not prescriptive
    (["1", "x1", "x1"], ["1"]),       # duplicate
])
def test_spec_invariants(tf, blip):
    with pytest.raises(ModelError):
        ModelSpec("binary", tf, blip)


def test_missing_column_is_named(binary_spec):
    d = SiteDataset("s7", [[1.0]], ("x1",), [0], [0.0])
    with pytest.raises(MissingColumnError, match="x2"):
        build_design_matrix(binary_spec, d)


def test_non_finite_rejected():
    with pytest.raises(NonFiniteDataError):
        SiteDataset("s", [[np.nan]], ("x1",), [0], [0.0])
    with pytest.raises(NonFiniteDataError):
        SiteDataset("s", [[1.0]], ("x1",), [0], [np.inf])


def test_indicator_columns_must_be_binary():
    with pytest.raises(ModelError):
        SiteDataset("s", [[0.5]], ("x2[2]",), [0], [0.0])


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    d = SiteDataset("03", rng.normal(size=(5, 2)), ("x1", "x2"), rng.integers(0, 2, 5), rng.normal(size=5))
    d.to_csv(tmp_path / "03.csv")
    back = SiteDataset.from_csv(tmp_path / "03.csv")
    assert back.site_id == "03" and back.columns == d.columns
    np.testing.assert_array_equal(back.covariates, d.covariates)
    np.testing.assert_array_equal(back.outcome, d.outcome)


def test_fingerprint_tracks_content(binary_spec):
    again = ModelSpec.from_dict(binary_spec.to_dict())
    assert again.fingerprint() == binary_spec.fingerprint()
    other = ModelSpec("binary", ["1", "x1", "x2"], ["1", "x2"])
    assert other.fingerprint() != binary_spec.fingerprint()
