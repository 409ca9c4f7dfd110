from pathlib import Path

import numpy as np
import pytest

from blipmeta import study
from blipmeta.simgen import Scenario
from blipmeta.stageone import DegenerateSiteError
from blipmeta.study import (ReplicateResult, StudyAborted, StudyConfig, aggregate, metrics_csv,
                            read_metrics_csv, replicates_csv, report, report_bytes, run_study)

DATA = Path(__file__).parent / "data"
METRICS = sorted((DATA / "metrics").glob("*.csv"))


def test_report_matches_golden():
    assert report_bytes(METRICS) == (DATA / "report.json").read_bytes()


@pytest.mark.parametrize("path", METRICS, ids=lambda p: p.stem)
def test_metrics_csv_round_trip(path):
    assert metrics_csv(read_metrics_csv(path)).encode() == path.read_bytes()


def test_empty_report():
    assert report([]) == {}


def test_two_scenario_merge_keeps_keys():
    r = report([DATA / "metrics" / "binary.csv", DATA / "metrics" / "many.csv"])
    assert set(r) == {"binary-common_effect-s1-n200", "many"}
    assert r["many"]["two_stage"]["selected"]["a:x4"]["n"] == 25
    # order of inputs does not matter
    assert report_bytes(METRICS[::-1]) == report_bytes(METRICS)


def _res(i, est, dvf, selected=None, ok=True, method="two_stage"):
    return ReplicateResult(i, method, ok, np.array(est, dtype=float) if ok else None,
                           selected, dvf if ok else float("nan"))


def test_aggregate_by_hand():
    truth = np.array([2.0, -1.0])
    results = [_res(0, [2.2, -1.0], 0.1), _res(1, [1.8, -0.5], 0.3), _res(2, None, 0, ok=False)]
    rows = {(r["subset"], r["parameter"]): r for r in aggregate("x", ["a", "a:x1"], truth, results)}
    a = rows[("full", "a")]
    assert a["mean"] == pytest.approx(2.0) and a["relative_bias"] == pytest.approx(0.0, abs=1e-12)
    assert a["sd"] == pytest.approx(np.sqrt(0.08)) and a["n"] == 2
    b = rows[("full", "a:x1")]
    assert b["relative_bias"] == pytest.approx((-0.75 + 1.0) / -1.0)
    d = rows[("full", "dVF")]
    assert d["mean"] == pytest.approx(0.2) and d["sd"] == pytest.approx(np.sqrt(0.02))
    assert not any(k[0] == "selected" for k in rows)


def test_aggregate_selected_subsets():
    truth = np.array([2.5, -0.5, 0.0])
    results = [_res(0, [2.5, -0.4, 0.0], 0.1, (1,)),
               _res(1, [2.5, -0.6, 0.2], 0.2, (1, 2)),
               _res(2, [2.5, 0.0, 0.0], 0.9, ())]
    rows = {(r["subset"], r["parameter"]): r
            for r in aggregate("x", ["a", "a:x1", "a:x2"], truth, results, horseshoe=True)}
    assert rows[("full", "a:x1")]["selection"] == pytest.approx(2 / 3)
    assert rows[("full", "a:x2")]["selection"] == pytest.approx(1 / 3)
    assert np.isnan(rows[("full", "a")]["selection"])
    sel = rows[("selected", "a:x1")]
    assert sel["n"] == 2 and sel["mean"] == pytest.approx(-0.5)
    # the selected dVF row keeps replicates where the true support was found
    assert rows[("selected", "dVF")]["n"] == 2
    assert rows[("selected", "dVF")]["mean"] == pytest.approx(0.15)


def tiny(**kw):
    sc = Scenario(K=3, n_mean=80, seed=5)
    return StudyConfig(sc, replicates=3, n_chains=1, n_warmup=100, n_kept=100,
                       cohort_size=2000, **kw)


def test_study_is_deterministic():
    a, b = run_study(tiny()), run_study(tiny())
    assert metrics_csv(a.metrics) == metrics_csv(b.metrics)
    assert replicates_csv(a) == replicates_csv(b)
    assert a.failures == 0 and len(a.results) == 3


def test_study_with_onestage_rows():
    res = run_study(tiny(onestage=True))
    assert {r["method"] for r in res.metrics} == {"two_stage", "one_stage"}


def test_failures_recorded_then_abort(monkeypatch):
    real = study._two_stage

    def flaky(cfg, rep, cohort, seed):
        if rep.index == 1:
            raise DegenerateSiteError("forced")
        return real(cfg, rep, cohort, seed)

    monkeypatch.setattr(study, "_two_stage", flaky)
    res = run_study(tiny(max_failure_rate=0.5))
    assert res.failures == 1
    assert "DegenerateSiteError" in replicates_csv(res)
    with pytest.raises(StudyAborted):
        run_study(tiny())
