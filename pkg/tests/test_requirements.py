import json

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsvcert.bsv import AnalyticSurrogate, BsvState, FailureReport, estimate_pfail, make_grid
from bsvcert.lineage import canonical_json, sha256
from bsvcert.odd import OddPoint
from bsvcert.requirements import (
    ConfigError,
    Dal,
    DalTable,
    HazardAssessment,
    SeverityClass,
    dal_threshold,
    load_assessment,
    recommend_restriction,
    report_digest,
    restricted_state,
    verify_requirement,
)
from bsvcert.sut import Trial


def report(p):
    return FailureReport(p, 10, [], OddPoint({"glideslope_deg": 3.0, "distance_nm": 3.5}), 0.01, (50, 50))


def assessment(req=1e-4):
    return HazardAssessment("runway detection", "Major", "C", req)


def analytic_state(space, fn):
    trial = Trial(OddPoint({"glideslope_deg": 3.0, "distance_nm": 1.0}), False, None, 1)
    return BsvState(space, AnalyticSurrogate(fn), (trial,), 1, 0)


def test_dal_c_per_approach():
    assert dal_threshold(DalTable(), "C", "per approach") == 1e-4
    assert dal_threshold(DalTable(), Dal.C, "per approach") == 1e-4


def test_dal_table_errors():
    with pytest.raises(ConfigError):
        dal_threshold(DalTable(), "F", "per approach")
    with pytest.raises(ConfigError):
        dal_threshold(DalTable(), "B", "per approach")
    with pytest.raises(ConfigError):
        DalTable({("A", "per flight hour"): 2.0})


def test_dal_table_round_trip(tmp_path):
    table = DalTable({("B", "per flight hour"): 1e-7, ("C", "per approach"): 1e-4})
    path = tmp_path / "dal.json"
    path.write_text(json.dumps(table.to_dict()))
    loaded = DalTable.load(path)
    assert loaded == table
    assert dal_threshold(loaded, "B", "per flight hour") == 1e-7


def test_assessment_from_file(tmp_path):
    path = tmp_path / "a.json"
    path.write_text(json.dumps({"function_name": "runway detection", "severity_class": "Major", "dal": "C", "exposure": "per approach"}))
    a = load_assessment(path)
    assert a.p_fail_requirement == 1e-4
    assert a.severity_class is SeverityClass.MAJOR
    assert HazardAssessment.from_dict(a.to_dict()) == a
    path.write_text(json.dumps({"function_name": "x", "severity_class": "Major", "dal": "C", "p_fail_requirement": 1.5}))
    with pytest.raises(ConfigError):
        load_assessment(path)
    path.write_text(json.dumps({"function_name": "x", "dal": "C"}))
    with pytest.raises(ConfigError):
        load_assessment(path)


def test_verdict_examples():
    v = verify_requirement(report(5.8e-3), assessment())
    assert not v.passed
    assert v.margin == pytest.approx(58.0)
    assert verify_requirement(report(0.0), assessment()).passed
    assert verify_requirement(report(1e-4), assessment()).passed


def test_verdict_provenance():
    r = report(2e-3)
    v = verify_requirement(r, assessment())
    assert v.provenance == sha256(canonical_json(json.loads(json.dumps(r.to_dict()))))
    assert v.provenance == report_digest(r.to_dict())
    assert v.to_dict()["pass"] is False


@given(st.floats(0, 1), st.floats(0, 1), st.floats(1e-9, 0.999))
def test_verdict_monotone(p1, p2, req):
    lo, hi = sorted((p1, p2))
    a = assessment(req)
    if not verify_requirement(report(lo), a).passed:
        assert not verify_requirement(report(hi), a).passed


def test_restriction_on_step_oracle(space):
    st = analytic_state(space, lambda X: (X[:, 1] > 2.0).astype(float))
    r = recommend_restriction(st, assessment(1e-3), "distance_nm", 50)
    width = make_grid(space, 50).widths[1]
    assert r is not None
    assert r.interval[0] == 0.0
    assert abs(r.interval[1] - 2.0) <= width
    assert r.projected_p_fail <= 1e-3


def test_restriction_projection_matches_estimate(space):
    # smooth failure probability rising with distance
    st = analytic_state(space, lambda X: 1.0 / (1.0 + np.exp(-(X[:, 1] - 2.5) * 4.0)))
    r = recommend_restriction(st, assessment(1e-2), "distance_nm", 40)
    assert r is not None and r.interval[1] < 4.0
    recomputed = estimate_pfail(restricted_state(st, r), 40).p_fail
    assert abs(recomputed - r.projected_p_fail) <= 1e-6
    assert recomputed <= 1e-2


def test_restriction_identity_when_met(space):
    st = analytic_state(space, lambda X: np.zeros(len(X)))
    r = recommend_restriction(st, assessment(), "distance_nm")
    assert r.interval == (0.0, 4.0)
    assert r.projected_p_fail == 0.0


def test_restriction_infeasible(space):
    st = analytic_state(space, lambda X: np.ones(len(X)))
    assert recommend_restriction(st, assessment(), "distance_nm", 20) is None


def test_restriction_bad_dimension(space):
    st = analytic_state(space, lambda X: np.ones(len(X)))
    with pytest.raises(ValueError):
        recommend_restriction(st, assessment(), "altitude_ft")
