import csv
import io
import math

import numpy as np
import pytest

from conftest import make_trial
from swedge.design import TreatmentEffectSpec
from swedge.lmm import extract_estimands, fit_lmm
from swedge.report import SCHEMA, Z95, EstimandReport, Scale, make_row, render


def table_rows(text):
    # title, provenance and header lines precede the rows; dashes separate summaries
    lines = text.strip().splitlines()[3:]
    return [ln for ln in lines if not set(ln.replace(" ", "")) <= {"-"} and not ln.startswith("LRT")]


@pytest.fixture
def data(rng):
    return make_trial(rng, I=18, J=3)


class TestRows:
    def test_difference_interval(self):
        row = make_row("Δ", 1.0, 0.5, 0.4, "difference")
        assert (row.ci_lo, row.ci_hi) == pytest.approx((1.0 - Z95 * 0.5, 1.0 + Z95 * 0.5))
        assert row.ci_lo <= row.estimate <= row.ci_hi

    def test_ratio_interval_is_exponentiated(self):
        row = make_row("Φ", math.log(2.0), 0.1, None, "or")
        assert row.estimate == pytest.approx(2.0)
        assert row.ci_lo == pytest.approx(2.0 * math.exp(-Z95 * 0.1))
        assert row.ci_hi == pytest.approx(2.0 * math.exp(Z95 * 0.1))
        assert row.log_se == 0.1 and row.se_model is None
        assert row.covers(2.1) and not row.covers(2.5)

    def test_scale_aliases(self):
        assert Scale.parse("odds-ratio") is Scale.ODDS_RATIO
        assert Scale.parse("rr").symbol == "Φ"
        with pytest.raises(ValueError):
            Scale.parse("hazard")


class TestRender:
    def test_constant_report_has_one_row(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("constant", 3)))
        assert len(table_rows(render(rep))) == 1

    def test_saturated_row_count(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("saturated", 3)))
        rows = table_rows(render(rep))
        assert len(rows) == 3 + 1
        assert rows[-1].startswith("Δ^{S-avg}")
        assert [r.split()[0] for r in rows[:3]] == ["Δ_1(1)", "Δ_2(1)", "Δ_2(2)"]

    def test_table_uses_three_decimals(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("constant", 3)))
        est = table_rows(render(rep))[0].split()[1]
        assert est == f"{rep.components[0].estimate:.3f}"

    def test_json_round_trip(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("duration", 3)))
        text = render(rep, "json")
        back = EstimandReport.from_json(text)
        assert back == rep
        assert render(back, "json") == text
        assert back.to_dict()["schema"] == SCHEMA

    def test_csv_full_precision(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("period", 3)))
        rows = list(csv.DictReader(io.StringIO(render(rep, "csv"))))
        assert [r["kind"] for r in rows] == ["component", "component", "summary"]
        assert float(rows[0]["estimate"]) == rep.components[0].estimate

    def test_lrt_line(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("duration", 3)))
        rep.tests.append({"restricted": "constant", "general": "duration", "statistic": 1.5,
                          "df": 2, "p_value": 0.47, "periods_used": 3})
        assert "df=2" in render(rep).splitlines()[-1]

    def test_unknown_format(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("constant", 3)))
        with pytest.raises(ValueError):
            render(rep, "xml")

    def test_wrong_schema(self):
        with pytest.raises(ValueError, match="schema"):
            EstimandReport.from_dict({"schema": "other/9"})

    def test_lookup_by_label(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("duration", 3)))
        assert rep["Δ(2)"].estimate == rep.components[1].estimate
        with pytest.raises(KeyError):
            rep["Δ(9)"]

    def test_provenance(self, data):
        rep = extract_estimands(fit_lmm(data, TreatmentEffectSpec("constant", 3), "nested"))
        prov = rep.provenance
        assert prov["estimator"] == "lmm" and prov["correlation"] == "nested"
        assert prov["n_clusters"] == 18
        assert len(prov["data_fingerprint"]) > 8
        assert np.isfinite(prov["variance_components"]["sigma2"])
