"""Summaries, cross-seed statistics, the trade-off table, and serialization."""

import json
import math

import jsonschema
import pytest

from scalarnorm.costs import ModelShape, builtin_expressions_path, load_expression_csv
from scalarnorm.expr import format_expr
from scalarnorm.report import (
    ALIGNMENT_COLUMNS,
    MethodAlignment,
    SelectionRecord,
    TradeoffRow,
    emit_tradeoff,
    load_alignment_csv,
    render_alignment_csv,
    render_report_json,
    render_tradeoff_csv,
    report_schema_path,
    representative_expressions,
    summarize_alignment,
    verify_summary,
)


def _record(layer, seed, mse=0.1, r2=0.9, fitness_val=0.2, expression="tanh(x)"):
    return SelectionRecord(layer_id=layer, seed=seed, expression=expression,
                           fitness_train=0.15, fitness_val=fitness_val,
                           mse_val=mse, r2_val=r2, node_count=2, flops_coeff=23)


class TestSummarize:
    def test_identical_seeds_zero_std(self):
        records = [_record(f"l{i}", s) for i in range(3) for s in range(5)]
        summary = summarize_alignment(records)
        assert summary.mse_std == 0.0
        assert summary.r2_std == 0.0
        assert summary.mse_mean == pytest.approx(0.1)

    def test_two_seed_hand_computation(self):
        records = [_record("l0", 0, r2=0.9), _record("l0", 1, r2=1.0)]
        summary = summarize_alignment(records)
        assert summary.r2_mean == pytest.approx(0.95)
        assert summary.r2_std == pytest.approx(0.07071067811865475, rel=1e-9)

    def test_single_seed_std_is_zero(self):
        summary = summarize_alignment([_record("l0", 0)])
        assert summary.mse_std == 0.0

    def test_record_cardinality(self):
        records = [_record(f"l{i:02d}", s) for i in range(25) for s in range(5)]
        summary = summarize_alignment(records)
        assert len(summary.records) == 125
        assert len(summary.per_seed_mse) == 5

    def test_layer_means_before_seed_stats(self):
        # seed 0: layers (0.1, 0.3) -> 0.2; seed 1: (0.2, 0.4) -> 0.3
        records = [_record("a", 0, mse=0.1), _record("b", 0, mse=0.3),
                   _record("a", 1, mse=0.2), _record("b", 1, mse=0.4)]
        summary = summarize_alignment(records)
        assert summary.per_seed_mse[0] == pytest.approx(0.2)
        assert summary.per_seed_mse[1] == pytest.approx(0.3)
        assert summary.mse_mean == pytest.approx(0.25)

    def test_empty_records_rejected(self):
        with pytest.raises(ValueError):
            summarize_alignment([])


class TestVerifySummary:
    def test_accepts_fresh_summary(self):
        summary = summarize_alignment([_record("l0", s, mse=0.1 * (s + 1))
                                       for s in range(3)])
        verify_summary(summary)

    def test_detects_tampering(self):
        summary = summarize_alignment([_record("l0", s) for s in range(3)])
        summary.mse_mean += 1e-6
        with pytest.raises(ValueError):
            verify_summary(summary)


class TestRepresentativeExpressions:
    def test_lowest_mean_validation_fitness_wins(self):
        records = [_record("a", 0, fitness_val=0.5), _record("b", 0, fitness_val=0.5),
                   _record("a", 1, fitness_val=0.1), _record("b", 1, fitness_val=0.1)]
        summary = summarize_alignment(records)
        seed, exprs = representative_expressions(summary)
        assert seed == 1
        assert [lid for lid, _ in exprs] == ["a", "b"]


class TestEmitTradeoff:
    def _summary_with_methods(self):
        pairs = load_expression_csv(builtin_expressions_path())
        records = [_record(lid, 0, expression=format_expr(e)) for lid, e in pairs]
        summary = summarize_alignment(records)
        summary.methods["ln"] = MethodAlignment("ln", 1.0)
        summary.methods["dyt"] = MethodAlignment("dyt", 0.702)
        summary.methods["gp"] = MethodAlignment(
            "gp", summary.r2_mean,
            expressions=tuple((lid, format_expr(e)) for lid, e in pairs))
        return summary

    def test_published_ratios(self):
        rows = emit_tradeoff(self._summary_with_methods())
        by_method = {r.method: r for r in rows}
        assert by_method["gp"].mflops / by_method["ln"].mflops == pytest.approx(3.79, abs=0.01)
        assert by_method["dyt"].mflops / by_method["ln"].mflops == pytest.approx(4.79, abs=0.01)

    def test_read_traffic_halves(self):
        rows = emit_tradeoff(self._summary_with_methods(),
                             ModelShape(d=512, seq_len=33, n_layers=25))
        by_method = {r.method: r for r in rows}
        assert by_method["ln"].read_mb == 2 * by_method["gp"].read_mb
        assert by_method["dyt"].read_mb == by_method["gp"].read_mb

    def test_missing_method_named(self):
        summary = self._summary_with_methods()
        del summary.methods["dyt"]
        with pytest.raises(ValueError, match="DYT"):
            emit_tradeoff(summary)


class TestSerialization:
    def _records(self):
        return [_record(f"l{i}", s, mse=0.01 * i + 0.001 * s, r2=0.9 + 0.001 * i)
                for i in range(3) for s in range(2)]

    def test_alignment_csv_round_trip(self, tmp_path):
        records = self._records()
        path = tmp_path / "alignment.csv"
        render_alignment_csv(records, path)
        back = load_alignment_csv(path)
        assert sorted(back, key=lambda r: (r.layer_id, r.seed)) == \
            sorted(records, key=lambda r: (r.layer_id, r.seed))

    def test_alignment_header_frozen(self, tmp_path):
        path = tmp_path / "alignment.csv"
        render_alignment_csv(self._records(), path)
        header = path.read_text().splitlines()[0]
        assert header == ",".join(ALIGNMENT_COLUMNS)
        assert header == ("layer_id,seed,expression,fitness_train,fitness_val,"
                          "mse_val,r2_val,node_count")

    def test_deterministic_bytes(self, tmp_path):
        records = self._records()
        a, b = tmp_path / "a.csv", tmp_path / "b.csv"
        render_alignment_csv(records, a)
        render_alignment_csv(list(reversed(records)), b)
        assert a.read_bytes() == b.read_bytes()

    def test_tradeoff_csv_header(self, tmp_path):
        rows = [TradeoffRow("ln", 18.9, 28.9, 1.0), TradeoffRow("dyt", 90.8, 14.4, 0.7),
                TradeoffRow("gp", 71.7, 14.4, 0.92)]
        path = tmp_path / "tradeoff.csv"
        render_tradeoff_csv(rows, path)
        lines = path.read_text().splitlines()
        assert lines[0] == "method,mflops,read_mb,mean_r2"
        assert len(lines) == 4

    def test_report_json_validates_against_schema(self, tmp_path):
        pairs = load_expression_csv(builtin_expressions_path())
        records = [_record(lid, 0, expression=format_expr(e)) for lid, e in pairs]
        summary = summarize_alignment(records)
        summary.methods["ln"] = MethodAlignment("ln", 1.0)
        summary.methods["dyt"] = MethodAlignment("dyt", 0.702)
        summary.methods["gp"] = MethodAlignment(
            "gp", summary.r2_mean,
            expressions=tuple((lid, format_expr(e)) for lid, e in pairs))
        tradeoff = emit_tradeoff(summary)
        doc = render_report_json(summary, tradeoff, tmp_path / "report.json")
        schema = json.loads(report_schema_path().read_text())
        jsonschema.validate(doc, schema)
        reread = json.loads((tmp_path / "report.json").read_text())
        jsonschema.validate(reread, schema)

    def test_report_json_deterministic(self, tmp_path):
        summary = summarize_alignment(self._records())
        rows = [TradeoffRow("ln", 1.0, 2.0, 1.0)]
        render_report_json(summary, rows, tmp_path / "a.json")
        render_report_json(summary, rows, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_statistics_recomputable_from_emitted_records(self, tmp_path):
        records = self._records()
        path = tmp_path / "alignment.csv"
        render_alignment_csv(records, path)
        summary = summarize_alignment(load_alignment_csv(path))
        fresh = summarize_alignment(records)
        assert math.isclose(summary.mse_mean, fresh.mse_mean, abs_tol=1e-12)
        assert math.isclose(summary.r2_std, fresh.r2_std, abs_tol=1e-12)
