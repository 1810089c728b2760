from newsfuse.evaluation import MetricsReport, compare_report
from newsfuse.report import (
    read_report_csv,
    render_table,
    write_figures,
    write_report_csv,
)


def sample_reports():
    return [
        MetricsReport("SKNN (Global)", {10: 0.1, 20: 0.2, 50: 0.4}, 0.31, 500, "fp"),
        MetricsReport("SASRec (Global)", {10: 0.2, 20: 0.3, 50: 0.6}, 0.42, 500, "fp"),
        MetricsReport("SASRec + NN Fusion", {10: 0.3, 20: 0.45, 50: 0.7}, 0.5, 500, "fp"),
    ]


class TestCsvRoundTrip:
    def test_write_then_read(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(sample_reports(), path)
        again = read_report_csv(path)
        assert [r.model_name for r in again] == [r.model_name for r in sample_reports()]
        assert again[1].hit_rate[20] == 0.3
        assert again[2].coverage == 0.5

    def test_header_shape(self, tmp_path):
        path = tmp_path / "report.csv"
        write_report_csv(sample_reports(), path)
        first = path.read_text(encoding="utf-8").splitlines()[0]
        assert first == "model,K,HR,coverage,n_events"


class TestTable:
    def test_best_values_bolded(self):
        table = compare_report(sample_reports())
        text = render_table(table)
        assert "**0.300**" in text
        assert "**0.450**" in text
        assert "**0.700**" in text
        assert "**0.100**" not in text

    def test_all_models_listed(self):
        text = render_table(compare_report(sample_reports()))
        for r in sample_reports():
            assert r.model_name in text

    def test_columns_per_cutoff(self):
        text = render_table(compare_report(sample_reports()))
        header = text.splitlines()[0]
        for k in (10, 20, 50):
            assert f"HR@{k}" in header
        assert "Coverage" in header


class TestFigures:
    def test_pngs_written(self, tmp_path):
        paths = write_figures(sample_reports(), tmp_path)
        assert len(paths) == 2
        for p in paths:
            assert p.exists() and p.stat().st_size > 0
            assert p.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"

    def test_empty_reports_noop(self, tmp_path):
        assert write_figures([], tmp_path) == []
