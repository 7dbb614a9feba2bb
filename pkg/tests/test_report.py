import json
import math

import numpy as np
import pytest

from core import report as rp
from core.errors import DataError
from core.metrics import MetricRow
from core.trainer import LossRecord
from core.volume import ConcentrationImage


def _rows():
    rows = []
    for method, base in (("smrnet-8x", 0.1), ("cs-8x", 0.2)):
        for phantom, bump in (("shape", 0.0), ("resolution", 0.02)):
            subject = rp.subject_id(method, phantom)
            rows += [MetricRow(subject, "nrmse", base + bump), MetricRow(subject, "ssim", 0.9 - bump),
                     MetricRow(subject, "psnr", 30.0 + bump)]
    rows.append(MetricRow("smrnet", "mean_component_nrmse", 0.05))
    return rows


def test_csv_roundtrip_parses_numbers(tmp_path):
    path = rp.write_csv(tmp_path / "t.csv", [{"k": 0, "nrmse": 0.125, "label": "a"},
                                             {"k": "mean", "nrmse": math.inf, "label": "b"}])
    rows = rp.read_csv(path)
    assert rows[0] == {"k": 0, "nrmse": 0.125, "label": "a"}
    assert rows[1]["k"] == "mean" and rows[1]["nrmse"] == math.inf


def test_read_csv_missing(tmp_path):
    with pytest.raises(DataError):
        rp.read_csv(tmp_path / "absent.csv")


def test_metrics_csv_roundtrip(tmp_path):
    rows = _rows()
    back = rp.read_metrics_csv(rp.write_metrics_csv(tmp_path / "metrics.csv", rows))
    assert back == rows


def test_read_metrics_csv_rejects_other_tables(tmp_path):
    path = rp.write_csv(tmp_path / "t.csv", [{"a": 1}])
    with pytest.raises(DataError):
        rp.read_metrics_csv(path)


def test_loss_curve_columns(tmp_path):
    path = rp.write_loss_curve(tmp_path / "loss.csv", [LossRecord(1, 0.5), LossRecord(2, 0.25, 0.3, 0.1)])
    rows = rp.read_csv(path)
    assert list(rows[0]) == ["iteration", "train_mse", "val_mse", "val_nrmse"]
    assert math.isnan(rows[0]["val_mse"]) and rows[1]["val_nrmse"] == 0.1


def test_summary_nesting_and_average():
    table = rp.summary_table(_rows())
    assert set(table) == {"smrnet-8x", "cs-8x"}
    assert table["smrnet-8x"]["shape"]["nrmse"] == pytest.approx(0.1)
    assert table["cs-8x"]["average"]["nrmse"] == pytest.approx(0.21)
    assert table["smrnet-8x"]["average"]["ssim"] == pytest.approx(0.89)


def test_write_summary(tmp_path):
    json_path, csv_path = rp.write_summary(tmp_path / "report", _rows())
    doc = json.loads(json_path.read_text(encoding="utf-8"))
    assert doc["cs-8x"]["resolution"]["psnr"] == pytest.approx(30.02)
    rows = rp.read_csv(csv_path)
    assert {r["method"] for r in rows} == {"smrnet-8x", "cs-8x"}
    assert "average_nrmse" in rows[0] and "shape_ssim" in rows[0]


def test_summary_average_with_infinite_psnr():
    rows = [MetricRow("true:shape", "psnr", math.inf), MetricRow("true:resolution", "psnr", 20.0)]
    assert rp.summary_table(rows)["true"]["average"]["psnr"] == math.inf


def test_plots_are_written(tmp_path):
    reports = {"smrnet": [{"k": 0, "snr": 5.0, "nrmse": 0.1}, {"k": 1, "snr": math.inf, "nrmse": 0.05},
                          {"k": "mean", "snr": math.nan, "nrmse": 0.075}]}
    scatter = rp.snr_scatter_png(tmp_path / "scatter.png", reports)
    assert scatter.stat().st_size > 0
    images = {"true": ConcentrationImage(np.ones((4, 4, 4))), "cs": ConcentrationImage(np.zeros((4, 4, 4)))}
    panel = rp.image_slice_png(tmp_path / "slices.png", images, z=19)
    assert panel.stat().st_size > 0
    with pytest.raises(DataError):
        rp.image_slice_png(tmp_path / "none.png", {})


def test_timing_ratio():
    assert rp.timing_ratio(42.0, 1.0)["cs_over_net"] == 42.0
    assert rp.timing_ratio(1.0, 0.0)["cs_over_net"] == math.inf


def _components(values):
    rows = [{"k": k, "snr": 5.0, "nrmse": v} for k, v in enumerate(values)]
    return rows + [{"k": "mean", "snr": math.nan, "nrmse": float(np.mean(values))}]


def test_comparison_rows():
    reports = {"smrnet": _components([0.1, 0.2, 0.3, 0.1]), "trilinear": _components([0.2, 0.1, 0.4, 0.3]),
               "cs": _components([0.1, 0.1]), "zero-filled": _components([0.4, 0.4])}
    rows = {r.metric: r for r in rp.comparison_rows(reports)}
    assert rows["share_beats_trilinear"] == MetricRow("smrnet", "share_beats_trilinear", 0.75)
    assert rows["nrmse_over_zero_filled"].subject == "cs"
    assert rows["nrmse_over_zero_filled"].value == pytest.approx(0.25)
    assert rp.comparison_rows({"smrnet": _components([0.1])}) == []
    with pytest.raises(DataError):
        rp.comparison_rows({"smrnet": _components([0.1]), "trilinear": _components([0.1, 0.2])})


def test_safe_ratio():
    assert rp.safe_ratio(1.0, 4.0) == 0.25
    assert rp.safe_ratio(0.0, 0.0) == 1.0
    assert rp.safe_ratio(0.5, 0.0) == math.inf


def test_acceptance_limits(tmp_path):
    rows = _rows() + [MetricRow("smrnet", "share_beats_trilinear", 0.8),
                      MetricRow("cs", "nrmse_over_zero_filled", 0.6),
                      MetricRow("smrnet-8x:shape", "phantom_nrmse_ratio", 1.2)]
    summary = rp.acceptance_summary(rows)
    assert set(summary) == {"share_beats_trilinear", "nrmse_over_zero_filled", "phantom_nrmse_ratio"}
    assert summary["share_beats_trilinear"]["smrnet"]["passed"]
    assert not summary["nrmse_over_zero_filled"]["cs"]["passed"]
    assert summary["phantom_nrmse_ratio"]["smrnet-8x:shape"] == {"value": 1.2, "limit": 1.5, "passed": True}
    doc = json.loads(rp.write_acceptance(tmp_path / "report" / "acceptance.json", rows).read_text(encoding="utf-8"))
    assert doc == summary
