"""Figure rendering smoke tests: files appear, bad inputs are rejected."""

import numpy as np
import pytest

from moclip import ConfigurationError
from moclip.figures import (
    plot_auc_bars,
    plot_comparison_bars,
    plot_roc_curves,
    plot_training_curves,
    read_metrics_log,
)

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def epoch_record(epoch, loss, auc=None):
    record = {"kind": "epoch", "epoch": epoch, "global_step": 8 * (epoch + 1),
              "train_loss": loss,
              "loss_terms": {"contrastive": loss * 0.6, "image_queue": loss * 0.4,
                             "image_consistency": 0.0, "text_consistency": 0.0,
                             "text_queue": 0.0}}
    if auc is not None:
        record["val_macro_auc"] = auc
        record["val_macro_auc_diseases"] = auc
    return record


def step_record(step, epoch, loss):
    return {"kind": "step", "step": step, "epoch": epoch,
            "loss_terms": {"total": loss, "contrastive": loss, "image_queue": 0.0,
                           "image_consistency": 0.0, "text_consistency": 0.0,
                           "text_queue": 0.0},
            "lr": 1e-4, "queue_fill": min(16 * step, 64)}


class TestReadMetricsLog:
    def test_parses_records_and_skips_blank_lines(self, tmp_path):
        path = tmp_path / "metrics.log"
        path.write_text('{"kind": "step", "step": 1}\n\n{"kind": "epoch"}\n')
        records = read_metrics_log(path)
        assert [r["kind"] for r in records] == ["step", "epoch"]

    def test_bad_line_reported_with_number(self, tmp_path):
        path = tmp_path / "metrics.log"
        path.write_text('{"kind": "step"}\nnot json\n')
        with pytest.raises(ConfigurationError, match="line 2"):
            read_metrics_log(path)


class TestTrainingCurves:
    def test_epoch_records_render(self, tmp_path):
        history = [epoch_record(e, 3.0 - 0.2 * e, 0.6 + 0.05 * e)
                   for e in range(5)]
        out = plot_training_curves(history, tmp_path / "curves.png")
        assert out.read_bytes()[:8] == PNG_MAGIC

    def test_mixed_log_with_step_trace(self, tmp_path):
        records = [step_record(s + 1, s // 4, 3.0 - 0.05 * s)
                   for s in range(8)]
        records += [epoch_record(0, 2.9, 0.6), epoch_record(1, 2.7, 0.7)]
        out = plot_training_curves(records, tmp_path / "curves.png")
        assert out.exists()

    def test_steps_only_log_renders(self, tmp_path):
        records = [step_record(s + 1, 0, 3.0) for s in range(4)]
        out = plot_training_curves(records, tmp_path / "steps.png")
        assert out.exists()

    def test_no_validation_axis_needed(self, tmp_path):
        history = [epoch_record(0, 3.0), epoch_record(1, 2.5)]
        assert plot_training_curves(history, tmp_path / "noval.png").exists()

    def test_empty_history_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError, match="empty"):
            plot_training_curves([], tmp_path / "never.png")


class TestBarAndCurvePlots:
    def test_auc_bars(self, tmp_path):
        out = plot_auc_bars({"Edema": 0.9, "Effusion": 0.7},
                            tmp_path / "bars.png")
        assert out.read_bytes()[:8] == PNG_MAGIC

    def test_auc_bars_empty_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            plot_auc_bars({}, tmp_path / "bars.png")

    def test_comparison_bars(self, tmp_path):
        tables = {"ours": {"Edema": 0.9, "Mass": 0.8},
                  "ref": {"Edema": 0.85, "Mass": 0.82}}
        assert plot_comparison_bars(tables, tmp_path / "cmp.png").exists()

    def test_comparison_requires_matching_rows(self, tmp_path):
        with pytest.raises(ConfigurationError, match="different"):
            plot_comparison_bars({"a": {"Edema": 0.9}, "b": {"Mass": 0.8}},
                                 tmp_path / "cmp.png")

    def test_roc_curves(self, tmp_path):
        fpr = np.array([0.0, 0.3, 1.0])
        tpr = np.array([0.0, 0.8, 1.0])
        out = plot_roc_curves({"Edema": (fpr, tpr)}, tmp_path / "roc.png")
        assert out.read_bytes()[:8] == PNG_MAGIC

    def test_roc_curves_empty_rejected(self, tmp_path):
        with pytest.raises(ConfigurationError):
            plot_roc_curves({}, tmp_path / "roc.png")
