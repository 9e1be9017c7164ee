"""
Unit tests for multi-run suites.
"""

import os
import sys
from unittest.mock import patch

import pandas as pd
import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rekall.evaluation import average_accuracy
from rekall.exceptions import ConfigurationError
from rekall.models import AccuracyMatrix, RunReport, TrainingMode
from rekall.suite import expand_configs, run_suite

FULL_AND_FINETUNE = [TrainingMode.FINETUNE, TrainingMode.FULL]


def fake_report(config, final_row):
    matrix = AccuracyMatrix(num_tasks=2, rows=[[1.0], list(final_row)], counts=[[6], [6, 6]])
    return RunReport(
        dataset=config.dataset,
        mode=config.mode,
        seed=config.seed,
        average_accuracy=average_accuracy(matrix),
        matrix=matrix,
        seeds=[config.seed],
        config=config,
    )


class TestExpandConfigs:
    """Test suite for expand_configs."""

    def test_modes_times_seeds(self, toy_config):
        configs = expand_configs(toy_config(), FULL_AND_FINETUNE, [0, 1, 2])
        assert len(configs) == 6
        assert [(c.mode, c.seed) for c in configs[:3]] == [
            (TrainingMode.FINETUNE, 0),
            (TrainingMode.FINETUNE, 1),
            (TrainingMode.FINETUNE, 2),
        ]
        assert configs[4].run_name == "synthetic-blobs-full-seed1"
        assert len({c.run_dir for c in configs}) == 6

    def test_named_image_folder_export(self, toy_config, tmp_path):
        base = toy_config(
            dataset="image-folder",
            image_folder={"root": tmp_path, "class_dirs": ["ISUP0", "ISUP1"], "name": "picai"},
        )
        configs = expand_configs(base, [TrainingMode.FULL], [0])
        assert configs[0].run_name == "picai-full-seed0"

    def test_other_fields_kept(self, toy_config):
        base = toy_config(epochs=3, kd_weight=0.5)
        for config in expand_configs(base, [TrainingMode.FULL], [7]):
            assert config.epochs == 3
            assert config.kd_weight == 0.5
            assert config.backbone == base.backbone


class TestRunSuite:
    """Test suite for run_suite."""

    def test_empty(self):
        with pytest.raises(ConfigurationError):
            run_suite([])

    def test_configs_must_be_comparable(self, toy_config):
        configs = [toy_config(name="a"), toy_config(name="b", epochs=5)]
        with pytest.raises(ConfigurationError, match="differ only in mode and seed"):
            run_suite(configs)

    def test_distinct_run_names(self, toy_config):
        configs = expand_configs(toy_config(), [TrainingMode.FULL], [0, 0])
        with pytest.raises(ConfigurationError, match="distinct"):
            run_suite(configs)

    def test_several_datasets(self, toy_config):
        configs = expand_configs(toy_config(), [TrainingMode.FULL], [0]) + expand_configs(
            toy_config(dataset="cifar10"), [TrainingMode.FULL], [0]
        )
        with patch("rekall.suite._run_one", side_effect=lambda c: fake_report(c, [0.5, 0.5])):
            result = run_suite(configs)
        assert set(result.table.index) == {("cifar10", "full"), ("synthetic-blobs", "full")}

    def test_failures_do_not_abort(self, toy_config, tmp_path):
        configs = expand_configs(toy_config(), FULL_AND_FINETUNE, [0, 1])

        def run_one(config):
            if config.mode == TrainingMode.FULL and config.seed == 1:
                raise RuntimeError("out of memory")
            return fake_report(config, [0.4, 0.8] if config.mode == TrainingMode.FULL else [0.0, 1.0])

        with patch("rekall.suite._run_one", side_effect=run_one) as mocked:
            result = run_suite(configs, out_dir=tmp_path / "suite")

        assert mocked.call_count == 4
        assert len(result.reports) == 3
        assert result.failures == {"synthetic-blobs-full-seed1": "RuntimeError: out of memory"}
        assert result.table.loc[("synthetic-blobs", "full"), "failed"] == 1
        assert result.table.loc[("synthetic-blobs", "finetune"), "failed"] == 0
        assert result.table.loc[("synthetic-blobs", "full"), "mean"] == pytest.approx(60.0)

        runs = pd.read_csv(tmp_path / "suite" / "runs.csv")
        assert len(runs) == 4
        failed = runs[runs["run"] == "synthetic-blobs-full-seed1"].iloc[0]
        assert failed["error"] == "RuntimeError: out of memory"
        assert (tmp_path / "suite" / "summary.csv").exists()

    def test_all_failed(self, toy_config):
        configs = expand_configs(toy_config(), [TrainingMode.FULL], [0])
        with patch("rekall.suite._run_one", side_effect=ValueError("bad")):
            result = run_suite(configs)
        assert result.reports == []
        assert result.table.loc[("synthetic-blobs", "full"), "failed"] == 1

    def test_single_real_run(self, toy_config):
        configs = expand_configs(toy_config(), [TrainingMode.FINETUNE], [0])
        result = run_suite(configs)
        assert result.failures == {}
        assert len(result.table) == 1
        assert 0.0 <= result.table.iloc[0]["mean"] <= 100.0
        assert (configs[0].run_dir / "report" / "results.json").exists()


if __name__ == "__main__":
    pytest.main([__file__, "-v"])
