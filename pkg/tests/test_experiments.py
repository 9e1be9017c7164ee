"""
Multi-seed training experiments on the two-task blob split.

These train several runs per mode and are marked slow; run them with
``pytest -m slow``.
"""

import os
import sys

import pytest

# Add parent directory to path
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rekall.models import BackboneConfig, RunConfig, SyntheticBlobsSpec, TrainingMode
from rekall.suite import expand_configs, run_suite

SEEDS = [0, 1, 2]
CHANCE_AFTER_TWO_TASKS = 0.25


@pytest.fixture
def experiment_config(tmp_path):
    return RunConfig(
        dataset="synthetic-blobs",
        synthetic=SyntheticBlobsSpec(
            num_classes=4, train_per_class=120, test_per_class=60, image_size=16, noise=0.15
        ),
        backbone=BackboneConfig(widths=(16, 32, 64), blocks=(1, 1, 1)),
        epochs=10,
        student_lr=1e-3,
        batch_size=32,
        synthetic_batch_size=32,
        freeze_norm_stats=True,
        output_dir=tmp_path / "runs",
    )


def final_rows(result, mode):
    return {r.seed: r.matrix.rows[-1] for r in result.reports if r.mode == mode}


@pytest.mark.slow
class TestForgetting:
    """Sequential fine-tuning forgets task 1; distillation preserves it."""

    def test_full_retains_first_task(self, experiment_config):
        configs = expand_configs(
            experiment_config, [TrainingMode.FINETUNE, TrainingMode.FULL], SEEDS
        )
        result = run_suite(configs)
        assert result.failures == {}

        finetune = final_rows(result, TrainingMode.FINETUNE)
        full = final_rows(result, TrainingMode.FULL)
        near_chance = sum(abs(finetune[s][0] - CHANCE_AFTER_TWO_TASKS) <= 0.10 for s in SEEDS)
        retained = sum(full[s][0] - finetune[s][0] >= 0.15 for s in SEEDS)
        assert near_chance >= 2
        assert retained >= 2


@pytest.mark.slow
class TestAblationOrdering:
    """Both distillation terms together beat either one alone."""

    def test_full_beats_single_terms(self, experiment_config):
        modes = [
            TrainingMode.FINETUNE,
            TrainingMode.FAM_ONLY,
            TrainingMode.COV_ONLY,
            TrainingMode.FULL,
        ]
        result = run_suite(expand_configs(experiment_config, modes, SEEDS))
        assert result.failures == {}

        mean = result.table.xs("synthetic-blobs", level="dataset")["mean"]
        assert mean["full"] > max(mean["fam_only"], mean["cov_only"])
        assert max(mean["fam_only"], mean["cov_only"]) > mean["finetune"]


if __name__ == "__main__":
    pytest.main([__file__, "-v", "-m", "slow"])
