"""
Shared fixtures: a desk-scale run on procedural blob images.
"""

import os
import sys

import pytest

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from rekall.models import BackboneConfig, RunConfig, SyntheticBlobsSpec, TrainingMode
from rekall.task_stream import build_task_stream

TOY_BLOBS = SyntheticBlobsSpec(num_classes=4, train_per_class=12, test_per_class=6, image_size=8)
TOY_LAYOUT = BackboneConfig(widths=(8, 16), blocks=(1, 1))


@pytest.fixture
def toy_config(tmp_path):
    """
    Factory for small two-task configurations writing under ``tmp_path``.

    Two epochs per task, 2 generator and 5 student steps per epoch, 4 synthetic
    per 8 real images.
    """

    def make(**overrides) -> RunConfig:
        values = {
            "dataset": "synthetic-blobs",
            "synthetic": TOY_BLOBS,
            "backbone": TOY_LAYOUT,
            "epochs": 2,
            "batch_size": 8,
            "synthetic_batch_size": 4,
            "generator_steps": 2,
            "student_steps": 5,
            "student_lr": 1e-3,
            "eval_batch_size": 16,
            "mode": TrainingMode.FULL,
            "output_dir": tmp_path / "runs",
        }
        values.update(overrides)
        return RunConfig(**values)

    return make


@pytest.fixture
def toy_stream():
    """Tasks [[0, 1], [2, 3]] of the toy blob dataset."""
    return build_task_stream("synthetic-blobs", synthetic=TOY_BLOBS)
