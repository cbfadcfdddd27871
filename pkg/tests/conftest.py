"""
Pytest fixtures for SCD Siamese tests.

Provides test settings, seeded generators, a tiny embedding that trains
in well under a second, and experiment config files in tmp_path.
"""

import json

import numpy as np
import pytest

from app.config import ExperimentConfig, Settings, override_settings
from app.layers import EmbeddingConfig, LayerDesc


@pytest.fixture
def test_settings(tmp_path):
    """Create test settings writing run outputs under tmp_path."""
    settings = Settings(
        log_level="DEBUG",
        output_dir=str(tmp_path / "runs"),
        gradcheck_seeds=2,
        gradcheck_tolerance=1e-4,
        finite_difference_step=1e-5,
    )
    override_settings(settings)
    yield settings
    override_settings(None)


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(1234)


TINY_LAYERS = [
    {"kind": "conv", "kernel": 3, "stride": 1, "in_channels": 3, "out_channels": 4},
    {"kind": "bn", "in_channels": 4, "out_channels": 4},
    {"kind": "relu"},
    {"kind": "conv", "kernel": 3, "stride": 1, "in_channels": 4, "out_channels": 4},
]


@pytest.fixture
def tiny_embedding():
    """Two conv layers, 8x8 exemplar and 12x12 search, 5x5 score map."""
    return EmbeddingConfig(
        name="tiny",
        in_channels=3,
        exemplar_size=8,
        search_size=12,
        layers=tuple(LayerDesc(**layer) for layer in TINY_LAYERS),
        default_scd_layers=(2,),
    )


@pytest.fixture
def tiny_document():
    """Experiment document for the tiny embedding: 2 epochs of 3 steps."""
    return {
        "embedding": {
            "layers": TINY_LAYERS,
            "exemplar_size": 8,
            "search_size": 12,
        },
        "train": {
            "batch_size": 2,
            "epochs": 2,
            "samples_per_epoch": 6,
            "lr_initial": 0.05,
            "lr_final": 0.01,
            "seed": 3,
            "label_radius": 1.0,
            "eval_batch_size": 2,
            "data": {"distractors": 2},
        },
        "scd": {"layers": [2], "epsilon": 0.3, "pair_budget": 4},
        "output": {"metrics_per_epoch": 1},
    }


@pytest.fixture
def tiny_config(tiny_document):
    """Validated ExperimentConfig for the tiny embedding."""
    return ExperimentConfig.model_validate(tiny_document)


@pytest.fixture
def write_config(tmp_path):
    """Write an experiment document to tmp_path and return its path."""

    def _write(document: dict, name: str = "experiment.json") -> str:
        path = tmp_path / name
        path.write_text(json.dumps(document), encoding="utf-8")
        return str(path)

    return _write
