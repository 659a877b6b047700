# coding: utf-8
"""Shared fixtures: small models and in-memory datasets."""

from __future__ import absolute_import
from __future__ import unicode_literals

import numpy as np
import pytest
from fs.memoryfs import MemoryFS

from salsa import (AggregatorConfig, BackboneConfig, PointCloud, RunConfig,
                   SalsaModel, generate_synthetic)


def tiny_backbone():
    """Backbone small enough for finite differences."""
    return BackboneConfig(channels=8, num_blocks=1, num_heads=2,
                          voxel_size=0.5, cubic_window=1.0)


def tiny_aggregator():
    """Aggregator with an 8-dimensional output."""
    return AggregatorConfig(tokens=8, fuser_blocks=1, fuser_ratio=2,
                            mixer_tokens=4, mixer_channels=2)


def tiny_run_config():
    """Run configuration used by the pipeline tests."""
    config = RunConfig(backbone=tiny_backbone(), aggregator=tiny_aggregator())
    config.training.epochs = 1
    config.localization.rerank_depth = 5
    config.retrieval.top_k = 5
    config.whitening.dim = 8
    config.threads = 1
    return config


@pytest.fixture
def rng():
    """Seeded generator."""
    return np.random.default_rng(1234)


@pytest.fixture
def model():
    """Randomly initialized small model."""
    return SalsaModel(tiny_backbone(), tiny_aggregator(), seed=7)


@pytest.fixture
def cloud(rng):
    """A 200 point cloud spread over a few meters."""
    points = rng.uniform(-4.0, 4.0, size=(200, 3))
    return PointCloud(points, rng.uniform(0.0, 1.0, 200))


@pytest.fixture
def synthetic():
    """Three places with two 96 point scans each."""
    return generate_synthetic(num_scenes=3, points_per_scene=96, seed=3,
                              extent=8.0)


@pytest.fixture
def mem_fs():
    """Empty in-memory filesystem."""
    with MemoryFS() as filesystem:
        yield filesystem
