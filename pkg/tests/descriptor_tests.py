# coding: utf-8
"""Adaptive pooling, token fuser, mixer and scene descriptor tests."""

from __future__ import absolute_import
from __future__ import unicode_literals

import numpy as np
import pytest

from salsa import (AggregatorConfig, PointCloud, SalsaModel, adaptive_pool,
                   count_parameters, describe, finite_diff_check, mixer,
                   scene_descriptor, select_salient_points, token_fuser)
from salsa._descriptor import AggregatorParams, TokenSet
from salsa._numeric import Parameter, Tensor, fit_pca_whitener, sum_all
from salsa.errors import ConfigError, ShapeError

from .conftest import tiny_aggregator


def test_aggregator_config():
    """Published sizes give a 512-dimensional mixer output."""
    assert AggregatorConfig().output_dim == 512
    with pytest.raises(ConfigError):
        AggregatorConfig(tokens=0).validate()


def test_adaptive_pool_attention_is_distribution(rng):
    """Every pooling query distributes unit weight over the features."""
    tokens, attention = adaptive_pool(rng.normal(size=(30, 4)),
                                      rng.normal(size=(6, 4)))
    assert tokens.tokens.shape == (6, 4)
    np.testing.assert_allclose(attention.scores.sum(axis=1), 1.0)


def test_adaptive_pool_counts_equal_duplicates(rng):
    """A feature with count two pools like two identical rows."""
    features = rng.normal(size=(4, 3))
    queries = rng.normal(size=(5, 3))
    duplicated = np.vstack([features, features[:1]])
    expected, _ = adaptive_pool(duplicated, queries)
    pooled, attention = adaptive_pool(features, queries,
                                      counts=np.array([2, 1, 1, 1]))
    np.testing.assert_allclose(pooled.tokens.data, expected.tokens.data,
                               atol=1e-12)
    scores = attention.point_scores(np.array([0, 0, 1, 2, 3]))
    np.testing.assert_allclose(scores.sum(axis=1), 1.0)
    np.testing.assert_allclose(scores[:, 0], scores[:, 1])


def test_adaptive_pool_width_mismatch(rng):
    """Queries and features must have the same width."""
    with pytest.raises(ShapeError):
        adaptive_pool(rng.normal(size=(3, 4)), rng.normal(size=(2, 5)))


def test_token_fuser_identity_with_zero_output_layer(rng):
    """Blocks with zero output weights leave the tokens unchanged."""
    cfg = tiny_aggregator()
    params = AggregatorParams.create(cfg, 8, rng)
    for block in params.fuser:
        block[4].data[...] = 0.0
        block[5].data[...] = 0.0
    tokens = Tensor(rng.normal(size=(cfg.tokens, 8)))
    out = token_fuser(TokenSet(tokens), params)
    np.testing.assert_array_equal(out.data, tokens.data)


def test_mixer_output_shape(rng):
    """The mixer flattens k_bar x d_bar values."""
    cfg = tiny_aggregator()
    params = AggregatorParams.create(cfg, 8, rng)
    out = mixer(rng.normal(size=(cfg.tokens, 8)), params)
    assert out.shape == (1, cfg.output_dim)


def test_describe_unit_norm(cloud, model):
    """The scene descriptor is L2-normalized."""
    out = describe(cloud, model)
    assert out.descriptor.shape == (1, model.aggregator_cfg.output_dim)
    assert np.linalg.norm(out.descriptor.data) == pytest.approx(1.0)
    assert len(out.local) == len(cloud)


def test_scene_descriptor_order_invariant(cloud, model, rng):
    """Shuffling the points does not change the descriptor."""
    a = scene_descriptor(cloud, model)
    b = scene_descriptor(cloud.subset(rng.permutation(len(cloud))), model)
    np.testing.assert_allclose(a.values, b.values, atol=1e-9)
    assert a.normalized and len(a) == model.aggregator_cfg.output_dim


def test_scene_descriptor_whitened(model, rng):
    """Whitened descriptors have the whitener output length and unit norm."""
    clouds = [PointCloud(rng.uniform(-4, 4, size=(60, 3)))
              for _ in range(10)]
    raw = np.stack([scene_descriptor(c, model).values for c in clouds])
    whitener = fit_pca_whitener(raw, 4)
    values = scene_descriptor(clouds[0], model, whitener).values
    assert values.shape == (4,)
    assert np.linalg.norm(values) == pytest.approx(1.0)


def test_parameters_are_named_uniquely(model):
    """Parameter names are unique and counted once."""
    names = model.named_parameters()
    assert len(names) == len(model.parameters())
    assert "aggregator.q_theta" in names
    assert count_parameters(model) == sum(p.data.size
                                          for p in names.values())


def test_same_seed_same_model():
    """Initialization depends only on the configuration and the seed."""
    a = SalsaModel(seed=3)
    b = SalsaModel(seed=3)
    for p, q in zip(a.parameters(), b.parameters()):
        np.testing.assert_array_equal(p.data, q.data)


def test_select_salient_points(cloud, model):
    """Keypoint selection keeps the requested number of points."""
    out = describe(cloud, model)
    kept = select_salient_points(out.local, out.attention, 50,
                                 out.grid.inverse)
    assert len(kept) == 50
    assert kept.tensor.shape == (50, model.backbone_cfg.channels)
    assert select_salient_points(out.local, out.attention, 0,
                                 out.grid.inverse) is out.local


def test_descriptor_gradient(cloud, model, rng):
    """End-to-end descriptor gradients match central differences."""
    direction = Tensor(rng.normal(size=(1, model.aggregator_cfg.output_dim)))
    small = cloud.subset(np.arange(60))

    def loss():
        return sum_all(describe(small, model).descriptor * direction)

    error = finite_diff_check(loss, model.parameters(), eps=1e-5,
                              num_samples=50, rng=rng)
    assert error <= 1e-4


def test_adaptive_pool_gradient(rng):
    """Pooling gradients reach both the features and the queries."""
    features = Parameter(rng.normal(size=(20, 4)), "features")
    queries = Parameter(rng.normal(size=(6, 4)), "queries")
    counts = rng.integers(1, 4, size=20)
    direction = Tensor(rng.normal(size=(6, 4)))

    def loss():
        tokens, _ = adaptive_pool(features, queries, counts)
        return sum_all(tokens.tokens * direction)

    error = finite_diff_check(loss, [features, queries], eps=1e-5,
                              num_samples=60, rng=rng)
    assert error <= 1e-4


def test_token_fuser_gradient(rng):
    """Fuser gradients match central differences."""
    cfg = tiny_aggregator()
    params = AggregatorParams.create(cfg, 8, rng)
    tokens = Parameter(rng.normal(size=(cfg.tokens, 8)), "tokens")
    direction = Tensor(rng.normal(size=(cfg.tokens, 8)))
    weights = [tokens] + [p for block in params.fuser for p in block]

    def loss():
        return sum_all(token_fuser(TokenSet(tokens), params) * direction)

    error = finite_diff_check(loss, weights, eps=1e-5, num_samples=60,
                              rng=rng)
    assert error <= 1e-4


def test_mixer_gradient(rng):
    """Token and channel mixing gradients match central differences."""
    cfg = tiny_aggregator()
    params = AggregatorParams.create(cfg, 8, rng)
    h = Parameter(rng.normal(size=(cfg.tokens, 8)), "h")
    direction = Tensor(rng.normal(size=(1, cfg.output_dim)))
    weights = [h] + list(params.token_mix) + list(params.channel_mix)

    def loss():
        return sum_all(mixer(h, params) * direction)

    error = finite_diff_check(loss, weights, eps=1e-5, num_samples=60,
                              rng=rng)
    assert error <= 1e-4


@pytest.mark.slow
def test_descriptor_permutation_drift(model, rng):
    """Point order moves no descriptor entry by 1e-6 or more."""
    worst = 0.0
    for _ in range(50):
        c = PointCloud(rng.uniform(-6.0, 6.0, size=(80, 3)),
                       rng.uniform(0.0, 1.0, size=80))
        reference = scene_descriptor(c, model).values
        for _ in range(5):
            shuffled = c.subset(rng.permutation(len(c)))
            drift = np.abs(scene_descriptor(shuffled, model).values
                           - reference).max()
            worst = max(worst, drift)
    assert worst < 1e-6
