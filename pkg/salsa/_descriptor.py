# coding: utf-8
"""Scene descriptor head: adaptive pooling, token fuser and MLP mixer."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "AggregatorConfig",
    "AggregatorParams",
    "TokenSet",
    "AttentionMap",
    "SceneDescriptor",
    "DescriptorOutput",
    "SalsaModel",
    "adaptive_pool",
    "token_fuser",
    "mixer",
    "describe",
    "scene_descriptor",
    "select_salient_points",
    "count_parameters",
]

import collections
import dataclasses
import logging
import math

import numpy as np

from ._backbone import (BackboneConfig, BackboneParams, LocalDescriptorSet,
                        linear_params, voxel_features)
from ._numeric import (Parameter, add, as_tensor, gather_rows, l2_normalize_rows,
                       layer_norm, matmul, mlp2, reshape, scale, softmax_rows,
                       transpose)
from .errors import ConfigError, ShapeError


log = logging.getLogger(__name__)


@dataclasses.dataclass
class AggregatorConfig(object):
    """Pooling, fuser and mixer sizes."""

    tokens: int = 512
    fuser_blocks: int = 4
    fuser_ratio: int = 4
    use_fuser: bool = True
    mixer_tokens: int = 128
    mixer_channels: int = 4
    layer_norm_eps: float = 1e-5

    def validate(self):
        """Raise :class:`ConfigError` for inconsistent settings."""
        # type: () -> None

        if min(self.tokens, self.mixer_tokens, self.mixer_channels,
               self.fuser_ratio) < 1 or self.fuser_blocks < 0:
            raise ConfigError("aggregator sizes must be positive")

    @property
    def output_dim(self):
        """Return the flattened mixer output length."""
        # type: () -> int

        return self.mixer_tokens * self.mixer_channels


class AggregatorParams(object):
    """
    Trainable weights of the descriptor head.

    :param Parameter q_theta: k x d pooling queries.
    :param list fuser: Per block ``(gain, bias, w1, b1, w2, b2)``.
    :param tuple token_mix: ``(w1, b1, w2, b2)`` mapping k -> k_bar.
    :param tuple channel_mix: ``(w1, b1, w2, b2)`` mapping d -> d_bar.
    """

    def __init__(self, q_theta, fuser, token_mix, channel_mix):
        """Store the head parameters."""
        # type: (Parameter, list, tuple, tuple) -> None

        self.q_theta = q_theta
        self.fuser = fuser
        self.token_mix = token_mix
        self.channel_mix = channel_mix

    @classmethod
    def create(cls, cfg, channels, rng):
        """
        Randomly initialize weights.

        :param AggregatorConfig cfg: Head sizes.
        :param int channels: Local descriptor width d.
        :param rng: ``numpy.random.Generator``.
        """
        # type: (AggregatorConfig, int, np.random.Generator) -> AggregatorParams  # noqa: E501

        cfg.validate()
        d = channels
        q_theta = Parameter(rng.normal(0.0, 1.0, size=(cfg.tokens, d)),
                            "aggregator.q_theta")
        fuser = []
        for i in range(cfg.fuser_blocks):
            prefix = "aggregator.fuser.{}".format(i)
            gain = Parameter(np.ones((1, d)), prefix + ".norm.gain")
            bias = Parameter(np.zeros((1, d)), prefix + ".norm.bias")
            w1, b1 = linear_params(rng, prefix + ".fc1", d, cfg.fuser_ratio * d)
            w2, b2 = linear_params(rng, prefix + ".fc2", cfg.fuser_ratio * d,
                                   d, gain=0.5)
            fuser.append((gain, bias, w1, b1, w2, b2))
        kb, db = cfg.mixer_tokens, cfg.mixer_channels
        token_mix = (linear_params(rng, "aggregator.token_mix.fc1",
                                   cfg.tokens, kb)
                     + linear_params(rng, "aggregator.token_mix.fc2", kb, kb))
        channel_mix = (linear_params(rng, "aggregator.channel_mix.fc1", d, db)
                       + linear_params(rng, "aggregator.channel_mix.fc2",
                                       db, db))
        return cls(q_theta, fuser, token_mix, channel_mix)

    def parameters(self):
        """Return the parameters in a fixed order."""
        # type: () -> list

        params = [self.q_theta]
        for block in self.fuser:
            params.extend(block)
        params.extend(self.token_mix)
        params.extend(self.channel_mix)
        return params


TokenSet = collections.namedtuple("TokenSet", "tokens")


class AttentionMap(object):
    """
    Pooling attention weights, k x rows.

    When pooling ran over voxels with multiplicities, `scores` hold the
    total weight of every voxel and :meth:`point_scores` spreads it evenly
    over the member points.
    """

    def __init__(self, scores, counts=None):
        """Store the score matrix and optional row multiplicities."""
        # type: (np.ndarray, np.ndarray) -> None

        self.scores = scores
        self.counts = counts

    def __repr__(self):
        """Return the map dimensions."""
        # type: () -> str

        return "<attentionmap {}x{}>".format(*self.scores.shape)

    def point_scores(self, inverse=None):
        """
        Return the k x N per-point scores; rows sum to 1.

        :param np.ndarray inverse: Voxel index of every point, required when
                                   the map was built with counts.
        """
        # type: (np.ndarray) -> np.ndarray

        if self.counts is None:
            return self.scores
        return (self.scores / self.counts[None, :])[:, inverse]


@dataclasses.dataclass
class SceneDescriptor(object):
    """Global descriptor of a cloud."""

    values: np.ndarray
    normalized: bool = True

    def __len__(self):
        return self.values.shape[0]


DescriptorOutput = collections.namedtuple(
    "DescriptorOutput", "descriptor local attention grid")


def adaptive_pool(k_feat, q_theta, counts=None):
    """
    Pool a variable number of features into k tokens.

    ``A = softmax(Q K^T / sqrt(d))`` over the keys of every query row and
    ``F = A K``. With `counts`, row i stands for ``counts[i]`` identical
    rows, which adds ``log(counts[i])`` to its logits.

    :param Tensor k_feat: N x d keys/values, N >= 1.
    :param Tensor q_theta: k x d queries.
    :param np.ndarray counts: Optional positive multiplicity per row.
    :return: ``(TokenSet, AttentionMap)``.
    """
    # type: (Tensor, Tensor, np.ndarray) -> tuple

    k_feat, q_theta = as_tensor(k_feat), as_tensor(q_theta)
    if k_feat.shape[0] < 1:
        raise ShapeError("adaptive pooling needs at least one feature")
    if k_feat.shape[1] != q_theta.shape[1]:
        raise ShapeError("features of width {} for queries of width {}"
                         .format(k_feat.shape[1], q_theta.shape[1]))
    logits = scale(matmul(q_theta, transpose(k_feat)),
                   1.0 / math.sqrt(k_feat.shape[1]))
    if counts is not None:
        counts = np.asarray(counts, dtype=np.float64).reshape(-1)
        logits = add(logits, np.log(counts)[None, :])
    scores = softmax_rows(logits)
    tokens = matmul(scores, k_feat)
    return TokenSet(tokens), AttentionMap(scores.data, counts)


def token_fuser(f, params, eps=1e-5):
    """
    Residual stack ``H <- H + MLP2(LayerNorm(H))`` over the token rows.

    :param TokenSet f: k x d tokens (a bare tensor is accepted too).
    :param AggregatorParams params: Head weights; uses ``params.fuser``.
    :param float eps: Layer-norm variance floor.
    """
    # type: (TokenSet, AggregatorParams, float) -> Tensor

    h = as_tensor(f.tokens if isinstance(f, TokenSet) else f)
    for gain, bias, w1, b1, w2, b2 in params.fuser:
        h = add(h, mlp2(layer_norm(h, gain, bias, eps), w1, b1, w2, b2))
    return h


def mixer(h, params):
    """
    Map k x d fused tokens to a flat k_bar * d_bar vector.

    The first MLP maps the token axis k -> k_bar for every channel column,
    the second maps the channel axis d -> d_bar for every token row.

    :param Tensor h: k x d tokens.
    :param AggregatorParams params: Head weights.
    :return: 1 x (k_bar * d_bar) tensor, row-major flattened.
    """
    # type: (Tensor, AggregatorParams) -> Tensor

    h = as_tensor(h)
    tokens = transpose(mlp2(transpose(h), *params.token_mix))
    mixed = mlp2(tokens, *params.channel_mix)
    return reshape(mixed, 1, mixed.shape[0] * mixed.shape[1])


class SalsaModel(object):
    """
    Backbone and descriptor head with their configurations.

    :param BackboneConfig backbone_cfg: Backbone hyper-parameters.
    :param AggregatorConfig aggregator_cfg: Head hyper-parameters.
    :param int seed: Seed of the weight initialization.
    """

    def __init__(self, backbone_cfg=None, aggregator_cfg=None, seed=0):
        """Create a randomly initialized model."""
        # type: (BackboneConfig, AggregatorConfig, int) -> None

        self.backbone_cfg = backbone_cfg or BackboneConfig()
        self.aggregator_cfg = aggregator_cfg or AggregatorConfig()
        rng = np.random.default_rng(seed)
        self.backbone = BackboneParams.create(self.backbone_cfg, rng)
        self.aggregator = AggregatorParams.create(
            self.aggregator_cfg, self.backbone_cfg.channels, rng)

    def __repr__(self):
        """Return a short description of the model."""
        # type: () -> str

        return "<salsamodel {} parameters>".format(count_parameters(self))

    def parameters(self):
        """Return every trainable parameter in a fixed order."""
        # type: () -> list

        return self.backbone.parameters() + self.aggregator.parameters()

    def named_parameters(self):
        """Return an ordered mapping name -> parameter."""
        # type: () -> collections.OrderedDict

        return collections.OrderedDict((p.name, p) for p in self.parameters())

    def zero_grad(self):
        """Reset every parameter gradient."""
        # type: () -> None

        for p in self.parameters():
            p.zero_grad()


def count_parameters(model):
    """Return the number of trainable scalars of `model`."""
    # type: (SalsaModel) -> int

    return int(sum(p.data.size for p in model.parameters()))


def describe(c, model):
    """
    Differentiable forward pass of one cloud.

    :param PointCloud c: Input cloud.
    :param SalsaModel model: The model.
    :return: :class:`DescriptorOutput` whose ``descriptor`` is the 1 x e
             L2-normalized (unwhitened) tensor and ``local`` the per-point
             :class:`LocalDescriptorSet`.
    """
    # type: (PointCloud, SalsaModel) -> DescriptorOutput

    features, grid = voxel_features(c, model.backbone_cfg, model.backbone)
    points = gather_rows(features, grid.inverse)
    local = LocalDescriptorSet(points.data, c.points, points)
    tokens, attention = adaptive_pool(features, model.aggregator.q_theta,
                                      counts=grid.counts)
    h = tokens.tokens
    if model.aggregator_cfg.use_fuser:
        h = token_fuser(tokens, model.aggregator,
                        model.aggregator_cfg.layer_norm_eps)
    flat = mixer(h, model.aggregator)
    return DescriptorOutput(l2_normalize_rows(flat), local, attention, grid)


def scene_descriptor(c, model, whitener=None):
    """
    Unit-norm global descriptor of a cloud.

    The mixer output is L2-normalized, whitened when `whitener` is given and
    normalized again.

    :param PointCloud c: Input cloud.
    :param SalsaModel model: The model.
    :param PCAWhitener whitener: Optional fitted whitener.
    """
    # type: (PointCloud, SalsaModel, PCAWhitener) -> SceneDescriptor

    values = describe(c, model).descriptor.data.reshape(-1)
    if whitener is not None:
        values = whitener.transform(values)
        values = values / max(np.linalg.norm(values), 1e-12)
    return SceneDescriptor(values, True)


def select_salient_points(local, attention, n, inverse=None):
    """
    Keep the `n` points carrying the most pooling attention.

    :param LocalDescriptorSet local: Per-point descriptors.
    :param AttentionMap attention: Pooling attention of the same cloud.
    :param int n: Number of points kept (all when the cloud is smaller).
    :param np.ndarray inverse: Voxel index per point for voxel-level maps.
    """
    # type: (LocalDescriptorSet, AttentionMap, int, np.ndarray) -> LocalDescriptorSet  # noqa: E501

    if n <= 0 or n >= len(local):
        return local
    mass = attention.point_scores(inverse).sum(axis=0)
    keep = np.sort(np.argsort(-mass, kind="stable")[:n])
    return local.subset(keep)
