# coding: utf-8
"""Local descriptor extraction with radial and cubic window attention.

A cloud is voxelized, every voxel is embedded from its geometry, and a stack
of blocks refines the voxel features. Each block applies a residual MLP and
then multi-head self-attention in which half of the heads attend within
radial windows (shared spherical angle bin) and half within cubic windows.
Voxel features are finally scattered back to the member points.
"""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "BackboneConfig",
    "BackboneParams",
    "AttentionParams",
    "BlockParams",
    "LocalDescriptorSet",
    "EMBED_FEATURES",
    "linear_params",
    "embedding_inputs",
    "embed_voxels",
    "attention_groups",
    "head_windows",
    "window_attention",
    "voxel_features",
    "extract_local_descriptors",
]

import dataclasses
import math

import numpy as np

from ._geometry import (cubic_window_indices, group_labels,
                        radial_window_indices, spherical_coordinates,
                        voxelize)
from ._numeric import (Parameter, add, as_tensor, concat_cols, gather_rows,
                       grouped_attention, matmul, mlp2, slice_cols)
from .errors import ConfigError, NonFiniteError, ShapeError


#: Width of the per-voxel geometric input: centroid offset (3), range,
#: sin/cos azimuth, polar angle, mean intensity, log(1 + count).
EMBED_FEATURES = 9


@dataclasses.dataclass
class BackboneConfig(object):
    """Backbone hyper-parameters; window sizes in radians and meters."""

    channels: int = 16
    num_blocks: int = 2
    num_heads: int = 4
    enable_radial: bool = True
    enable_cubic: bool = True
    radial_window_alpha: float = math.pi / 60.0
    radial_window_beta: float = math.pi / 60.0
    cubic_window: float = 0.4
    voxel_size: float = 0.3
    mlp_ratio: int = 2

    def validate(self):
        """Raise :class:`ConfigError` for inconsistent settings."""
        # type: () -> None

        if self.channels < 1 or self.num_blocks < 0 or self.num_heads < 1:
            raise ConfigError("backbone sizes must be positive")
        if self.enable_radial and self.enable_cubic and self.num_heads % 2:
            raise ConfigError(
                "num_heads must be even when both attentions are enabled")
        if self.channels % self.num_heads:
            raise ConfigError("channels {} not divisible by {} heads".format(
                self.channels, self.num_heads))
        if min(self.radial_window_alpha, self.radial_window_beta,
               self.cubic_window, self.voxel_size) <= 0:
            raise ConfigError("window and voxel sizes must be positive")
        if self.mlp_ratio < 1:
            raise ConfigError("mlp_ratio must be at least 1")


def linear_params(rng, prefix, fan_in, fan_out, gain=1.0):
    """
    Create a weight/bias pair with scaled normal initialization.

    :param rng: ``numpy.random.Generator``.
    :param str prefix: Parameter name prefix.
    :param int fan_in: Input width.
    :param int fan_out: Output width.
    :param float gain: Multiplier on the ``1/sqrt(fan_in)`` scale.
    """
    # type: (np.random.Generator, str, int, int, float) -> tuple

    weight = rng.normal(0.0, gain / math.sqrt(fan_in), size=(fan_in, fan_out))
    return (Parameter(weight, prefix + ".weight"),
            Parameter(np.zeros((1, fan_out)), prefix + ".bias"))


class AttentionParams(object):
    """Query, key, value and output projections of one attention layer."""

    def __init__(self, wq, wk, wv, wo):
        """Store the four d x d projections."""
        # type: (Parameter, Parameter, Parameter, Parameter) -> None

        self.wq = wq
        self.wk = wk
        self.wv = wv
        self.wo = wo

    @classmethod
    def create(cls, rng, prefix, channels):
        """Randomly initialize the projections."""
        # type: (np.random.Generator, str, int) -> AttentionParams

        def proj(name):
            return Parameter(
                rng.normal(0.0, 1.0 / math.sqrt(channels),
                           size=(channels, channels)),
                "{}.{}".format(prefix, name))

        return cls(proj("wq"), proj("wk"), proj("wv"), proj("wo"))

    def parameters(self):
        """Return the parameters in a fixed order."""
        # type: () -> list

        return [self.wq, self.wk, self.wv, self.wo]


class BlockParams(object):
    """Residual MLP and window attention weights of one block."""

    def __init__(self, mlp, attention):
        """Store the ``(w1, b1, w2, b2)`` MLP and the attention params."""
        # type: (tuple, AttentionParams) -> None

        self.mlp = mlp
        self.attention = attention

    def parameters(self):
        """Return the parameters in a fixed order."""
        # type: () -> list

        return list(self.mlp) + self.attention.parameters()


class BackboneParams(object):
    """All trainable backbone weights."""

    def __init__(self, embed_weight, embed_bias, blocks):
        """Store the embedding and the block parameters."""
        # type: (Parameter, Parameter, list) -> None

        self.embed_weight = embed_weight
        self.embed_bias = embed_bias
        self.blocks = blocks

    @classmethod
    def create(cls, cfg, rng):
        """
        Randomly initialize weights for `cfg`.

        :param BackboneConfig cfg: Backbone hyper-parameters.
        :param rng: ``numpy.random.Generator``.
        """
        # type: (BackboneConfig, np.random.Generator) -> BackboneParams

        cfg.validate()
        d = cfg.channels
        hidden = cfg.mlp_ratio * d
        embed_weight, embed_bias = linear_params(
            rng, "backbone.embed", EMBED_FEATURES, d)
        blocks = []
        for i in range(cfg.num_blocks):
            prefix = "backbone.blocks.{}".format(i)
            w1, b1 = linear_params(rng, prefix + ".mlp.fc1", d, hidden)
            w2, b2 = linear_params(rng, prefix + ".mlp.fc2", hidden, d,
                                   gain=0.5)
            attention = AttentionParams.create(rng, prefix + ".attn", d)
            blocks.append(BlockParams((w1, b1, w2, b2), attention))
        return cls(embed_weight, embed_bias, blocks)

    def parameters(self):
        """Return the parameters in a fixed order."""
        # type: () -> list

        params = [self.embed_weight, self.embed_bias]
        for block in self.blocks:
            params.extend(block.parameters())
        return params


class LocalDescriptorSet(object):
    """
    Per-point descriptors tied to the point positions.

    :param np.ndarray descriptors: N x d descriptors.
    :param np.ndarray positions: N x 3 positions in meters.
    :param Tensor tensor: Optional graph node holding `descriptors`, kept
                          when the set is used inside a training loss.
    """

    __slots__ = ("descriptors", "positions", "tensor")

    def __init__(self, descriptors, positions, tensor=None):
        """Validate and store the arrays."""
        # type: (np.ndarray, np.ndarray, object) -> None

        descriptors = np.asarray(descriptors, dtype=np.float64)
        positions = np.asarray(positions, dtype=np.float64)
        if (descriptors.ndim != 2 or positions.shape != (
                descriptors.shape[0], 3)):
            raise ShapeError("descriptors {} for positions {}".format(
                descriptors.shape, positions.shape))
        if not np.all(np.isfinite(descriptors)):
            raise NonFiniteError("local descriptors")
        self.descriptors = descriptors
        self.positions = positions
        self.tensor = tensor

    def __len__(self):
        """Return the number of points."""
        # type: () -> int

        return self.descriptors.shape[0]

    def __repr__(self):
        """Return a short description of the set."""
        # type: () -> str

        return "<localdescriptorset {}x{}>".format(*self.descriptors.shape)

    def subset(self, index):
        """Return the rows selected by `index`."""
        # type: (np.ndarray) -> LocalDescriptorSet

        tensor = None
        if self.tensor is not None:
            tensor = gather_rows(self.tensor, np.asarray(index).reshape(-1))
        return LocalDescriptorSet(self.descriptors[index],
                                  self.positions[index], tensor)


def embedding_inputs(grid):
    """
    Geometric input rows of every voxel (V x :data:`EMBED_FEATURES`).

    :param VoxelGrid grid: Voxelized cloud.
    """
    # type: (VoxelGrid) -> np.ndarray

    offset = grid.centroids - (grid.keys + 0.5) * grid.voxel_size
    sph = spherical_coordinates(grid.centroids)
    return np.column_stack([
        offset,
        sph[:, 0],
        np.sin(sph[:, 1]),
        np.cos(sph[:, 1]),
        sph[:, 2],
        grid.intensity,
        np.log1p(grid.counts),
    ])


def embed_voxels(g, params):
    """
    Affine embedding of the voxel geometry into d channels.

    :param VoxelGrid g: Non-empty voxel grid.
    :param BackboneParams params: Backbone weights.
    """
    # type: (VoxelGrid, BackboneParams) -> Tensor

    if len(g) == 0:
        raise ShapeError("empty voxel grid")
    return add(matmul(as_tensor(embedding_inputs(g)), params.embed_weight),
               params.embed_bias)


def attention_groups(grid, cfg):
    """
    Radial and cubic window group labels of every voxel.

    :param VoxelGrid grid: Voxelized cloud.
    :param BackboneConfig cfg: Window sizes.
    :return: ``{"radial": labels, "cubic": labels}``.
    """
    # type: (VoxelGrid, BackboneConfig) -> dict

    return {
        "radial": group_labels(radial_window_indices(
            grid.centroids, cfg.radial_window_alpha, cfg.radial_window_beta)),
        "cubic": group_labels(cubic_window_indices(
            grid.centroids, cfg.cubic_window)),
    }


def head_windows(groups, cfg):
    """
    Per-head group labels: first half radial, second half cubic.

    When only one attention kind is enabled every head uses it; when none
    is, an empty list is returned.

    :param dict groups: Output of :func:`attention_groups`.
    :param BackboneConfig cfg: Head count and attention toggles.
    """
    # type: (dict, BackboneConfig) -> list

    heads = cfg.num_heads
    if cfg.enable_radial and cfg.enable_cubic:
        return [groups["radial"]] * (heads // 2) + \
            [groups["cubic"]] * (heads - heads // 2)
    if cfg.enable_radial:
        return [groups["radial"]] * heads
    if cfg.enable_cubic:
        return [groups["cubic"]] * heads
    return []


def window_attention(features, windows, heads, params):
    """
    Multi-head self-attention computed independently within each window.

    :param Tensor features: V x d features.
    :param windows: One label array for all heads, or a sequence of
                    `heads` label arrays (one per head).
    :param int heads: Number of heads; d must be divisible by it.
    :param AttentionParams params: Projection weights.
    :return: ``features + Wo(concat_h attention_h)``.
    """
    # type: (Tensor, object, int, AttentionParams) -> Tensor

    features = as_tensor(features)
    v_count, d = features.shape
    if heads < 1 or d % heads:
        raise ShapeError("{} channels over {} heads".format(d, heads))
    if isinstance(windows, np.ndarray) and windows.ndim == 1:
        windows = [windows] * heads
    windows = list(windows)
    if len(windows) != heads or any(
            np.asarray(w).reshape(-1).shape[0] != v_count for w in windows):
        raise ShapeError("window labels do not match {} rows x {} heads"
                         .format(v_count, heads))

    width = d // heads
    q = matmul(features, params.wq)
    k = matmul(features, params.wk)
    v = matmul(features, params.wv)
    outputs = []
    for h in range(heads):
        lo, hi = h * width, (h + 1) * width
        outputs.append(grouped_attention(
            slice_cols(q, lo, hi), slice_cols(k, lo, hi),
            slice_cols(v, lo, hi), windows[h], 1.0 / math.sqrt(width)))
    return add(features, matmul(concat_cols(outputs), params.wo))


def voxel_features(c, cfg, params):
    """
    Refined per-voxel features of a cloud.

    :param PointCloud c: Input cloud.
    :param BackboneConfig cfg: Hyper-parameters.
    :param BackboneParams params: Weights.
    :return: ``(features, grid)`` with features a V x d :class:`Tensor`.
    """
    # type: (PointCloud, BackboneConfig, BackboneParams) -> tuple

    grid = voxelize(c, cfg.voxel_size)
    x = embed_voxels(grid, params)
    windows = head_windows(attention_groups(grid, cfg), cfg)
    for block in params.blocks:
        x = add(x, mlp2(x, *block.mlp))
        if windows:
            x = window_attention(x, windows, cfg.num_heads, block.attention)
    return x, grid


def extract_local_descriptors(c, cfg, params):
    """
    Per-point local descriptors of `c`.

    :param PointCloud c: Input cloud with N >= 1 points.
    :param BackboneConfig cfg: Hyper-parameters.
    :param BackboneParams params: Weights.
    :return: :class:`LocalDescriptorSet` with N rows; ``tensor`` holds the
             differentiable N x d node.
    """
    # type: (PointCloud, BackboneConfig, BackboneParams) -> LocalDescriptorSet

    features, grid = voxel_features(c, cfg, params)
    points = gather_rows(features, grid.inverse)
    return LocalDescriptorSet(points.data, c.points, points)
