# coding: utf-8
"""Triplet and local losses, hard negative mining and optimizers."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "LossConfig",
    "MiningConfig",
    "TrainingConfig",
    "Triplet",
    "CorrespondenceSet",
    "MiningResult",
    "StepStats",
    "EpochStats",
    "SGD",
    "Adam",
    "OPTIMIZERS",
    "make_optimizer",
    "TrainingLog",
    "triplet_loss",
    "find_correspondences",
    "local_consistency_loss",
    "sample_subset",
    "mine_hard_negatives",
    "compute_descriptors",
    "augment",
    "train_step",
    "train_epoch",
    "evaluate_triplets",
]

import collections
import dataclasses
import logging
import math

import numpy as np
from scipy.spatial import cKDTree

from ._descriptor import describe, scene_descriptor
from ._geometry import PointCloud, RigidTransform
from ._numeric import (add, as_tensor, backward, gather_rows, mul, relu,
                       scale, square, sub, sum_all, sum_rows)
from ._util import parallel_map
from .errors import ConfigError, DegenerateInputError, ShapeError


log = logging.getLogger(__name__)


@dataclasses.dataclass
class LossConfig(object):
    """Constants of the global and local losses."""

    margin: float = 0.1
    m_p: float = 0.1
    m_n: float = 2.0
    mu_n: float = 1.0
    r_corr: float = 0.5
    exclusion_radius: float = 2.0
    lambda_local: float = 1.0
    sample_set_size: int = 256

    def validate(self):
        """Raise :class:`ConfigError` for negative constants."""
        # type: () -> None

        for field in dataclasses.fields(self):
            if getattr(self, field.name) < 0:
                raise ConfigError("loss.{} must be non-negative".format(
                    field.name))
        if self.sample_set_size < 1:
            raise ConfigError("loss.sample_set_size must be positive")


@dataclasses.dataclass
class MiningConfig(object):
    """Partial hard negative mining settings."""

    positive_radius: float = 5.0
    negative_radius: float = 20.0
    subset_size: int = 1000
    num_negatives: int = 4000

    def validate(self):
        """Raise :class:`ConfigError` for inconsistent radii or sizes."""
        # type: () -> None

        if not 0 < self.positive_radius < self.negative_radius:
            raise ConfigError("mining radii must satisfy 0 < positive < "
                              "negative")
        if self.subset_size < 1 or self.num_negatives < 1:
            raise ConfigError("mining sizes must be positive")

    def negatives_for(self, subset, pool):
        """Number of negatives sampled for a subset of `subset` queries."""
        # type: (int, int) -> int

        scaled = int(round(self.num_negatives * subset / self.subset_size))
        return max(1, min(pool, scaled))


@dataclasses.dataclass
class TrainingConfig(object):
    """
    Optimizer and loop settings.

    `optimizer` names an entry of :data:`OPTIMIZERS`; with ``adam`` the
    `momentum` is the decay of the first moment estimate.
    """

    epochs: int = 10
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    momentum: float = 0.9
    augment: bool = False
    max_yaw_deg: float = 30.0
    occlusion_sector_deg: float = 30.0
    checkpoint_every: int = 1

    def validate(self):
        """Raise :class:`ConfigError` for invalid settings."""
        # type: () -> None

        if self.epochs < 0 or self.checkpoint_every < 1:
            raise ConfigError("training.epochs must be >= 0 and "
                              "training.checkpoint_every >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError("training.optimizer must be one of {}".format(
                ", ".join(sorted(OPTIMIZERS))))
        if self.learning_rate < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("training.learning_rate must be >= 0 and "
                              "training.momentum in [0, 1)")
        if not 0 <= self.occlusion_sector_deg < 360:
            raise ConfigError("training.occlusion_sector_deg must lie in "
                              "[0, 360)")


Triplet = collections.namedtuple("Triplet",
                                 "query_id positive_id negative_id")

MiningResult = collections.namedtuple(
    "MiningResult", "triplets no_positive no_hard_negative")

StepStats = collections.namedtuple("StepStats", "global_loss local_loss total")


class CorrespondenceSet(object):
    """
    Point correspondences between two local descriptor sets.

    :param np.ndarray pairs: M x 2 indices ``(i in first, j in second)``.
    :param tuple sources: The two :class:`LocalDescriptorSet` objects.
    """

    def __init__(self, pairs, sources):
        """Store the pairs."""
        # type: (np.ndarray, tuple) -> None

        self.pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        self.sources = sources

    def __len__(self):
        return self.pairs.shape[0]

    def __repr__(self):
        return "<correspondenceset {} pairs>".format(len(self))


def triplet_loss(q, p, n, m):
    """
    ``max(|q - p|^2 - |q - n|^2 + m, 0)`` as a 1x1 tensor.

    :param q: Query descriptor (vector or 1 x e tensor).
    :param p: Positive descriptor.
    :param n: Negative descriptor.
    :param float m: Margin.
    """
    # type: (object, object, object, float) -> Tensor

    q, p, n = as_tensor(q), as_tensor(p), as_tensor(n)
    if not q.shape == p.shape == n.shape:
        raise ShapeError("triplet of {}, {}, {}".format(q.shape, p.shape,
                                                        n.shape))
    positive = sum_all(square(sub(q, p)))
    negative = sum_all(square(sub(q, n)))
    return relu(add(sub(positive, negative), m))


def find_correspondences(a, b, t_gt, r_corr):
    """
    Pair every point of `a` with its nearest point of `b` under `t_gt`.

    :param LocalDescriptorSet a: First set.
    :param LocalDescriptorSet b: Second set.
    :param RigidTransform t_gt: Maps the frame of `a` to the frame of `b`.
    :param float r_corr: Pairs at distance ``>= r_corr`` are dropped.
    """
    # type: (LocalDescriptorSet, LocalDescriptorSet, RigidTransform, float) -> CorrespondenceSet  # noqa: E501

    distance, nearest = cKDTree(b.positions).query(t_gt.apply(a.positions))
    keep = np.flatnonzero(distance < r_corr)
    return CorrespondenceSet(np.stack([keep, nearest[keep]], axis=1), (a, b))


def sample_subset(n, size, rng):
    """Sorted random subset of ``range(n)`` of at most `size` indices."""
    # type: (int, int, np.random.Generator) -> np.ndarray

    if n <= size:
        return np.arange(n)
    return np.sort(rng.choice(n, size=size, replace=False))


def _hardest_negative_term(anchors, anchor_data, anchor_pos, others,
                           other_data, other_pos, candidates, cfg):
    """Masked hinge on the hardest candidate of every anchor row."""
    # type: (...) -> tuple

    diff = anchor_data[:, None, :] - other_data[candidates][None, :, :]
    hardest = candidates[np.argmin(np.sum(diff * diff, axis=2), axis=1)]
    valid = (np.linalg.norm(other_pos[hardest] - anchor_pos, axis=1)
             > cfg.exclusion_radius).astype(np.float64)
    count = int(valid.sum())
    if count == 0:
        return None, 0
    distance = sum_rows(square(sub(anchors, gather_rows(others, hardest))))
    hinge = relu(sub(cfg.m_n, distance))
    return scale(sum_all(mul(hinge, valid[:, None])), cfg.mu_n / count), count


def local_consistency_loss(g1, g2, gamma, cfg, sample_set_size=None,
                           rng=None, subsets=None):
    """
    Contrastive loss over corresponding points of two clouds.

    Corresponding descriptors are pulled within ``m_p``. For every anchor of
    the first cloud the closest descriptor among a sampled subset Q of the
    second cloud is pushed beyond ``m_n``, and symmetrically for anchors of
    the second cloud. A mined negative only counts when its point lies more
    than ``exclusion_radius`` away from the anchor's correspondent in the
    same cloud; every negative term is averaged over its valid count.

    :param g1: N1 x d descriptors of the first cloud.
    :param g2: N2 x d descriptors of the second cloud.
    :param CorrespondenceSet gamma: Non-empty correspondences; positions are
                                    taken from ``gamma.sources``.
    :param LossConfig cfg: Loss constants.
    :param int sample_set_size: Size of Q (``cfg.sample_set_size`` default).
    :param rng: ``numpy.random.Generator`` drawing Q.
    :param tuple subsets: Explicit ``(Q1, Q2)`` index arrays.
    :raises DegenerateInputError: When `gamma` is empty.
    """
    # type: (object, object, CorrespondenceSet, LossConfig, int, np.random.Generator, tuple) -> Tensor  # noqa: E501

    if len(gamma) == 0:
        raise DegenerateInputError("no correspondences")
    g1, g2 = as_tensor(g1), as_tensor(g2)
    pos1 = gamma.sources[0].positions
    pos2 = gamma.sources[1].positions
    if subsets is None:
        size = sample_set_size or cfg.sample_set_size
        rng = rng if rng is not None else np.random.default_rng(0)
        subsets = (sample_subset(g1.shape[0], size, rng),
                   sample_subset(g2.shape[0], size, rng))
    q1, q2 = (np.asarray(s, dtype=np.int64) for s in subsets)
    i, j = gamma.pairs[:, 0], gamma.pairs[:, 1]

    a = gather_rows(g1, i)
    b = gather_rows(g2, j)
    positive = relu(sub(sum_rows(square(sub(a, b))), cfg.m_p))
    loss = scale(sum_all(positive), 1.0 / len(gamma))

    first, _ = _hardest_negative_term(a, g1.data[i], pos2[j], g2, g2.data,
                                      pos2, q2, cfg)
    second, _ = _hardest_negative_term(b, g2.data[j], pos1[i], g1, g1.data,
                                       pos1, q1, cfg)
    for term in (first, second):
        if term is not None:
            loss = add(loss, term)
    return loss


def compute_descriptors(model, dataset, ids, whitener=None, threads=0):
    """Map every id to its scene descriptor values."""
    # type: (SalsaModel, ScanDataset, list, PCAWhitener, int) -> collections.OrderedDict  # noqa: E501

    values = parallel_map(
        lambda scan_id: scene_descriptor(dataset.load(scan_id), model,
                                         whitener).values,
        ids, threads)
    return collections.OrderedDict(zip(ids, values))


def mine_hard_negatives(query_ids, pool_ids, positions, descriptors, cfg,
                        rng):
    """
    Build one triplet per query of a subset.

    The negatives of the subset are sampled once from `pool_ids`. For every
    query a positive is drawn uniformly among the pool scans within
    ``positive_radius``. Among the sampled negatives beyond
    ``negative_radius``, the hard ones are closer to the query in descriptor
    space than the positive; the closest is kept, ties going to the lowest
    id. Queries without positive or without hard negative are skipped.

    :param list query_ids: Queries of the subset.
    :param list pool_ids: Candidate scans.
    :param dict positions: id -> 3-vector world position.
    :param dict descriptors: id -> descriptor values.
    :param MiningConfig cfg: Radii and sample sizes.
    :param rng: ``numpy.random.Generator``.
    """
    # type: (list, list, dict, dict, MiningConfig, np.random.Generator) -> MiningResult  # noqa: E501

    pool_ids = list(pool_ids)
    pool_xyz = np.stack([positions[i] for i in pool_ids])
    pool_desc = np.stack([descriptors[i] for i in pool_ids])
    count = cfg.negatives_for(len(query_ids), len(pool_ids))
    sampled = np.sort(rng.choice(len(pool_ids), size=count, replace=False))

    triplets, no_positive, no_hard = [], 0, 0
    for query_id in query_ids:
        geo = np.linalg.norm(pool_xyz - positions[query_id], axis=1)
        positives = [k for k in np.flatnonzero(geo <= cfg.positive_radius)
                     if pool_ids[k] != query_id]
        if not positives:
            no_positive += 1
            continue
        positive = positives[int(rng.integers(len(positives)))]
        feat = np.linalg.norm(pool_desc - descriptors[query_id], axis=1)
        hard = [k for k in sampled
                if geo[k] > cfg.negative_radius and feat[k] < feat[positive]]
        if not hard:
            no_hard += 1
            continue
        negative = min(hard, key=lambda k: (feat[k], pool_ids[k]))
        triplets.append(Triplet(query_id, pool_ids[positive],
                                pool_ids[negative]))
    if no_positive:
        log.warning("%d queries without a positive within %.1f m",
                    no_positive, cfg.positive_radius)
    log.debug("mined %d triplets, %d queries without hard negative",
              len(triplets), no_hard)
    return MiningResult(triplets, no_positive, no_hard)


def augment(c, max_yaw_deg=30.0, occlusion_sector_deg=30.0, rng=None,
            return_transform=False):
    """
    Random yaw rotation followed by removal of one azimuth sector.

    :param PointCloud c: Input cloud.
    :param float max_yaw_deg: Yaw drawn uniformly in ``[-max, max]``; zero
                              disables the rotation.
    :param float occlusion_sector_deg: Width of the removed sector; zero
                                       disables the occlusion.
    :param rng: ``numpy.random.Generator``.
    :param bool return_transform: Also return the applied rotation.
    :raises DegenerateInputError: When the occlusion would remove every
                                  point.
    """
    # type: (PointCloud, float, float, np.random.Generator, bool) -> PointCloud  # noqa: E501

    if occlusion_sector_deg >= 360.0:
        raise DegenerateInputError("occlusion sector of {} degrees".format(
            occlusion_sector_deg))
    rng = rng if rng is not None else np.random.default_rng()
    transform = RigidTransform.identity()
    out = c
    if max_yaw_deg > 0:
        yaw = math.radians(rng.uniform(-max_yaw_deg, max_yaw_deg))
        transform = RigidTransform.from_yaw(yaw)
        out = PointCloud(transform.apply(c.points), c.intensity)
    if occlusion_sector_deg > 0:
        start = rng.uniform(-math.pi, math.pi)
        azimuth = np.arctan2(out.points[:, 1], out.points[:, 0])
        inside = np.mod(azimuth - start, 2.0 * math.pi) < math.radians(
            occlusion_sector_deg)
        if inside.all():
            raise DegenerateInputError("occlusion removes every point")
        out = out.subset(~inside)
    if return_transform:
        return out, transform
    return out


class SGD(object):
    """
    Stochastic gradient descent with momentum.

    :param list params: Parameters to update.
    :param float lr: Learning rate.
    :param float momentum: Velocity decay.
    """

    def __init__(self, params, lr=1e-3, momentum=0.9):
        """Create zero velocities for `params`."""
        # type: (list, float, float) -> None

        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        """Reset every parameter gradient."""
        # type: () -> None

        for p in self.params:
            p.zero_grad()

    def step(self):
        """Apply one update from the accumulated gradients."""
        # type: () -> None

        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= self.lr * v


class Adam(object):
    """
    Adam with bias-corrected moment estimates.

    Every coordinate moves by about `lr` per step whatever the scale of its
    gradient.

    :param list params: Parameters to update.
    :param float lr: Learning rate.
    :param float beta1: First moment decay.
    :param float beta2: Second moment decay.
    :param float eps: Added to the root of the second moment.
    """

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        """Create zero moment estimates for `params`."""
        # type: (list, float, float, float, float) -> None

        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.first = [np.zeros_like(p.data) for p in self.params]
        self.second = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        """Reset every parameter gradient."""
        # type: () -> None

        for p in self.params:
            p.zero_grad()

    def step(self):
        """Apply one update from the accumulated gradients."""
        # type: () -> None

        self.t += 1
        first_fix = 1.0 - self.beta1 ** self.t
        second_fix = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.first, self.second):
            m *= self.beta1
            m += (1.0 - self.beta1) * p.grad
            v *= self.beta2
            v += (1.0 - self.beta2) * p.grad * p.grad
            p.data -= self.lr * (m / first_fix) / (
                np.sqrt(v / second_fix) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


def make_optimizer(params, cfg):
    """
    Build the optimizer named by ``cfg.optimizer``.

    :param list params: Parameters to update.
    :param TrainingConfig cfg: Optimizer settings.
    """
    # type: (list, TrainingConfig) -> object

    cfg.validate()
    if cfg.optimizer == "adam":
        return Adam(params, cfg.learning_rate, beta1=cfg.momentum)
    return SGD(params, cfg.learning_rate, cfg.momentum)


class TrainingLog(object):
    """
    Plain-text log with one line per optimizer step.

    Lines read ``step global local total skipped``.
    """

    def __init__(self, filesystem, path):
        """Open `path` for writing."""
        # type: (FS, str) -> None

        self._file = filesystem.open(path, "w")
        self._file.write("# step global_loss local_loss total skipped\n")

    def __enter__(self):
        return self

    def __exit__(self, *exc_info):
        self.close()

    def write(self, step, stats, skipped):
        """Append the line of one step."""
        # type: (int, StepStats, int) -> None

        self._file.write("{} {:.8f} {:.8f} {:.8f} {}\n".format(
            step, stats.global_loss, stats.local_loss, stats.total, skipped))

    def close(self):
        """Flush and close the file."""
        # type: () -> None

        self._file.close()


class EpochStats(collections.namedtuple(
        "EpochStats", "steps mean_global mean_local mean_total max_total "
                      "no_positive no_hard_negative no_correspondence")):
    """Loss statistics and skip counts of one epoch."""

    __slots__ = ()

    @property
    def skipped(self):
        """Return the number of skipped queries."""
        # type: () -> int

        return self.no_positive + self.no_hard_negative

    @property
    def mean_query_loss(self):
        """
        Mean triplet loss over the queries that had a positive.

        Queries without a hard negative count with a zero loss.
        """
        # type: () -> float

        queries = self.steps + self.no_hard_negative
        return self.mean_global * self.steps / queries if queries else 0.0


def _training_pair(dataset, triplet, training_cfg, rng):
    """Load the triplet clouds, augmented when enabled."""
    # type: (...) -> tuple

    clouds = [dataset.load(i) for i in triplet]
    t_gt = dataset.relative_pose(triplet.query_id, triplet.positive_id)
    if training_cfg.augment:
        moved = [augment(c, training_cfg.max_yaw_deg,
                         training_cfg.occlusion_sector_deg, rng, True)
                 for c in clouds]
        clouds = [m[0] for m in moved]
        t_gt = moved[1][1].compose(t_gt).compose(moved[0][1].inverse())
    return clouds, t_gt


def train_step(model, optimizer, dataset, triplet, loss_cfg=None,
               training_cfg=None, rng=None):
    """
    One optimizer step on a triplet.

    The total loss is the triplet loss plus ``lambda_local`` times the local
    consistency loss of the query and positive clouds. The local term is
    left out when the pair has no correspondence.

    :return: :class:`StepStats`.
    """
    # type: (SalsaModel, object, ScanDataset, Triplet, LossConfig, TrainingConfig, np.random.Generator) -> StepStats  # noqa: E501

    loss_cfg = loss_cfg or LossConfig()
    training_cfg = training_cfg or TrainingConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    (cq, cp, cn), t_gt = _training_pair(dataset, triplet, training_cfg, rng)
    out_q, out_p, out_n = (describe(c, model) for c in (cq, cp, cn))

    global_loss = triplet_loss(out_q.descriptor, out_p.descriptor,
                               out_n.descriptor, loss_cfg.margin)
    total = global_loss
    local_value = 0.0
    if loss_cfg.lambda_local > 0:
        gamma = find_correspondences(out_q.local, out_p.local, t_gt,
                                     loss_cfg.r_corr)
        if len(gamma):
            local = local_consistency_loss(out_q.local.tensor,
                                           out_p.local.tensor, gamma,
                                           loss_cfg, rng=rng)
            local_value = local.item()
            total = add(total, scale(local, loss_cfg.lambda_local))
        else:
            local_value = float("nan")

    optimizer.zero_grad()
    backward(total)
    optimizer.step()
    return StepStats(global_loss.item(), local_value, total.item())


def train_epoch(dataset, model, optimizer, rng, loss_cfg=None,
                mining_cfg=None, training_cfg=None, training_log=None,
                threads=0, first_step=0, max_steps=None):
    """
    Mine triplets subset by subset and take one optimizer step per triplet.

    Every scan of `dataset` is a training query and a pool candidate.

    :param ScanDataset dataset: Training scans with poses.
    :param SalsaModel model: Model updated in place.
    :param optimizer: :class:`SGD` or :class:`Adam` over
                      ``model.parameters()``.
    :param rng: ``numpy.random.Generator``.
    :param TrainingLog training_log: Optional per-step log.
    :param int first_step: Step number of the first logged step.
    :param int max_steps: Stop once this many steps were taken; queries
                          of the remaining subsets are not counted.
    :return: :class:`EpochStats`.
    """
    # type: (...) -> EpochStats

    loss_cfg = loss_cfg or LossConfig()
    mining_cfg = mining_cfg or MiningConfig()
    training_cfg = training_cfg or TrainingConfig()

    ids = dataset.ids
    positions = dict(zip(ids, dataset.positions(ids)))
    order = [ids[k] for k in rng.permutation(len(ids))]
    subsets = [order[k:k + mining_cfg.subset_size]
               for k in range(0, len(order), mining_cfg.subset_size)]

    steps, no_positive, no_hard, no_corr = [], 0, 0, 0
    for subset in subsets:
        if max_steps is not None and len(steps) >= max_steps:
            break
        descriptors = compute_descriptors(model, dataset, ids,
                                          threads=threads)
        mined = mine_hard_negatives(subset, ids, positions, descriptors,
                                    mining_cfg, rng)
        no_positive += mined.no_positive
        no_hard += mined.no_hard_negative
        skipped = mined.no_positive + mined.no_hard_negative
        for triplet in mined.triplets:
            if max_steps is not None and len(steps) >= max_steps:
                break
            stats = train_step(model, optimizer, dataset, triplet, loss_cfg,
                               training_cfg, rng)
            if math.isnan(stats.local_loss):
                no_corr += 1
                stats = stats._replace(local_loss=0.0)
            if training_log is not None:
                training_log.write(first_step + len(steps), stats, skipped)
            steps.append(stats)

    if not steps:
        return EpochStats(0, 0.0, 0.0, 0.0, 0.0, no_positive, no_hard,
                          no_corr)
    values = np.array(steps)
    return EpochStats(len(steps), float(values[:, 0].mean()),
                      float(values[:, 1].mean()), float(values[:, 2].mean()),
                      float(values[:, 2].max()), no_positive, no_hard,
                      no_corr)


def evaluate_triplets(model, dataset, triplets, margin=0.1, whitener=None,
                      threads=0):
    """
    Triplet loss of fixed triplets without touching the parameters.

    :return: Array of per-triplet losses.
    """
    # type: (SalsaModel, ScanDataset, list, float, PCAWhitener, int) -> np.ndarray  # noqa: E501

    ids = sorted({i for t in triplets for i in t})
    descriptors = compute_descriptors(model, dataset, ids, whitener, threads)
    return np.array([
        triplet_loss(descriptors[t.query_id], descriptors[t.positive_id],
                     descriptors[t.negative_id], margin).item()
        for t in triplets])
