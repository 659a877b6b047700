# coding: utf-8
"""Local matching, spectral re-ranking and RANSAC metric localization."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "LocalizationConfig",
    "MatchSet",
    "CompatibilityGraph",
    "RerankedCandidate",
    "PoseEstimate",
    "RegistrationRecord",
    "LocalizationSummary",
    "match_local",
    "ratio_prune",
    "compatibility_matrix",
    "spectral_fitness",
    "candidate_fitness",
    "rerank",
    "ransac_register",
    "localization_success",
    "register_candidate",
    "global_pose",
    "summarize_localization",
]

import collections
import dataclasses
import logging
import math

import numpy as np

from ._geometry import RigidTransform, kabsch, pose_error
from ._numeric import power_iteration
from ._util import parallel_map
from .errors import ConfigError, ConvergenceError, DegenerateInputError


log = logging.getLogger(__name__)

_MATCH_CHUNK = 256


@dataclasses.dataclass
class LocalizationConfig(object):
    """Re-ranking, registration and success settings."""

    max_matches: int = 512
    mutual_check: bool = False
    keypoints: int = 0
    ratio_tau: float = 0.8
    ratio_samples: int = 8
    sigma_c: float = 0.6
    rerank_depth: int = 20
    power_tol: float = 1e-6
    power_max_iter: int = 1000
    power_shift: float = 1.0
    inlier_threshold: float = 0.5
    confidence: float = 0.999
    max_iterations: int = 10000
    success_rte: float = 2.0
    success_rre: float = 5.0

    def validate(self):
        """Raise :class:`ConfigError` for invalid settings."""
        # type: () -> None

        if min(self.max_matches, self.ratio_samples, self.rerank_depth,
               self.power_max_iter, self.max_iterations) < 1:
            raise ConfigError("localization counts must be positive")
        if self.keypoints < 0:
            raise ConfigError("localization.keypoints must be >= 0")
        if not 0 < self.ratio_tau <= 1 or not 0 < self.confidence < 1:
            raise ConfigError("localization.ratio_tau must lie in (0, 1] and "
                              "localization.confidence in (0, 1)")
        if min(self.sigma_c, self.inlier_threshold, self.success_rte,
               self.success_rre) <= 0 or self.power_shift < 0:
            raise ConfigError("localization thresholds must be positive")


class MatchSet(object):
    """
    Putative correspondences from a query cloud to a candidate cloud.

    :param np.ndarray query_index: Query point index per match.
    :param np.ndarray candidate_index: Candidate point index per match.
    :param np.ndarray distances: Descriptor distance per match.
    :param np.ndarray query_positions: All query positions, N x 3.
    :param np.ndarray candidate_positions: All candidate positions, M x 3.
    :param np.ndarray mutual: Whether each match is a mutual nearest
                              neighbor.
    """

    def __init__(self, query_index, candidate_index, distances,
                 query_positions, candidate_positions, mutual=None):
        """Store the match arrays."""
        # type: (np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray) -> None  # noqa: E501

        self.query_index = np.asarray(query_index, dtype=np.int64)
        self.candidate_index = np.asarray(candidate_index, dtype=np.int64)
        self.distances = np.asarray(distances, dtype=np.float64)
        self.query_positions = query_positions
        self.candidate_positions = candidate_positions
        if mutual is None:
            mutual = np.zeros(self.query_index.shape[0], dtype=bool)
        self.mutual = np.asarray(mutual, dtype=bool)

    def __len__(self):
        return self.query_index.shape[0]

    def __repr__(self):
        return "<matchset {} pairs>".format(len(self))

    @property
    def pairs(self):
        """Return ``[(query index, candidate index, distance)]``."""
        # type: () -> list

        return [(int(i), int(j), float(d)) for i, j, d in zip(
            self.query_index, self.candidate_index, self.distances)]

    @property
    def src(self):
        """Return the matched query positions."""
        # type: () -> np.ndarray

        return self.query_positions[self.query_index]

    @property
    def dst(self):
        """Return the matched candidate positions."""
        # type: () -> np.ndarray

        return self.candidate_positions[self.candidate_index]

    def subset(self, keep):
        """Return the matches selected by `keep` (mask or indices)."""
        # type: (np.ndarray) -> MatchSet

        return MatchSet(self.query_index[keep], self.candidate_index[keep],
                        self.distances[keep], self.query_positions,
                        self.candidate_positions, self.mutual[keep])


def _nearest_descriptors(a, b):
    """Index and distance of the nearest row of `b` for every row of `a`.

    Ties go to the lowest index.
    """
    # type: (np.ndarray, np.ndarray) -> tuple

    index = np.empty(a.shape[0], dtype=np.int64)
    distance = np.empty(a.shape[0])
    for start in range(0, a.shape[0], _MATCH_CHUNK):
        block = a[start:start + _MATCH_CHUNK]
        d = np.linalg.norm(block[:, None, :] - b[None, :, :], axis=2)
        nearest = np.argmin(d, axis=1)
        index[start:start + _MATCH_CHUNK] = nearest
        distance[start:start + _MATCH_CHUNK] = d[np.arange(len(block)),
                                                 nearest]
    return index, distance


def match_local(q, c, max_matches=512, mutual_check=False):
    """
    Nearest-descriptor matches from `q` to `c`.

    Every query point is matched to its nearest candidate descriptor; the
    `max_matches` matches of smallest distance are kept, ordered by distance.

    :param LocalDescriptorSet q: Query local descriptors.
    :param LocalDescriptorSet c: Candidate local descriptors.
    :param int max_matches: Number of matches kept.
    :param bool mutual_check: Keep only mutual nearest neighbors.
    """
    # type: (LocalDescriptorSet, LocalDescriptorSet, int, bool) -> MatchSet

    if len(q) == 0 or len(c) == 0:
        raise DegenerateInputError("matching an empty descriptor set")
    forward, distance = _nearest_descriptors(q.descriptors, c.descriptors)
    backward, _ = _nearest_descriptors(c.descriptors, q.descriptors)
    mutual = backward[forward] == np.arange(len(q))

    order = np.argsort(distance, kind="stable")
    if mutual_check:
        order = order[mutual[order]]
    order = order[:max_matches]
    return MatchSet(order, forward[order], distance[order], q.positions,
                    c.positions, mutual[order])


def _edge_ratio(a, b):
    """Smaller over larger edge length; 1 when both are zero."""
    # type: (np.ndarray, np.ndarray) -> np.ndarray

    low, high = np.minimum(a, b), np.maximum(a, b)
    safe = np.where(high > 0, high, 1.0)
    return np.where(high > 0, low / safe, 1.0)


def ratio_prune(m, tau=0.8, samples=8, rng=None):
    """
    Drop matches whose edge lengths disagree between the two clouds.

    Every match is compared with `samples` random partner matches; the
    match is kept when the median ratio of the smaller to the larger of
    the two edge lengths is at least `tau`.

    :param MatchSet m: Matches.
    :param float tau: Minimum median edge ratio.
    :param int samples: Partners drawn per match.
    :param rng: ``numpy.random.Generator``.
    """
    # type: (MatchSet, float, int, np.random.Generator) -> MatchSet

    n = len(m)
    if n < 2:
        return m
    rng = rng if rng is not None else np.random.default_rng(0)
    src, dst = m.src, m.dst
    partners = rng.integers(0, n - 1, size=(n, samples))
    partners += partners >= np.arange(n)[:, None]
    query_edges = np.linalg.norm(src[:, None, :] - src[partners], axis=2)
    candidate_edges = np.linalg.norm(dst[:, None, :] - dst[partners], axis=2)
    ratio = np.median(_edge_ratio(query_edges, candidate_edges), axis=1)
    keep = np.flatnonzero(ratio >= tau)
    log.debug("ratio test kept %d of %d matches", keep.size, n)
    return m.subset(keep)


CompatibilityGraph = collections.namedtuple("CompatibilityGraph",
                                            "matrix sigma_c")
CompatibilityGraph.__doc__ = """Pairwise length-preservation scores of a
match set, with the kernel bandwidth in meters."""


def compatibility_matrix(m, sigma_c=0.6):
    """
    Truncated quadratic compatibility of every pair of matches.

    ``M_ij = max(0, 1 - (|p_i - p_j| - |q_i - q_j|)^2 / sigma_c^2)`` for
    ``i != j`` and ``M_ii = 0``.

    :param MatchSet m: Matches.
    :param float sigma_c: Kernel bandwidth in meters.
    """
    # type: (MatchSet, float) -> CompatibilityGraph

    src, dst = m.src, m.dst
    query_lengths = np.linalg.norm(src[:, None, :] - src[None, :, :], axis=2)
    candidate_lengths = np.linalg.norm(dst[:, None, :] - dst[None, :, :],
                                       axis=2)
    diff = query_lengths - candidate_lengths
    matrix = np.clip(1.0 - diff * diff / (sigma_c * sigma_c), 0.0, 1.0)
    np.fill_diagonal(matrix, 0.0)
    return CompatibilityGraph(matrix, sigma_c)


def spectral_fitness(g, tol=1e-6, max_iter=1000, shift=1.0):
    """
    Leading eigenvalue of the compatibility matrix divided by its size.

    :param CompatibilityGraph g: Compatibility graph, at least 2 x 2.
    :param float tol: Power iteration tolerance.
    :param int max_iter: Power iteration budget.
    :param float shift: Diagonal shift of the power iteration.
    :return: ``(score, converged)``; without convergence the score comes
             from the last iterate.
    """
    # type: (CompatibilityGraph, float, int, float) -> tuple

    n = g.matrix.shape[0]
    if n < 2:
        raise DegenerateInputError("fitness of {} matches".format(n))
    try:
        value = power_iteration(g.matrix, tol, max_iter, shift).value
        converged = True
    except ConvergenceError as error:
        log.warning("power iteration stopped after %d iterations",
                    error.iterations)
        value, converged = error.value, False
    return max(value, 0.0) / n, converged


RerankedCandidate = collections.namedtuple(
    "RerankedCandidate", "id fitness retrieval_rank converged")


def candidate_fitness(query, candidate, cfg=None):
    """
    Spectral fitness of one candidate's local descriptors.

    :return: ``(score, converged)``; candidates with fewer than two matches
             score 0.
    """
    # type: (LocalDescriptorSet, LocalDescriptorSet, LocalizationConfig) -> tuple  # noqa: E501

    cfg = cfg or LocalizationConfig()
    if len(query) == 0 or len(candidate) == 0:
        return 0.0, True
    matches = match_local(query, candidate, cfg.max_matches, cfg.mutual_check)
    if len(matches) < 2:
        return 0.0, True
    return spectral_fitness(compatibility_matrix(matches, cfg.sigma_c),
                            cfg.power_tol, cfg.power_max_iter,
                            cfg.power_shift)


def rerank(query, candidates, cfg=None, threads=0):
    """
    Reorder the first ``cfg.rerank_depth`` retrievals by spectral fitness.

    :param LocalDescriptorSet query: Query local descriptors.
    :param list candidates: ``(id, LocalDescriptorSet)`` in retrieval
                            order.
    :return: :class:`RerankedCandidate` list; the re-ranked head is sorted
             by descending fitness with ties kept in retrieval order, the
             tail beyond the depth is unchanged with ``fitness=None``.
    """
    # type: (LocalDescriptorSet, list, LocalizationConfig, int) -> list

    cfg = cfg or LocalizationConfig()
    head = candidates[:cfg.rerank_depth]
    scores = parallel_map(lambda item: candidate_fitness(query, item[1], cfg),
                          head, threads)
    ranked = sorted(
        (RerankedCandidate(cid, float(score), rank, converged)
         for rank, ((cid, _), (score, converged)) in enumerate(
             zip(head, scores))),
        key=lambda r: (-r.fitness, r.retrieval_rank))
    tail = [RerankedCandidate(cid, None, rank, True) for rank, (cid, _)
            in enumerate(candidates[cfg.rerank_depth:], len(head))]
    return ranked + tail


class PoseEstimate(collections.namedtuple(
        "PoseEstimate",
        "transform inliers inlier_ratio iterations converged")):
    """Outcome of a robust registration."""

    __slots__ = ()

    def to_json(self):
        """Return a JSON-ready record."""
        # type: () -> dict

        return {"pose": [float(v) for v in
                         self.transform.as_matrix34().reshape(-1)],
                "inliers": int(self.inliers),
                "inlier_ratio": float(self.inlier_ratio),
                "iterations": int(self.iterations),
                "converged": bool(self.converged)}


def _inlier_mask(transform, src, dst, threshold):
    residual = np.linalg.norm(transform.apply(src) - dst, axis=1)
    return residual < threshold


def ransac_register(m, inlier_thresh=0.5, conf=0.999, max_iter=10000,
                    rng=None):
    """
    Robust rigid transform from query to candidate positions.

    Every iteration fits :func:`kabsch` to three random matches and counts
    the matches with residual below `inlier_thresh`. The loop stops once
    ``1 - (1 - w^3)^iterations >= conf`` where `w` is the best inlier
    ratio, and the result is refitted on the best inlier set.

    :param MatchSet m: Matches.
    :param rng: ``numpy.random.Generator``.
    :return: :class:`PoseEstimate`; ``converged`` is false with an identity
             transform when no sample reaches three inliers.
    """
    # type: (MatchSet, float, float, int, np.random.Generator) -> PoseEstimate  # noqa: E501

    rng = rng if rng is not None else np.random.default_rng(0)
    n = len(m)
    if n < 3:
        return PoseEstimate(RigidTransform.identity(), 0, 0.0, 0, False)
    src, dst = m.src, m.dst

    best_mask, best_count, reached = None, 0, False
    iteration = 0
    for iteration in range(1, max_iter + 1):
        sample = rng.choice(n, size=3, replace=False)
        try:
            candidate = kabsch(src[sample], dst[sample])
        except DegenerateInputError:
            continue
        mask = _inlier_mask(candidate, src, dst, inlier_thresh)
        count = int(mask.sum())
        if count > best_count:
            best_mask, best_count = mask, count
        w = best_count / float(n)
        if best_count >= 3 and 1.0 - (1.0 - w ** 3) ** iteration >= conf:
            reached = True
            break

    if best_count < 3:
        log.warning("registration found no consensus in %d iterations",
                    iteration)
        return PoseEstimate(RigidTransform.identity(), 0, 0.0, iteration,
                            False)
    try:
        transform = kabsch(src[best_mask], dst[best_mask])
    except DegenerateInputError:
        log.warning("degenerate inlier set of %d matches", best_count)
        return PoseEstimate(RigidTransform.identity(), 0, 0.0, iteration,
                            False)
    inliers = int(_inlier_mask(transform, src, dst, inlier_thresh).sum())
    if not reached:
        log.warning("registration stopped at %d iterations below confidence "
                    "%.3f", iteration, conf)
    return PoseEstimate(transform, inliers, inliers / float(n), iteration,
                        reached)


def localization_success(est, gt, max_rte=2.0, max_rre=5.0):
    """
    Whether `est` lies within `max_rte` meters and `max_rre` degrees of `gt`.

    Both bounds are inclusive.

    :param est: :class:`PoseEstimate` or :class:`RigidTransform`.
    :param RigidTransform gt: Ground-truth transform.
    """
    # type: (object, RigidTransform, float, float) -> bool

    transform = getattr(est, "transform", est)
    rte, rre = pose_error(transform, gt)
    return rte <= max_rte and rre <= max_rre


def register_candidate(query, candidate, cfg=None, rng=None):
    """
    Match, prune and register a query against one candidate.

    :param LocalDescriptorSet query: Query local descriptors.
    :param LocalDescriptorSet candidate: Candidate local descriptors.
    :return: :class:`PoseEstimate` mapping the query frame to the candidate
             frame.
    """
    # type: (LocalDescriptorSet, LocalDescriptorSet, LocalizationConfig, np.random.Generator) -> PoseEstimate  # noqa: E501

    cfg = cfg or LocalizationConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    matches = match_local(query, candidate, cfg.max_matches, cfg.mutual_check)
    matches = ratio_prune(matches, cfg.ratio_tau, cfg.ratio_samples, rng)
    return ransac_register(matches, cfg.inlier_threshold, cfg.confidence,
                           cfg.max_iterations, rng)


def global_pose(candidate_pose, relative):
    """World pose of the query from its candidate's world pose."""
    # type: (RigidTransform, RigidTransform) -> RigidTransform

    return candidate_pose.compose(relative)


class RegistrationRecord(collections.namedtuple(
        "RegistrationRecord",
        "query_id candidate_id estimate rte rre success")):
    """Registration of one query with its error against ground truth."""

    __slots__ = ()

    def to_json(self):
        """Return a JSON-ready record."""
        # type: () -> dict

        record = {"query": self.query_id, "candidate": self.candidate_id,
                  "rte": self.rte, "rre": self.rre,
                  "success": bool(self.success)}
        record.update(self.estimate.to_json())
        return record


LocalizationSummary = collections.namedtuple(
    "LocalizationSummary", "success_rate mean_rte mean_rre count")


def summarize_localization(records):
    """
    Success rate in percent and mean errors of the successful records.

    :param list records: Objects with ``rte``, ``rre`` and ``success``.
    """
    # type: (list) -> LocalizationSummary

    records = list(records)
    if not records:
        return LocalizationSummary(0.0, math.nan, math.nan, 0)
    good = [r for r in records if r.success]
    rate = 100.0 * len(good) / len(records)
    if not good:
        return LocalizationSummary(rate, math.nan, math.nan, len(records))
    return LocalizationSummary(rate,
                               float(np.mean([r.rte for r in good])),
                               float(np.mean([r.rre for r in good])),
                               len(records))
