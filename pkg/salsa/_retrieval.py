# coding: utf-8
"""Descriptor database, exact nearest-neighbor search and recall metrics."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "DATABASE_MAGIC",
    "RetrievalConfig",
    "WhiteningConfig",
    "DescriptorDatabase",
    "QueryResult",
    "RetrievalMetrics",
    "fit_database_whitener",
    "eligible_queries",
    "first_hit_ranks",
    "recall_at_k",
    "mrr",
    "f1_max",
    "recall_curve",
    "evaluate_retrieval",
]

import collections
import csv
import dataclasses
import io
import logging
import struct

import numpy as np

from ._backbone import LocalDescriptorSet
from ._geometry import RigidTransform
from ._numeric import fit_pca_whitener
from .errors import (CheckpointError, ConfigError, DomainError, DuplicateEntry,
                     ShapeError, UnknownEntry)


log = logging.getLogger(__name__)

DATABASE_MAGIC = b"SALSAdb"

_HEADER = struct.Struct("<II")
_ID_LENGTH = struct.Struct("<H")
_OFFSET = struct.Struct("<q")


@dataclasses.dataclass
class RetrievalConfig(object):
    """Search depth and evaluation settings."""

    top_k: int = 25
    recall_ks: tuple = (1, 5)
    radii: tuple = (5.0, 20.0)
    mrr_depth: int = 25

    def validate(self):
        """Raise :class:`ConfigError` for invalid settings."""
        # type: () -> None

        if self.top_k < 1 or self.mrr_depth < 1 or not self.recall_ks:
            raise ConfigError("retrieval depths must be positive")
        if min(self.recall_ks) < 1 or max(self.recall_ks) > self.top_k:
            raise ConfigError("retrieval.recall_ks must lie in [1, top_k]")
        if not self.radii or min(self.radii) <= 0:
            raise ConfigError("retrieval.radii must be positive")


@dataclasses.dataclass
class WhiteningConfig(object):
    """PCA whitening fitted on the database descriptors."""

    enabled: bool = True
    dim: int = 512
    eps: float = 1e-8

    def validate(self):
        """Raise :class:`ConfigError` for invalid settings."""
        # type: () -> None

        if self.dim < 1 or self.eps <= 0:
            raise ConfigError("whitening.dim and whitening.eps must be "
                              "positive")


class QueryResult(collections.namedtuple(
        "QueryResult", "ids distances query_id")):
    """Database ids ranked by ascending descriptor distance."""

    __slots__ = ()

    def __new__(cls, ids, distances, query_id=None):
        return super(QueryResult, cls).__new__(
            cls, list(ids), [float(d) for d in distances], query_id)

    def __len__(self):
        return len(self.ids)

    def to_json(self):
        """Return a JSON-ready record."""
        # type: () -> dict

        return {"query": self.query_id, "ids": self.ids,
                "distances": self.distances}

    @classmethod
    def from_json(cls, record):
        """Rebuild a result from :meth:`to_json` output."""
        # type: (dict) -> QueryResult

        return cls(record["ids"], record["distances"], record.get("query"))


DatabaseEntry = collections.namedtuple(
    "DatabaseEntry", "id descriptor pose local")


class DescriptorDatabase(object):
    """
    Append-only store of scene descriptors with poses.

    Descriptors are kept as float32, the precision of the file format, so a
    database answers identically before and after a save/load cycle.
    """

    def __init__(self):
        """Create an empty database."""
        # type: () -> None

        self._entries = collections.OrderedDict()
        self._matrix = None
        self._rank = None

    def __repr__(self):
        """Return the database size."""
        # type: () -> str

        return "<descriptordatabase {} entries of dim {}>".format(
            len(self), self.dim)

    def __len__(self):
        return len(self._entries)

    def __contains__(self, entry_id):
        return entry_id in self._entries

    @property
    def dim(self):
        """Return the descriptor length (0 when empty)."""
        # type: () -> int

        if not self._entries:
            return 0
        return next(iter(self._entries.values())).descriptor.shape[0]

    @property
    def ids(self):
        """Return the ids in insertion order."""
        # type: () -> list

        return list(self._entries)

    def entry(self, entry_id):
        """Return the :class:`DatabaseEntry` of `entry_id`."""
        # type: (str) -> DatabaseEntry

        try:
            return self._entries[entry_id]
        except KeyError:
            raise UnknownEntry(entry_id)

    def add(self, entry_id, descriptor, pose, local=None):
        """
        Append an entry.

        :param str entry_id: Unique id.
        :param np.ndarray descriptor: Scene descriptor.
        :param RigidTransform pose: World pose of the scan.
        :param LocalDescriptorSet local: Optional local descriptors.
        :raises DuplicateEntry: When `entry_id` is already present.
        """
        # type: (str, np.ndarray, RigidTransform, LocalDescriptorSet) -> None

        if entry_id in self._entries:
            raise DuplicateEntry(entry_id)
        descriptor = np.asarray(descriptor, dtype=np.float32).reshape(-1)
        if self._entries and descriptor.shape[0] != self.dim:
            raise ShapeError("descriptor of length {} for database dim {}"
                             .format(descriptor.shape[0], self.dim))
        if local is not None:
            local = LocalDescriptorSet(
                local.descriptors.astype(np.float32).astype(np.float64),
                local.positions)
        self._entries[entry_id] = DatabaseEntry(entry_id, descriptor, pose,
                                                local)
        self._matrix = None

    def matrix(self):
        """Return the n x e float64 descriptor matrix."""
        # type: () -> np.ndarray

        if self._matrix is None:
            self._matrix = np.stack([e.descriptor for e in
                                     self._entries.values()]).astype(
                                         np.float64)
            ids = self.ids
            self._rank = np.empty(len(ids), dtype=np.int64)
            self._rank[np.argsort(np.array(ids), kind="stable")] = \
                np.arange(len(ids))
        return self._matrix

    def positions(self):
        """Return an id -> world position mapping."""
        # type: () -> collections.OrderedDict

        return collections.OrderedDict(
            (i, e.pose.translation) for i, e in self._entries.items())

    def knn(self, query, k, query_id=None):
        """
        Exact `k` nearest entries by L2 distance.

        Equal distances are ordered by id.

        :param np.ndarray query: Descriptor of length :attr:`dim`.
        :param int k: Number of results; clipped to the database size.
        """
        # type: (np.ndarray, int, str) -> QueryResult

        if not self._entries:
            raise DomainError("knn", "the database is empty")
        if k < 1:
            raise DomainError("knn", "k must be at least 1, got {}".format(k))
        matrix = self.matrix()
        query = np.asarray(query, dtype=np.float64).reshape(-1)
        if query.shape[0] != matrix.shape[1]:
            raise ShapeError("query of length {} for database dim {}".format(
                query.shape[0], matrix.shape[1]))
        distances = np.linalg.norm(matrix - query, axis=1)
        order = np.lexsort((self._rank, distances))[:k]
        ids = self.ids
        return QueryResult([ids[i] for i in order], distances[order],
                           query_id)

    def whitened(self, whitener):
        """Return a copy with whitened, re-normalized descriptors."""
        # type: (PCAWhitener) -> DescriptorDatabase

        out = DescriptorDatabase()
        for e in self._entries.values():
            values = whitener.transform(e.descriptor.astype(np.float64))
            values = values / max(np.linalg.norm(values), 1e-12)
            out.add(e.id, values, e.pose, e.local)
        return out

    def save(self, filesystem, path):
        """
        Write the database in the little-endian ``SALSAdb`` layout.

        Header: magic, descriptor length, entry count. Per entry: UTF-8 id
        with a uint16 length, 12 float64 pose values, float32 descriptor and
        the int64 file offset of the local descriptor blob (-1 when absent).
        Blobs follow the entries: uint32 N and d, N x 3 float64 positions and
        N x d float32 descriptors.
        """
        # type: (FS, str) -> None

        entries = list(self._entries.values())
        encoded = [e.id.encode("utf-8") for e in entries]
        offset = len(DATABASE_MAGIC) + _HEADER.size + sum(
            _ID_LENGTH.size + len(name) + 12 * 8 + 4 * self.dim
            + _OFFSET.size for name in encoded)

        head, blobs = io.BytesIO(), io.BytesIO()
        head.write(DATABASE_MAGIC)
        head.write(_HEADER.pack(self.dim, len(entries)))
        for e, name in zip(entries, encoded):
            head.write(_ID_LENGTH.pack(len(name)))
            head.write(name)
            head.write(e.pose.as_matrix34().astype("<f8").tobytes())
            head.write(e.descriptor.astype("<f4").tobytes())
            if e.local is None:
                head.write(_OFFSET.pack(-1))
                continue
            head.write(_OFFSET.pack(offset + blobs.tell()))
            blobs.write(_HEADER.pack(*e.local.descriptors.shape))
            blobs.write(e.local.positions.astype("<f8").tobytes())
            blobs.write(e.local.descriptors.astype("<f4").tobytes())
        filesystem.writebytes(path, head.getvalue() + blobs.getvalue())
        log.debug("wrote database of %d entries to %s", len(entries), path)

    @classmethod
    def load(cls, filesystem, path):
        """
        Read a database written by :meth:`save`.

        :raises fs.errors.ResourceNotFound: When `path` does not exist.
        :raises CheckpointError: For a malformed file.
        """
        # type: (FS, str) -> DescriptorDatabase

        data = filesystem.readbytes(path)
        if not data.startswith(DATABASE_MAGIC):
            raise CheckpointError(path, "bad magic")
        try:
            return cls._parse(data, path)
        except (struct.error, ValueError) as error:
            raise CheckpointError(path, "truncated ({})".format(error))

    @classmethod
    def _parse(cls, data, path):
        pos = len(DATABASE_MAGIC)
        dim, count = _HEADER.unpack_from(data, pos)
        pos += _HEADER.size
        db = cls()
        for _ in range(count):
            (size,) = _ID_LENGTH.unpack_from(data, pos)
            pos += _ID_LENGTH.size
            entry_id = data[pos:pos + size].decode("utf-8")
            pos += size
            pose = np.frombuffer(data, "<f8", 12, pos).reshape(3, 4)
            pos += 12 * 8
            descriptor = np.frombuffer(data, "<f4", dim, pos)
            pos += 4 * dim
            (offset,) = _OFFSET.unpack_from(data, pos)
            pos += _OFFSET.size
            local = None
            if offset >= 0:
                n, d = _HEADER.unpack_from(data, offset)
                start = offset + _HEADER.size
                positions = np.frombuffer(data, "<f8", 3 * n, start)
                values = np.frombuffer(data, "<f4", n * d, start + 24 * n)
                local = LocalDescriptorSet(values.reshape(n, d),
                                           positions.reshape(n, 3))
            db.add(entry_id, descriptor,
                   RigidTransform.from_matrix34(pose), local)
        return db


def fit_database_whitener(db, cfg):
    """
    Fit PCA whitening on the descriptors of `db`.

    The output dimension is clamped to ``len(db) - 1`` and to the
    descriptor length.

    :param DescriptorDatabase db: Database of unwhitened descriptors.
    :param WhiteningConfig cfg: Target dimension and eigenvalue floor.
    """
    # type: (DescriptorDatabase, WhiteningConfig) -> PCAWhitener

    if len(db) < 2:
        raise ShapeError("whitening needs at least two database entries")
    dim = min(cfg.dim, db.dim, len(db) - 1)
    if dim < cfg.dim:
        log.warning("whitening dimension clamped from %d to %d (%d entries "
                    "of length %d)", cfg.dim, dim, len(db), db.dim)
    return fit_pca_whitener(db.matrix(), dim, cfg.eps)


def _as_positions(positions):
    return np.asarray(positions, dtype=np.float64).reshape(-1, 3)


def eligible_queries(query_positions, db_positions, radius):
    """
    Mask of the queries having a database entry within `radius`.

    :param query_positions: Q x 3 positions.
    :param dict db_positions: id -> position of every database entry.
    """
    # type: (np.ndarray, dict, float) -> np.ndarray

    query_positions = _as_positions(query_positions)
    if not db_positions:
        return np.zeros(len(query_positions), dtype=bool)
    stacked = np.stack(list(db_positions.values()))
    return np.array([
        bool(np.any(np.linalg.norm(stacked - q, axis=1) <= radius))
        for q in query_positions], dtype=bool)


def first_hit_ranks(results, query_positions, db_positions, radius,
                    depth=None):
    """
    1-based rank of the first retrieval within `radius` of every query.

    Zero means no hit within the first `depth` results.
    """
    # type: (list, np.ndarray, dict, float, int) -> np.ndarray

    query_positions = _as_positions(query_positions)
    ranks = np.zeros(len(results), dtype=np.int64)
    for q, (result, position) in enumerate(zip(results, query_positions)):
        for rank, entry_id in enumerate(result.ids[:depth], 1):
            if np.linalg.norm(db_positions[entry_id] - position) <= radius:
                ranks[q] = rank
                break
    return ranks


def recall_at_k(results, query_positions, db_positions, k, radius):
    """
    Percent of eligible queries with a correct retrieval among the top `k`.

    Queries without any database entry within `radius` are excluded.
    """
    # type: (list, np.ndarray, dict, int, float) -> float

    eligible = eligible_queries(query_positions, db_positions, radius)
    if not eligible.any():
        return 0.0
    ranks = first_hit_ranks(results, query_positions, db_positions, radius,
                            k)[eligible]
    return 100.0 * float(np.mean(ranks > 0))


def mrr(results, query_positions, db_positions, radius, depth=25):
    """
    Mean reciprocal rank of the first correct retrieval, in percent.

    Queries without a hit in the first `depth` results contribute 0.
    """
    # type: (list, np.ndarray, dict, float, int) -> float

    eligible = eligible_queries(query_positions, db_positions, radius)
    if not eligible.any():
        return 0.0
    ranks = first_hit_ranks(results, query_positions, db_positions, radius,
                            depth)[eligible]
    reciprocal = np.where(ranks > 0, 1.0 / np.maximum(ranks, 1), 0.0)
    return 100.0 * float(np.mean(reciprocal))


def f1_max(results, query_positions, db_positions, radius):
    """
    Best F1 score over thresholds on the top-1 descriptor distance.

    A query is predicted as a revisit when its top-1 distance is below the
    threshold; the prediction is a true positive when the top-1 entry lies
    within `radius`. Recall is taken over the eligible queries.

    :return: F1max in ``[0, 1]``.
    """
    # type: (list, np.ndarray, dict, float) -> float

    query_positions = _as_positions(query_positions)
    eligible = eligible_queries(query_positions, db_positions, radius)
    if not eligible.any() or not results:
        return 0.0
    top = np.array([r.distances[0] for r in results])
    correct = first_hit_ranks(results, query_positions, db_positions,
                              radius, 1) == 1
    best = 0.0
    for threshold in np.unique(top):
        predicted = top <= threshold
        tp = int(np.sum(predicted & correct))
        if tp == 0:
            continue
        precision = tp / float(np.sum(predicted))
        recall = tp / float(np.sum(eligible))
        best = max(best, 2.0 * precision * recall / (precision + recall))
    return best


def recall_curve(results, query_positions, db_positions, radius, depth=25):
    """Return ``[(k, recall@k)]`` for ``k = 1..depth``."""
    # type: (list, np.ndarray, dict, float, int) -> list

    eligible = eligible_queries(query_positions, db_positions, radius)
    if not eligible.any():
        return [(k, 0.0) for k in range(1, depth + 1)]
    ranks = first_hit_ranks(results, query_positions, db_positions, radius,
                            depth)[eligible]
    return [(k, 100.0 * float(np.mean((ranks > 0) & (ranks <= k))))
            for k in range(1, depth + 1)]


class RetrievalMetrics(object):
    """
    Recall@k, MRR and F1max per correctness radius.

    :param dict recall_at: radius -> {k: percent}.
    :param dict mrr: radius -> percent.
    :param dict f1_max: radius -> F1max in [0, 1].
    :param dict excluded: radius -> number of queries without ground truth.
    :param int num_queries: Number of evaluated queries.
    """

    def __init__(self, recall_at, mrr, f1_max, excluded, num_queries):
        """Store the metric tables."""
        # type: (dict, dict, dict, dict, int) -> None

        self.recall_at = recall_at
        self.mrr = mrr
        self.f1_max = f1_max
        self.excluded = excluded
        self.num_queries = num_queries

    def __repr__(self):
        """Return the Recall@1 values."""
        # type: () -> str

        return "<retrievalmetrics {}>".format(", ".join(
            "R@1({}m)={:.2f}".format(r, v.get(1, float("nan")))
            for r, v in self.recall_at.items()))

    def rows(self):
        """Return ``(metric, k, radius, value)`` rows; k is blank if unused."""
        # type: () -> list

        rows = []
        for radius in self.recall_at:
            for k, value in self.recall_at[radius].items():
                rows.append(("recall", k, radius, value))
            rows.append(("mrr", "", radius, self.mrr[radius]))
            rows.append(("f1max", "", radius, self.f1_max[radius]))
            rows.append(("excluded", "", radius, self.excluded[radius]))
        return rows

    def to_csv(self):
        """Return the metrics as ``metric,k,radius,value`` CSV text."""
        # type: () -> str

        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(("metric", "k", "radius", "value"))
        for metric, k, radius, value in self.rows():
            writer.writerow((metric, k, repr(float(radius)),
                             repr(value) if isinstance(value, float)
                             else value))
        return buffer.getvalue()

    def to_json(self):
        """Return a JSON-ready mapping."""
        # type: () -> dict

        return {
            "num_queries": self.num_queries,
            "radii": {
                repr(float(radius)): {
                    "recall_at": {str(k): v for k, v in
                                  self.recall_at[radius].items()},
                    "mrr": self.mrr[radius],
                    "f1_max": self.f1_max[radius],
                    "excluded": self.excluded[radius],
                }
                for radius in self.recall_at
            },
        }


def evaluate_retrieval(results, query_positions, db_positions, ks=(1, 5),
                       radii=(5.0, 20.0), depth=25):
    """
    Compute every retrieval metric for each radius.

    :param list results: One :class:`QueryResult` per query.
    :param query_positions: Q x 3 query positions.
    :param dict db_positions: id -> position of every database entry.
    """
    # type: (list, np.ndarray, dict, tuple, tuple, int) -> RetrievalMetrics

    query_positions = _as_positions(query_positions)
    recall, reciprocal, f1, excluded = (collections.OrderedDict()
                                        for _ in range(4))
    for radius in radii:
        recall[radius] = collections.OrderedDict(
            (k, recall_at_k(results, query_positions, db_positions, k,
                            radius)) for k in ks)
        reciprocal[radius] = mrr(results, query_positions, db_positions,
                                 radius, depth)
        f1[radius] = f1_max(results, query_positions, db_positions, radius)
        excluded[radius] = int(np.sum(~eligible_queries(
            query_positions, db_positions, radius)))
        if excluded[radius]:
            log.info("%d queries without ground truth within %.1f m",
                     excluded[radius], radius)
    return RetrievalMetrics(recall, reciprocal, f1, excluded, len(results))
