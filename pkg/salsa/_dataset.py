# coding: utf-8
"""KITTI-layout scan datasets and the synthetic scene generator.

A dataset directory holds ``velodyne/<id>.bin`` scans (little-endian float32
``x, y, z, intensity`` records), ``poses.txt`` with one row-major 3x4 world
pose per scan in sorted id order, an optional ``times.txt`` and an optional
``split.json`` listing the ``database`` and ``query`` ids.
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
    "SCAN_DIR",
    "POSES_FILE",
    "TIMES_FILE",
    "SPLIT_FILE",
    "NEIGHBORS_FILE",
    "ROTATION_REPAIR_TOL",
    "ScanRecord",
    "ScanDataset",
    "load_scan",
    "write_scan",
    "load_poses",
    "write_poses",
    "generate_synthetic",
]

import collections
import logging
import math

import numpy as np
from fs.path import join, splitext
from scipy.spatial import cKDTree

from ._geometry import PointCloud, RigidTransform
from ._util import dump_json, ensure_fs, load_json
from .errors import (ConfigError, PoseFormatError, ScanFormatError,
                     UnknownEntry)


log = logging.getLogger(__name__)

SCAN_DIR = "velodyne"
POSES_FILE = "poses.txt"
TIMES_FILE = "times.txt"
SPLIT_FILE = "split.json"
NEIGHBORS_FILE = "neighbors.json"

#: Largest deviation of ``R^T R`` from identity still repaired on load.
ROTATION_REPAIR_TOL = 1e-3

_RECORD = 16


def load_scan(filesystem, path):
    """
    Read a velodyne scan.

    :param fs.base.FS filesystem: Filesystem holding the scan.
    :param str path: Path of the ``.bin`` file.
    :raises ScanFormatError: For empty files, sizes that are not a multiple
                             of 16 bytes or non-finite values; the error
                             carries the byte offset of the problem.
    """
    # type: (FS, str) -> PointCloud

    data = filesystem.readbytes(path)
    if not data:
        raise ScanFormatError(path, 0, "empty scan")
    if len(data) % _RECORD:
        raise ScanFormatError(path, len(data) - len(data) % _RECORD,
                              "{} trailing bytes".format(len(data) % _RECORD))
    values = np.frombuffer(data, dtype="<f4")
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise ScanFormatError(path, int(bad[0]) * 4, "non-finite value")
    records = values.reshape(-1, 4).astype(np.float64)
    return PointCloud(records[:, :3], records[:, 3])


def write_scan(filesystem, path, cloud):
    """Write `cloud` as float32 records; missing intensities become 0."""
    # type: (FS, str, PointCloud) -> None

    records = np.empty((len(cloud), 4), dtype="<f4")
    records[:, :3] = cloud.points
    records[:, 3] = cloud.intensities()
    filesystem.writebytes(path, records.tobytes())


def _repair_rotation(rotation):
    """Project a nearly orthonormal matrix onto SO(3), or return None."""
    # type: (np.ndarray) -> np.ndarray

    deviation = np.abs(rotation.T @ rotation - np.eye(3)).max()
    if deviation > ROTATION_REPAIR_TOL or np.linalg.det(rotation) <= 0:
        return None
    u, _, vt = np.linalg.svd(rotation)
    return u @ vt


def load_poses(filesystem, path):
    """
    Read a KITTI odometry pose file.

    Every non-empty line holds the 12 values of a row-major 3x4 ``[R|t]``
    matrix. Rotations within :data:`ROTATION_REPAIR_TOL` of orthonormal are
    re-orthonormalized.

    :raises PoseFormatError: With the 1-based line number of a bad line.
    """
    # type: (FS, str) -> list

    poses = []
    for number, line in enumerate(filesystem.readtext(path).splitlines(), 1):
        tokens = line.split()
        if not tokens:
            continue
        if len(tokens) != 12:
            raise PoseFormatError(path, number, "expected 12 values, got {}"
                                  .format(len(tokens)))
        try:
            matrix = np.array([float(t) for t in tokens]).reshape(3, 4)
        except ValueError as error:
            raise PoseFormatError(path, number, str(error))
        if not np.all(np.isfinite(matrix)):
            raise PoseFormatError(path, number, "non-finite value")
        rotation = _repair_rotation(matrix[:, :3])
        if rotation is None:
            raise PoseFormatError(path, number, "invalid rotation")
        poses.append(RigidTransform(rotation, matrix[:, 3]))
    return poses


def write_poses(filesystem, path, poses):
    """Write poses one per line with round-trip float precision."""
    # type: (FS, str, list) -> None

    lines = [" ".join(repr(float(v)) for v in p.as_matrix34().reshape(-1))
             for p in poses]
    filesystem.writetext(path, "\n".join(lines) + "\n")


ScanRecord = collections.namedtuple("ScanRecord", "id path pose timestamp")
ScanRecord.__new__.__defaults__ = (None,)
ScanRecord.__doc__ = """A scan identifier, its file path, world pose and
optional timestamp."""


class ScanDataset(object):
    """
    Scans with world poses and a database/query split.

    Clouds are read from `filesystem` on demand, or served from `clouds`
    for in-memory datasets.

    :param list records: :class:`ScanRecord` entries.
    :param dict clouds: Optional id -> :class:`PointCloud`.
    :param fs.base.FS filesystem: Filesystem the record paths refer to.
    :param dict split: Optional ``{"database": [...], "query": [...]}``.
    """

    def __init__(self, records, clouds=None, filesystem=None, split=None):
        """Create the dataset."""
        # type: (list, dict, FS, dict) -> None

        self.records = collections.OrderedDict((r.id, r) for r in records)
        self.clouds = dict(clouds or {})
        self.filesystem = filesystem
        ids = list(self.records)
        split = split or {"database": ids, "query": ids}
        for scan_id in list(split["database"]) + list(split["query"]):
            if scan_id not in self.records:
                raise UnknownEntry(scan_id)
        self.database_ids = list(split["database"])
        self.query_ids = list(split["query"])

    def __repr__(self):
        """Return the dataset size."""
        # type: () -> str

        return "<scandataset {} scans>".format(len(self))

    def __len__(self):
        return len(self.records)

    def __contains__(self, scan_id):
        return scan_id in self.records

    @property
    def ids(self):
        """Return every scan id in dataset order."""
        # type: () -> list

        return list(self.records)

    def record(self, scan_id):
        """Return the :class:`ScanRecord` of `scan_id`."""
        # type: (str) -> ScanRecord

        try:
            return self.records[scan_id]
        except KeyError:
            raise UnknownEntry(scan_id)

    def pose(self, scan_id):
        """Return the world pose of `scan_id`."""
        # type: (str) -> RigidTransform

        return self.record(scan_id).pose

    def positions(self, ids=None):
        """Return the len(ids) x 3 sensor positions."""
        # type: (list) -> np.ndarray

        ids = self.ids if ids is None else ids
        if not ids:
            return np.zeros((0, 3))
        return np.stack([self.pose(i).translation for i in ids])

    def load(self, scan_id):
        """Return the cloud of `scan_id` in its sensor frame."""
        # type: (str) -> PointCloud

        if scan_id in self.clouds:
            return self.clouds[scan_id]
        return load_scan(self.filesystem, self.record(scan_id).path)

    def relative_pose(self, source_id, target_id):
        """Return the transform from the `source_id` frame to `target_id`."""
        # type: (str, str) -> RigidTransform

        return self.pose(target_id).inverse().compose(self.pose(source_id))

    def neighbor_lists(self, radius, ids=None, candidates=None):
        """
        Map every id to the other ids within `radius` meters.

        :param float radius: Inclusive distance bound.
        :param list ids: Ids to search for (all by default).
        :param list candidates: Ids searched (all by default).
        """
        # type: (float, list, list) -> collections.OrderedDict

        ids = self.ids if ids is None else ids
        candidates = self.ids if candidates is None else candidates
        neighbors = collections.OrderedDict((i, []) for i in ids)
        if not candidates:
            return neighbors
        tree = cKDTree(self.positions(candidates))
        for scan_id, hits in zip(ids, tree.query_ball_point(
                self.positions(ids), radius)):
            neighbors[scan_id] = [candidates[h] for h in sorted(hits)
                                  if candidates[h] != scan_id]
        return neighbors

    @classmethod
    def open(cls, location):
        """
        Open a dataset directory.

        :param location: FS object, FS URL or directory path.
        :raises fs.errors.ResourceNotFound: For a missing scan directory or
                                            pose file.
        """
        # type: (object) -> ScanDataset

        filesystem = ensure_fs(location)
        names = sorted(n for n in filesystem.listdir(SCAN_DIR)
                       if n.endswith(".bin"))
        poses = load_poses(filesystem, POSES_FILE)
        if len(poses) != len(names):
            raise PoseFormatError(POSES_FILE, len(poses),
                                  "{} poses for {} scans".format(
                                      len(poses), len(names)))
        times = [None] * len(names)
        if filesystem.exists(TIMES_FILE):
            times = [float(t) for t in
                     filesystem.readtext(TIMES_FILE).split()]
        records = [ScanRecord(splitext(n)[0], join(SCAN_DIR, n), p, t)
                   for n, p, t in zip(names, poses, times)]
        split = None
        if filesystem.exists(SPLIT_FILE):
            split = load_json(filesystem, SPLIT_FILE)
        log.info("opened dataset with %d scans", len(records))
        return cls(records, filesystem=filesystem, split=split)

    def save(self, location, neighbors=None):
        """
        Write the dataset in the directory layout read by :meth:`open`.

        :param location: FS object, FS URL or directory path.
        :param dict neighbors: Optional ground-truth neighbor lists.
        """
        # type: (object, dict) -> None

        filesystem = ensure_fs(location, create=True)
        filesystem.makedirs(SCAN_DIR, recreate=True)
        for scan_id in self.ids:
            write_scan(filesystem, join(SCAN_DIR, scan_id + ".bin"),
                       self.load(scan_id))
        write_poses(filesystem, POSES_FILE,
                    [self.pose(i) for i in self.ids])
        stamps = [r.timestamp for r in self.records.values()]
        if all(t is not None for t in stamps):
            filesystem.writetext(
                TIMES_FILE, "".join("{!r}\n".format(t) for t in stamps))
        dump_json(filesystem, SPLIT_FILE,
                  {"database": self.database_ids, "query": self.query_ids})
        if neighbors is not None:
            dump_json(filesystem, NEIGHBORS_FILE, neighbors)


def _scene_model(rng, center, clusters, extent):
    """Random landmark clusters around `center` (world frame)."""
    # type: (np.random.Generator, np.ndarray, int, float) -> tuple

    radius = extent * np.sqrt(rng.uniform(0.05, 1.0, clusters))
    angle = rng.uniform(-math.pi, math.pi, clusters)
    means = np.stack([center[0] + radius * np.cos(angle),
                      center[1] + radius * np.sin(angle),
                      rng.uniform(-1.0, 3.0, clusters)], axis=1)
    spreads = rng.uniform(0.3, 1.5, (clusters, 3))
    shades = rng.uniform(0.0, 1.0, clusters)
    return means, spreads, shades


def _sample_scene(rng, model, n):
    """Draw `n` world points and intensities from a scene model."""
    # type: (np.random.Generator, tuple, int) -> tuple

    means, spreads, shades = model
    which = rng.integers(0, means.shape[0], n)
    points = means[which] + rng.normal(size=(n, 3)) * spreads[which]
    intensity = np.clip(shades[which] + rng.normal(0.0, 0.05, n), 0.0, 1.0)
    return points, intensity


def generate_synthetic(num_scenes=20, points_per_scene=1024, overlap=0.8,
                       noise=0.02, seed=0, place_spacing=40.0,
                       revisit_offset=2.0, clusters=16, extent=25.0,
                       revisit_yaw_deg=30.0):
    """
    Build a synthetic dataset with two scans per place.

    Places lie `place_spacing` meters apart along the x axis. Each place is
    a random set of landmark clusters. The first scan of a place is the
    database scan; the revisit scan is taken from a pose at most
    `revisit_offset` meters away and turned by at most `revisit_yaw_deg`
    degrees from the first heading. It keeps a fraction `overlap` of the
    original world points, resamples the rest from the same clusters and
    adds Gaussian noise of `noise` meters.

    :return: ``(dataset, neighbors)`` where `neighbors` maps every query id
             to the database ids within 5 m.
    """
    # type: (int, int, float, float, int, float, float, int, float, float) -> tuple  # noqa: E501

    if num_scenes < 1 or points_per_scene < 1:
        raise ConfigError("need at least one scene and one point per scene")
    if not 0.0 <= overlap <= 1.0:
        raise ConfigError("overlap must lie in [0, 1], got {}".format(
            overlap))
    if not 0.0 <= revisit_yaw_deg <= 180.0:
        raise ConfigError("revisit yaw must lie in [0, 180] degrees, got "
                          "{}".format(revisit_yaw_deg))

    rng = np.random.default_rng(seed)
    records, clouds = [], {}
    database, queries = [], []
    for place in range(num_scenes):
        center = np.array([place * place_spacing, 0.0, 0.0])
        model = _scene_model(rng, center, clusters, extent)
        world, intensity = _sample_scene(rng, model, points_per_scene)

        heading = rng.uniform(-math.pi, math.pi)
        first = RigidTransform.from_yaw(heading, center)
        offset = revisit_offset * math.sqrt(rng.uniform()) * np.array(
            [math.cos(heading + 1.0), math.sin(heading + 1.0), 0.0])
        turn = math.radians(revisit_yaw_deg)
        second = RigidTransform.from_yaw(heading + rng.uniform(-turn, turn),
                                         center + offset)

        revisit, revisit_intensity = world.copy(), intensity.copy()
        fresh = rng.uniform(size=points_per_scene) >= overlap
        if fresh.any():
            revisit[fresh], revisit_intensity[fresh] = _sample_scene(
                rng, model, int(fresh.sum()))

        for index, (pose, pts, shade) in enumerate(
                ((first, world, intensity),
                 (second, revisit, revisit_intensity))):
            scan_id = "{:06d}".format(2 * place + index)
            local = pose.inverse().apply(pts)
            if noise > 0:
                local = local + rng.normal(0.0, noise, local.shape)
            clouds[scan_id] = PointCloud(local, shade)
            records.append(ScanRecord(scan_id,
                                      join(SCAN_DIR, scan_id + ".bin"),
                                      pose, 0.1 * (2 * place + index)))
            (database if index == 0 else queries).append(scan_id)

    dataset = ScanDataset(records, clouds,
                          split={"database": database, "query": queries})
    neighbors = dataset.neighbor_lists(5.0, queries, database)
    log.debug("generated %d places with %d points each", num_scenes,
              points_per_scene)
    return dataset, neighbors
