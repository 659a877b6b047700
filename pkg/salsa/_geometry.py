# coding: utf-8
"""Point clouds, window partitions, voxel grids and rigid transforms."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "PointCloud",
    "SphericalCoord",
    "WindowIndex",
    "RigidTransform",
    "VoxelGrid",
    "to_spherical",
    "spherical_coordinates",
    "radial_window_index",
    "radial_window_indices",
    "cubic_window_index",
    "cubic_window_indices",
    "group_labels",
    "voxelize",
    "kabsch",
    "apply_transform",
    "pose_error",
]

import collections
import math

import numpy as np

from .errors import (ConfigError, DegenerateInputError, DomainError,
                     NonFiniteError, ShapeError)


ORTHONORMAL_TOL = 1e-9
DEGENERATE_SINGULAR_VALUE = 1e-12


class PointCloud(object):
    """
    An N x 3 set of positions in meters with optional intensities.

    :param points: Array of shape (N, 3), N >= 1.
    :param intensity: Optional array of length N.
    """

    __slots__ = ("points", "intensity")

    def __init__(self, points, intensity=None):
        """Validate and store the cloud arrays."""
        # type: (np.ndarray, np.ndarray) -> None

        points = np.asarray(points, dtype=np.float64)
        if points.ndim != 2 or points.shape[1] != 3 or points.shape[0] < 1:
            raise ShapeError("point cloud of shape {}".format(points.shape))
        if not np.all(np.isfinite(points)):
            raise NonFiniteError("point coordinates")
        if intensity is not None:
            intensity = np.asarray(intensity, dtype=np.float64).reshape(-1)
            if intensity.shape[0] != points.shape[0]:
                raise ShapeError("{} intensities for {} points".format(
                    intensity.shape[0], points.shape[0]))
        self.points = points
        self.intensity = intensity

    def __len__(self):
        """Return the number of points."""
        # type: () -> int

        return self.points.shape[0]

    def __repr__(self):
        """Return a short description of the cloud."""
        # type: () -> str

        return "<pointcloud {} points>".format(len(self))

    def intensities(self):
        """Return the intensities, zeros when the cloud has none."""
        # type: () -> np.ndarray

        if self.intensity is None:
            return np.zeros(len(self))
        return self.intensity

    def subset(self, index):
        """Return the cloud restricted to `index` (mask or indices)."""
        # type: (np.ndarray) -> PointCloud

        intensity = None if self.intensity is None else self.intensity[index]
        return PointCloud(self.points[index], intensity)


SphericalCoord = collections.namedtuple("SphericalCoord", "r alpha beta")
SphericalCoord.__doc__ = """Range, azimuth in [-pi, pi) and polar angle
in [0, pi] measured from +z."""


def _spherical_to_cartesian(self):
    """Return the Cartesian position of the coordinate."""
    # type: () -> np.ndarray

    sin_beta = math.sin(self.beta)
    return np.array([self.r * sin_beta * math.cos(self.alpha),
                     self.r * sin_beta * math.sin(self.alpha),
                     self.r * math.cos(self.beta)])


SphericalCoord.to_cartesian = _spherical_to_cartesian

WindowIndex = collections.namedtuple("WindowIndex", "kind indices")


def spherical_coordinates(points):
    """
    Convert an N x 3 array to (r, alpha, beta) columns.

    The origin maps to (0, 0, 0); ``alpha = pi`` is folded onto ``-pi``.

    :param np.ndarray points: Cartesian positions.
    """
    # type: (np.ndarray) -> np.ndarray

    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    r = np.linalg.norm(points, axis=1)
    alpha = np.arctan2(points[:, 1], points[:, 0])
    alpha = np.where(alpha >= np.pi, alpha - 2.0 * np.pi, alpha)
    safe_r = np.where(r > 0.0, r, 1.0)
    beta = np.where(
        r > 0.0, np.arccos(np.clip(points[:, 2] / safe_r, -1.0, 1.0)), 0.0)
    return np.stack([r, alpha, beta], axis=1)


def to_spherical(p):
    """
    Convert one Cartesian point to spherical coordinates.

    :param p: 3-vector in meters.
    """
    # type: (np.ndarray) -> SphericalCoord

    r, alpha, beta = spherical_coordinates(p)[0]
    return SphericalCoord(float(r), float(alpha), float(beta))


def radial_window_indices(points, dalpha, dbeta):
    """
    Radial window index ``(floor(alpha/dalpha), floor(beta/dbeta))`` per row.

    The range does not take part in the index, so points on one ray share
    a window.

    :param np.ndarray points: N x 3 positions.
    :param float dalpha: Azimuth window size in radians.
    :param float dbeta: Polar window size in radians.
    """
    # type: (np.ndarray, float, float) -> np.ndarray

    if dalpha <= 0 or dbeta <= 0:
        raise ConfigError("radial window sizes must be positive, got "
                          "{} x {}".format(dalpha, dbeta))
    sph = spherical_coordinates(points)
    return np.stack([np.floor(sph[:, 1] / dalpha),
                     np.floor(sph[:, 2] / dbeta)], axis=1).astype(np.int64)


def radial_window_index(p, dalpha, dbeta):
    """Return the radial :class:`WindowIndex` of a single point."""
    # type: (np.ndarray, float, float) -> WindowIndex

    idx = radial_window_indices(p, dalpha, dbeta)[0]
    return WindowIndex("radial", tuple(int(i) for i in idx))


def cubic_window_indices(points, delta):
    """
    Cubic window index ``floor(xyz / delta)`` per row.

    :param np.ndarray points: N x 3 positions.
    :param float delta: Cube edge in meters.
    """
    # type: (np.ndarray, float) -> np.ndarray

    if delta <= 0:
        raise ConfigError("cubic window size must be positive, got "
                          "{}".format(delta))
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return np.floor(points / delta).astype(np.int64)


def cubic_window_index(p, delta):
    """Return the cubic :class:`WindowIndex` of a single point."""
    # type: (np.ndarray, float) -> WindowIndex

    idx = cubic_window_indices(p, delta)[0]
    return WindowIndex("cubic", tuple(int(i) for i in idx))


def group_labels(indices):
    """
    Map integer index tuples (rows) to dense group labels.

    Labels follow the lexicographic order of the index tuples, so equal
    tuples always get equal labels regardless of row order.

    :param np.ndarray indices: N x m integer array.
    """
    # type: (np.ndarray) -> np.ndarray

    indices = np.asarray(indices, dtype=np.int64)
    _, inverse = np.unique(indices, axis=0, return_inverse=True)
    return inverse.reshape(-1)


VoxelCell = collections.namedtuple(
    "VoxelCell", "centroid intensity count members")


class VoxelGrid(object):
    """
    Points grouped into cubic voxels.

    Cells are ordered by their integer key, so the cell order does not depend
    on the input point order.

    :param float voxel_size: Voxel edge in meters.
    :param np.ndarray keys: V x 3 integer cell keys.
    :param np.ndarray centroids: V x 3 member means.
    :param np.ndarray intensity: V mean intensities.
    :param np.ndarray counts: V member counts.
    :param np.ndarray inverse: N cell index of every input point.
    """

    def __init__(self, voxel_size, keys, centroids, intensity, counts,
                 inverse):
        """Store the grid arrays."""
        # type: (float, np.ndarray, np.ndarray, np.ndarray, np.ndarray, np.ndarray) -> None  # noqa: E501

        self.voxel_size = voxel_size
        self.keys = keys
        self.centroids = centroids
        self.intensity = intensity
        self.counts = counts
        self.inverse = inverse

    def __len__(self):
        """Return the number of occupied cells."""
        # type: () -> int

        return self.keys.shape[0]

    def __repr__(self):
        """Return a short description of the grid."""
        # type: () -> str

        return "<voxelgrid {} cells of {} m>".format(len(self),
                                                     self.voxel_size)

    def members(self, cell):
        """Return the sorted point ids of `cell`."""
        # type: (int) -> np.ndarray

        return np.flatnonzero(self.inverse == cell)

    @property
    def cells(self):
        """Return a mapping key triple -> :class:`VoxelCell`."""
        # type: () -> dict

        order = np.argsort(self.inverse, kind="stable")
        split = np.split(order, np.cumsum(self.counts)[:-1])
        return {
            tuple(int(c) for c in self.keys[v]): VoxelCell(
                self.centroids[v], float(self.intensity[v]),
                int(self.counts[v]), split[v])
            for v in range(len(self))
        }


def voxelize(c, size):
    """
    Group the points of `c` into voxels of edge `size`.

    :param PointCloud c: Input cloud.
    :param float size: Voxel edge in meters.
    """
    # type: (PointCloud, float) -> VoxelGrid

    if size <= 0:
        raise ConfigError("voxel size must be positive, got {}".format(size))
    keys = np.floor(c.points / size).astype(np.int64)
    unique, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    counts = np.bincount(inverse, minlength=unique.shape[0])
    sums = np.zeros((unique.shape[0], 3))
    np.add.at(sums, inverse, c.points)
    intensity = np.bincount(inverse, weights=c.intensities(),
                            minlength=unique.shape[0])
    return VoxelGrid(size, unique, sums / counts[:, None],
                     intensity / counts, counts, inverse)


class RigidTransform(object):
    """
    A proper rigid motion ``p -> R p + t``.

    :param np.ndarray rotation: 3 x 3 orthonormal matrix with det +1.
    :param np.ndarray translation: 3-vector in meters.
    """

    __slots__ = ("rotation", "translation")

    def __init__(self, rotation, translation):
        """Validate and store the rotation and translation."""
        # type: (np.ndarray, np.ndarray) -> None

        rotation = np.asarray(rotation, dtype=np.float64)
        translation = np.asarray(translation, dtype=np.float64).reshape(-1)
        if rotation.shape != (3, 3) or translation.shape != (3,):
            raise ShapeError("rotation {} / translation {}".format(
                rotation.shape, translation.shape))
        if not (np.all(np.isfinite(rotation))
                and np.all(np.isfinite(translation))):
            raise NonFiniteError("rigid transform")
        if (np.abs(rotation @ rotation.T - np.eye(3)).max() > ORTHONORMAL_TOL
                or abs(np.linalg.det(rotation) - 1.0) > ORTHONORMAL_TOL):
            raise DomainError("rigid transform",
                              "rotation is not a proper orthonormal matrix")
        self.rotation = rotation
        self.translation = translation

    def __repr__(self):
        """Return the 3x4 matrix representation."""
        # type: () -> str

        return "<rigidtransform {}>".format(
            np.array2string(self.as_matrix34(), precision=4))

    def __eq__(self, other):
        """Compare transforms element by element."""
        # type: (object) -> bool

        return (isinstance(other, RigidTransform)
                and np.array_equal(self.rotation, other.rotation)
                and np.array_equal(self.translation, other.translation))

    def __ne__(self, other):
        return not self == other

    __hash__ = None

    @classmethod
    def identity(cls):
        """Return the identity transform."""
        # type: () -> RigidTransform

        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix34(cls, matrix):
        """Build a transform from a row-major 3x4 ``[R|t]`` matrix."""
        # type: (np.ndarray) -> RigidTransform

        matrix = np.asarray(matrix, dtype=np.float64).reshape(3, 4)
        return cls(matrix[:, :3], matrix[:, 3])

    @classmethod
    def from_yaw(cls, yaw, translation=(0.0, 0.0, 0.0)):
        """Rotation of `yaw` radians about +z followed by `translation`."""
        # type: (float, tuple) -> RigidTransform

        c, s = math.cos(yaw), math.sin(yaw)
        rotation = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
        return cls(rotation, translation)

    def as_matrix34(self):
        """Return the row-major 3x4 ``[R|t]`` matrix."""
        # type: () -> np.ndarray

        return np.hstack([self.rotation, self.translation[:, None]])

    def apply(self, points):
        """Transform an N x 3 array of positions."""
        # type: (np.ndarray) -> np.ndarray

        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotation.T + self.translation

    def compose(self, other):
        """Return ``self o other`` (apply `other` first)."""
        # type: (RigidTransform) -> RigidTransform

        return RigidTransform(self.rotation @ other.rotation,
                              self.rotation @ other.translation
                              + self.translation)

    def inverse(self):
        """Return the inverse transform."""
        # type: () -> RigidTransform

        rt = self.rotation.T
        return RigidTransform(rt, -rt @ self.translation)


def apply_transform(t, c):
    """
    Apply `t` to every point of `c`; intensities are kept.

    :param RigidTransform t: The transform.
    :param PointCloud c: The cloud.
    """
    # type: (RigidTransform, PointCloud) -> PointCloud

    return PointCloud(t.apply(c.points), c.intensity)


def kabsch(src, dst):
    """
    Least-squares rigid transform mapping `src` rows onto `dst` rows.

    Uses the SVD of the cross-covariance with a determinant correction so
    that the result is a proper rotation.

    :param np.ndarray src: M x 3 source positions, M >= 3.
    :param np.ndarray dst: M x 3 target positions.
    :raises DegenerateInputError: For coincident or collinear inputs.
    """
    # type: (np.ndarray, np.ndarray) -> RigidTransform

    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape != dst.shape or src.ndim != 2 or src.shape[1] != 3:
        raise ShapeError("kabsch of {} and {}".format(src.shape, dst.shape))
    if src.shape[0] < 3:
        raise DegenerateInputError("{} correspondences".format(src.shape[0]))

    src_mean = src.mean(axis=0)
    dst_mean = dst.mean(axis=0)
    h = (src - src_mean).T @ (dst - dst_mean)
    u, s, vt = np.linalg.svd(h)
    if s[1] < DEGENERATE_SINGULAR_VALUE:
        raise DegenerateInputError("collinear or coincident points")
    d = 1.0 if np.linalg.det(vt.T @ u.T) > 0 else -1.0
    rotation = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return RigidTransform(rotation, dst_mean - rotation @ src_mean)


def pose_error(est, gt):
    """
    Relative translation (m) and rotation (deg) errors of `est` against `gt`.

    The rotation angle is evaluated with ``atan2`` of the skew and trace
    parts of ``R_gt^T R_est``, which equals the arccos form but keeps full
    precision for tiny angles.

    :param RigidTransform est: Estimated pose.
    :param RigidTransform gt: Ground-truth pose.
    :return: ``(rte, rre)``.
    """
    # type: (RigidTransform, RigidTransform) -> tuple

    relative = gt.inverse().compose(est)
    rte = float(np.linalg.norm(relative.translation))
    r = relative.rotation
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    cos_angle = (np.trace(r) - 1.0) / 2.0
    angle = math.degrees(math.atan2(np.linalg.norm(skew) / 2.0, cos_angle))
    return rte, min(max(angle, 0.0), 180.0)
