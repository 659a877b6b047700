# coding: utf-8
"""Scan files, pose files and dataset layout tests."""

from __future__ import absolute_import
from __future__ import unicode_literals

import numpy as np
import pytest

from salsa import (PointCloud, RigidTransform, ScanDataset, ScanRecord,
                   generate_synthetic, load_poses, load_scan, write_poses,
                   write_scan)
from salsa.errors import ConfigError, PoseFormatError, ScanFormatError

IDENTITY_LINE = "1 0 0 0 0 1 0 0 0 0 1 0"


def test_scan_round_trip(cloud, mem_fs):
    """Scans are stored as float32 records."""
    write_scan(mem_fs, "scan.bin", cloud)
    assert len(mem_fs.readbytes("scan.bin")) == 16 * len(cloud)
    loaded = load_scan(mem_fs, "scan.bin")
    np.testing.assert_allclose(loaded.points, cloud.points, rtol=1e-6)
    np.testing.assert_allclose(loaded.intensity, cloud.intensity, rtol=1e-6)


def test_scan_errors_report_offsets(mem_fs):
    """Malformed scans name the byte offset of the problem."""
    mem_fs.writebytes("empty.bin", b"")
    with pytest.raises(ScanFormatError) as info:
        load_scan(mem_fs, "empty.bin")
    assert info.value.offset == 0

    mem_fs.writebytes("odd.bin", b"\0" * 20)
    with pytest.raises(ScanFormatError) as info:
        load_scan(mem_fs, "odd.bin")
    assert info.value.offset == 16

    values = np.zeros(8, dtype="<f4")
    values[6] = np.nan
    mem_fs.writebytes("nan.bin", values.tobytes())
    with pytest.raises(ScanFormatError) as info:
        load_scan(mem_fs, "nan.bin")
    assert info.value.offset == 24
    assert "nan.bin" in str(info.value)


def test_poses_round_trip(rng, mem_fs):
    """Poses survive the text format exactly."""
    poses = [RigidTransform.from_yaw(rng.uniform(-3, 3),
                                     rng.normal(size=3)) for _ in range(4)]
    write_poses(mem_fs, "poses.txt", poses)
    loaded = load_poses(mem_fs, "poses.txt")
    assert len(loaded) == len(poses)
    for read, written in zip(loaded, poses):
        np.testing.assert_allclose(read.as_matrix34(),
                                   written.as_matrix34(), atol=1e-12)


def test_poses_skip_blank_lines(mem_fs):
    """Empty lines are ignored."""
    mem_fs.writetext("poses.txt", "\n{0}\n\n{0}\n".format(IDENTITY_LINE))
    assert len(load_poses(mem_fs, "poses.txt")) == 2


def test_pose_errors_report_lines(mem_fs):
    """Malformed pose lines are reported by number."""
    mem_fs.writetext("short.txt", "{}\n1 2 3\n".format(IDENTITY_LINE))
    with pytest.raises(PoseFormatError) as info:
        load_poses(mem_fs, "short.txt")
    assert info.value.line == 2

    mem_fs.writetext("word.txt", IDENTITY_LINE.replace("1", "x", 1))
    with pytest.raises(PoseFormatError) as info:
        load_poses(mem_fs, "word.txt")
    assert info.value.line == 1

    mem_fs.writetext("scaled.txt", "2 0 0 0 0 2 0 0 0 0 2 0\n")
    with pytest.raises(PoseFormatError):
        load_poses(mem_fs, "scaled.txt")


def test_nearly_orthonormal_rotation_is_repaired(mem_fs):
    """Rounding noise in a rotation is projected away."""
    mem_fs.writetext("poses.txt", "1.0000001 0 0 0 0 1 0 0 0 0 1 0\n")
    pose = load_poses(mem_fs, "poses.txt")[0]
    np.testing.assert_allclose(pose.rotation @ pose.rotation.T, np.eye(3),
                               atol=1e-12)


def test_dataset_save_and_open(synthetic, mem_fs):
    """A saved dataset opens with the same poses and split."""
    dataset, neighbors = synthetic
    dataset.save(mem_fs, neighbors)
    assert mem_fs.exists("neighbors.json")
    opened = ScanDataset.open(mem_fs)
    assert opened.ids == dataset.ids
    assert opened.database_ids == dataset.database_ids
    assert opened.query_ids == dataset.query_ids
    for scan_id in dataset.ids:
        np.testing.assert_allclose(opened.pose(scan_id).as_matrix34(),
                                   dataset.pose(scan_id).as_matrix34())
    np.testing.assert_allclose(opened.load("000003").points,
                               dataset.load("000003").points, atol=1e-5)
    assert opened.record("000002").timestamp == pytest.approx(0.2)


def test_open_checks_pose_count(synthetic, mem_fs):
    """Every scan needs a pose."""
    dataset, _ = synthetic
    dataset.save(mem_fs)
    mem_fs.writetext("poses.txt", "{}\n".format(IDENTITY_LINE))
    with pytest.raises(PoseFormatError):
        ScanDataset.open(mem_fs)


def test_relative_pose_aligns_scans(synthetic):
    """The relative pose maps sensor frames through the world frame."""
    dataset, _ = synthetic
    relative = dataset.relative_pose("000001", "000000")
    points = dataset.load("000001").points
    expected = dataset.pose("000000").inverse().apply(
        dataset.pose("000001").apply(points))
    np.testing.assert_allclose(relative.apply(points), expected, atol=1e-9)


def test_synthetic_split_and_neighbors(synthetic):
    """Each query revisits exactly one database place."""
    dataset, neighbors = synthetic
    assert dataset.database_ids == ["000000", "000002", "000004"]
    assert dataset.query_ids == ["000001", "000003", "000005"]
    assert neighbors == {"000001": ["000000"], "000003": ["000002"],
                         "000005": ["000004"]}
    assert all(len(dataset.load(i)) == 96 for i in dataset.ids)


def test_synthetic_is_reproducible():
    """The generator depends only on its arguments."""
    a, _ = generate_synthetic(num_scenes=2, points_per_scene=32, seed=5)
    b, _ = generate_synthetic(num_scenes=2, points_per_scene=32, seed=5)
    np.testing.assert_array_equal(a.load("000001").points,
                                  b.load("000001").points)


def test_synthetic_revisit_heading_is_bounded():
    """Revisits turn by at most the requested yaw from the first scan."""
    dataset, _ = generate_synthetic(num_scenes=6, points_per_scene=16,
                                    seed=2, revisit_yaw_deg=10.0)
    for place in range(6):
        first = dataset.pose("{:06d}".format(2 * place))
        second = dataset.pose("{:06d}".format(2 * place + 1))
        turn = first.inverse().compose(second).rotation
        yaw = np.degrees(np.arctan2(turn[1, 0], turn[0, 0]))
        assert abs(yaw) <= 10.0 + 1e-9


@pytest.mark.parametrize("kwargs", [
    {"num_scenes": 0},
    {"points_per_scene": 0},
    {"overlap": 1.5},
    {"revisit_yaw_deg": -1.0},
])
def test_synthetic_rejects_bad_arguments(kwargs):
    """Invalid generator settings are configuration errors."""
    with pytest.raises(ConfigError):
        generate_synthetic(**kwargs)


def test_neighbor_lists_exclude_self():
    """Neighbor lists are inclusive and never contain the scan itself."""
    records = []
    for i, x in enumerate([0.0, 5.0, 11.0]):
        records.append((str(i), RigidTransform(np.eye(3), (x, 0.0, 0.0))))
    dataset = ScanDataset(
        [ScanRecord(i, i + ".bin", pose) for i, pose in records],
        clouds={i: PointCloud(np.zeros((1, 3))) for i, _ in records})
    lists = dataset.neighbor_lists(5.0)
    assert lists == {"0": ["1"], "1": ["0"], "2": []}
