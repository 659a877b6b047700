# coding: utf-8
"""Loss, mining, augmentation and optimizer tests."""

from __future__ import absolute_import
from __future__ import unicode_literals

import math

import numpy as np
import pytest

from salsa import (SGD, Adam, DescriptorDatabase, LossConfig, MiningConfig,
                   Parameter, PointCloud, RigidTransform, SalsaModel,
                   TrainingConfig, Triplet, augment, compute_descriptors,
                   evaluate_triplets, finite_diff_check,
                   find_correspondences, generate_synthetic,
                   local_consistency_loss, make_optimizer,
                   mine_hard_negatives, recall_at_k, train_epoch,
                   triplet_loss)
from salsa._backbone import LocalDescriptorSet
from salsa._numeric import backward
from salsa._training import (CorrespondenceSet, EpochStats, StepStats,
                             TrainingLog, sample_subset, train_step)
from salsa.errors import ConfigError, DegenerateInputError


def test_triplet_loss_values():
    """The hinge is zero once the negative is far enough."""
    q, p, n = np.array([1.0, 0.0]), np.array([1.0, 0.0]), np.array([0.0, 1.0])
    assert triplet_loss(q, p, n, 0.1).item() == 0.0
    assert triplet_loss(q, q, q, 0.1).item() == pytest.approx(0.1)
    assert triplet_loss(q, n, p, 0.1).item() == pytest.approx(2.1)


def test_triplet_loss_gradient():
    """The query is pulled to the positive and pushed from the negative."""
    q = Parameter(np.array([[0.0, 0.0]]), "q")
    loss = triplet_loss(q, np.array([1.0, 0.0]), np.array([0.0, 0.5]), 0.1)
    backward(loss)
    np.testing.assert_allclose(q.grad, [[-2.0, 1.0]])


def test_find_correspondences(rng):
    """Points are paired through the ground-truth transform."""
    positions = rng.uniform(-5, 5, size=(20, 3))
    t = RigidTransform.from_yaw(0.3, (1.0, 2.0, 0.0))
    a = LocalDescriptorSet(np.zeros((20, 2)), positions)
    b = LocalDescriptorSet(np.zeros((21, 2)),
                           np.vstack([t.apply(positions), [[99, 99, 99]]]))
    gamma = find_correspondences(a, b, t, 0.5)
    np.testing.assert_array_equal(gamma.pairs, np.stack(
        [np.arange(20), np.arange(20)], axis=1))
    assert len(find_correspondences(a, b, RigidTransform.identity(),
                                    1e-3)) < 20


def _two_point_sets():
    positions = np.array([[0.0, 0.0, 0.0], [10.0, 0.0, 0.0]])
    first = LocalDescriptorSet(np.array([[0.0], [1.0]]), positions)
    second = LocalDescriptorSet(np.array([[0.8], [0.1]]), positions)
    gamma = CorrespondenceSet([[0, 0], [1, 1]], (first, second))
    return first, second, gamma


def test_local_consistency_loss_value():
    """Positive and both hardest-negative terms of a hand-made pair."""
    first, second, gamma = _two_point_sets()
    loss = local_consistency_loss(first.descriptors, second.descriptors,
                                  gamma, LossConfig(),
                                  subsets=([0, 1], [0, 1]))
    # positive 0.625, each negative side (1.99 + 1.96) / 2
    assert loss.item() == pytest.approx(0.625 + 2 * 1.975)


def test_local_loss_excludes_nearby_negatives():
    """Negatives near the anchor's correspondent are not counted."""
    first, second, gamma = _two_point_sets()
    cfg = LossConfig(exclusion_radius=20.0)
    loss = local_consistency_loss(first.descriptors, second.descriptors,
                                  gamma, cfg, subsets=([0, 1], [0, 1]))
    assert loss.item() == pytest.approx(0.625)


def test_local_loss_needs_correspondences():
    """An empty correspondence set is degenerate."""
    first, second, _ = _two_point_sets()
    with pytest.raises(DegenerateInputError):
        local_consistency_loss(first.descriptors, second.descriptors,
                               CorrespondenceSet(np.zeros((0, 2)),
                                                 (first, second)),
                               LossConfig())


def test_triplet_loss_matches_direct_formula(rng):
    """The hinge equals its closed form on random triples."""
    margin = 0.1
    for _ in range(10000):
        q, p, n = rng.normal(scale=0.4, size=(3, 8))
        expected = max(np.sum((q - p) ** 2) - np.sum((q - n) ** 2) + margin,
                       0.0)
        assert abs(triplet_loss(q, p, n, margin).item() - expected) <= 1e-12


def test_triplet_loss_finite_differences(rng):
    """Triplet gradients reach all three descriptors."""
    q = Parameter(rng.normal(size=(1, 16)), "q")
    p = Parameter(q.data + rng.normal(scale=0.5, size=(1, 16)), "p")
    n = Parameter(q.data + rng.normal(scale=0.1, size=(1, 16)), "n")
    error = finite_diff_check(lambda: triplet_loss(q, p, n, 0.1), [q, p, n],
                              eps=1e-5, num_samples=48, rng=rng)
    assert error <= 1e-4


def _local_loss_by_loops(g1, g2, pos1, pos2, pairs, subsets, cfg):
    """Local consistency loss written with plain loops over candidates."""

    def distance(a, b):
        return float(np.sum((a - b) ** 2))

    total = sum(max(distance(g1[i], g2[j]) - cfg.m_p, 0.0)
                for i, j in pairs) / len(pairs)
    sides = ((g1, g2, pos2, subsets[1], 0), (g2, g1, pos1, subsets[0], 1))
    for anchors, others, positions, candidates, side in sides:
        terms = []
        for pair in pairs:
            anchor = anchors[pair[side]]
            partner = pair[1 - side]
            hardest = min(candidates,
                          key=lambda c: distance(anchor, others[c]))
            if (np.linalg.norm(positions[hardest] - positions[partner])
                    > cfg.exclusion_radius):
                terms.append(max(cfg.m_n - distance(anchor, others[hardest]),
                                 0.0))
        if terms:
            total += cfg.mu_n * sum(terms) / len(terms)
    return total


def test_local_loss_matches_exhaustive_search(rng):
    """Hardest-negative mining agrees with a loop over all candidates."""
    cfg = LossConfig()
    for _ in range(100):
        n1, n2 = rng.integers(2, 40, size=2)
        g1 = rng.normal(scale=0.5, size=(n1, 4))
        g2 = rng.normal(scale=0.5, size=(n2, 4))
        pos1 = rng.uniform(0.0, 8.0, size=(n1, 3))
        pos2 = rng.uniform(0.0, 8.0, size=(n2, 3))
        count = int(rng.integers(1, 51))
        pairs = np.stack([rng.integers(0, n1, count),
                          rng.integers(0, n2, count)], axis=1)
        subsets = (sample_subset(n1, int(rng.integers(1, n1 + 1)), rng),
                   sample_subset(n2, int(rng.integers(1, n2 + 1)), rng))
        gamma = CorrespondenceSet(pairs, (LocalDescriptorSet(g1, pos1),
                                          LocalDescriptorSet(g2, pos2)))
        loss = local_consistency_loss(g1, g2, gamma, cfg, subsets=subsets)
        expected = _local_loss_by_loops(g1, g2, pos1, pos2, pairs.tolist(),
                                        subsets, cfg)
        assert abs(loss.item() - expected) <= 1e-9


def test_local_loss_finite_differences(rng):
    """Local consistency gradients match central differences."""
    g1 = Parameter(rng.normal(scale=0.5, size=(25, 4)), "g1")
    g2 = Parameter(rng.normal(scale=0.5, size=(25, 4)), "g2")
    pos1 = rng.uniform(0.0, 8.0, size=(25, 3))
    pos2 = rng.uniform(0.0, 8.0, size=(25, 3))
    gamma = CorrespondenceSet(np.stack([np.arange(15), np.arange(15)],
                                       axis=1),
                              (LocalDescriptorSet(g1.data, pos1),
                               LocalDescriptorSet(g2.data, pos2)))
    subsets = (np.arange(25), np.arange(25))

    def loss():
        return local_consistency_loss(g1, g2, gamma, LossConfig(),
                                      subsets=subsets)

    error = finite_diff_check(loss, [g1, g2], eps=1e-5, num_samples=60,
                              rng=rng)
    assert error <= 1e-4


def test_sample_subset(rng):
    """Subsets are sorted and never larger than requested."""
    assert sample_subset(5, 10, rng).tolist() == [0, 1, 2, 3, 4]
    picked = sample_subset(100, 10, rng)
    assert len(picked) == 10
    assert np.all(np.diff(picked) > 0)


def test_negatives_for():
    """Negative sample counts scale with the subset and the pool."""
    cfg = MiningConfig()
    assert cfg.negatives_for(1000, 10000) == 4000
    assert cfg.negatives_for(10, 10000) == 40
    assert cfg.negatives_for(10, 30) == 30
    assert MiningConfig(num_negatives=1).negatives_for(1, 10) == 1


def test_mining_config_validation():
    """The positive radius must lie inside the negative radius."""
    with pytest.raises(ConfigError):
        MiningConfig(positive_radius=30.0).validate()


def _mining_inputs():
    positions = {"a": np.zeros(3), "b": np.array([1.0, 0.0, 0.0]),
                 "c": np.array([30.0, 0.0, 0.0]),
                 "d": np.array([40.0, 0.0, 0.0])}
    descriptors = {"a": np.array([0.0]), "b": np.array([1.0]),
                   "c": np.array([0.5]), "d": np.array([0.5])}
    return positions, descriptors


def test_mining_picks_hardest_negative(rng):
    """The closest hard negative wins, ties going to the lowest id."""
    positions, descriptors = _mining_inputs()
    result = mine_hard_negatives(["a", "c"], ["a", "b", "c", "d"], positions,
                                 descriptors, MiningConfig(), rng)
    assert result.triplets == [Triplet("a", "b", "c")]
    assert result.no_positive == 1
    assert result.no_hard_negative == 0


def test_mining_skips_queries_without_hard_negative(rng):
    """A positive closer than every negative leaves nothing to mine."""
    positions, descriptors = _mining_inputs()
    descriptors["b"] = np.array([0.0])
    result = mine_hard_negatives(["a"], ["a", "b", "c", "d"], positions,
                                 descriptors, MiningConfig(), rng)
    assert result.triplets == []
    assert result.no_hard_negative == 1


def test_augment_rotation_keeps_ranges(cloud, rng):
    """Yaw rotation preserves ranges and reports its transform."""
    out, transform = augment(cloud, 30.0, 0.0, rng, return_transform=True)
    np.testing.assert_allclose(out.points, transform.apply(cloud.points))
    np.testing.assert_allclose(np.linalg.norm(out.points, axis=1),
                               np.linalg.norm(cloud.points, axis=1))
    yaw = math.degrees(math.atan2(transform.rotation[1, 0],
                                  transform.rotation[0, 0]))
    assert abs(yaw) <= 30.0


def test_augment_occlusion_removes_sector(rng):
    """Points of one azimuth sector are dropped."""
    angles = np.linspace(-math.pi, math.pi, 360, endpoint=False)
    c = PointCloud(np.stack([np.cos(angles), np.sin(angles),
                             np.zeros(360)], axis=1))
    out = augment(c, 0.0, 90.0, rng)
    assert 80 <= len(c) - len(out) <= 100


def test_augment_rejects_full_occlusion(cloud, rng):
    """A 360 degree sector would remove every point."""
    with pytest.raises(DegenerateInputError):
        augment(cloud, 0.0, 360.0, rng)


def test_sgd_momentum():
    """Velocity accumulates the gradients."""
    p = Parameter(np.array([[1.0]]), "p")
    optimizer = SGD([p], lr=0.1, momentum=0.9)
    for _ in range(2):
        p.grad = np.array([[1.0]])
        optimizer.step()
    assert p.data[0, 0] == pytest.approx(1.0 - 0.1 - 0.19)


def test_sgd_zero_learning_rate_keeps_parameters(model):
    """A zero learning rate leaves the weights bit-identical."""
    before = [p.data.copy() for p in model.parameters()]
    optimizer = SGD(model.parameters(), lr=0.0)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    optimizer.step()
    for old, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(old, p.data)


def test_adam_steps_by_learning_rate():
    """Bias correction makes early Adam steps about `lr` long."""
    p = Parameter(np.array([[1.0, 1.0]]), "p")
    optimizer = Adam([p], lr=0.1)
    for _ in range(2):
        p.grad = np.array([[2.0, -1e-3]])
        optimizer.step()
    np.testing.assert_allclose(p.data, [[0.8, 1.2]], atol=1e-5)
    assert optimizer.t == 2


def test_adam_zero_learning_rate_keeps_parameters(model):
    """A zero learning rate leaves the weights bit-identical."""
    before = [p.data.copy() for p in model.parameters()]
    optimizer = Adam(model.parameters(), lr=0.0)
    for p in model.parameters():
        p.grad = np.ones_like(p.data)
    optimizer.step()
    for old, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(old, p.data)


def test_make_optimizer(model):
    """The configuration picks the optimizer and its settings."""
    adam = make_optimizer(model.parameters(), TrainingConfig())
    assert isinstance(adam, Adam)
    assert (adam.lr, adam.beta1) == (1e-3, 0.9)
    sgd = make_optimizer(model.parameters(),
                         TrainingConfig(optimizer="sgd", momentum=0.5))
    assert isinstance(sgd, SGD) and sgd.momentum == 0.5
    with pytest.raises(ConfigError):
        make_optimizer(model.parameters(), TrainingConfig(optimizer="rmsprop"))


def test_epoch_mean_query_loss():
    """Queries without a hard negative count as zero loss."""
    stats = EpochStats(4, 0.2, 0.0, 0.2, 0.3, 1, 4, 0)
    assert stats.mean_query_loss == pytest.approx(0.1)
    assert stats.skipped == 5
    assert EpochStats(0, 0.0, 0.0, 0.0, 0.0, 3, 0, 0).mean_query_loss == 0.0


def test_training_config_validation():
    """Momentum must lie in [0, 1)."""
    with pytest.raises(ConfigError):
        TrainingConfig(momentum=1.0).validate()
    with pytest.raises(ConfigError):
        LossConfig(margin=-1.0).validate()


def test_training_log(mem_fs):
    """The log holds a header and one line per step."""
    with TrainingLog(mem_fs, "train.log") as log:
        log.write(0, StepStats(0.5, 0.25, 0.75), 2)
    lines = mem_fs.readtext("train.log").splitlines()
    assert lines[0].startswith("# step")
    assert lines[1] == "0 0.50000000 0.25000000 0.75000000 2"


def test_train_step_reports_losses(model, synthetic, rng):
    """A training step returns finite losses and moves the weights."""
    dataset, _ = synthetic
    before = model.parameters()[0].data.copy()
    optimizer = SGD(model.parameters(), lr=0.01)
    stats = train_step(model, optimizer, dataset,
                       Triplet("000001", "000000", "000002"),
                       LossConfig(), TrainingConfig(), rng)
    assert math.isfinite(stats.global_loss)
    assert stats.total >= stats.global_loss or math.isnan(stats.local_loss)
    if stats.total > 0:
        assert not np.array_equal(before, model.parameters()[0].data)


def test_evaluate_triplets_is_read_only(model, synthetic):
    """Evaluating triplets does not touch the parameters."""
    dataset, _ = synthetic
    before = [p.data.copy() for p in model.parameters()]
    losses = evaluate_triplets(model, dataset,
                               [Triplet("000001", "000000", "000002")])
    assert losses.shape == (1,)
    assert losses[0] >= 0
    for old, p in zip(before, model.parameters()):
        np.testing.assert_array_equal(old, p.data)


@pytest.mark.slow
def test_train_epoch_accounts_for_every_query(model, synthetic, rng,
                                              mem_fs):
    """Every scan yields a step or a counted skip."""
    dataset, _ = synthetic
    optimizer = SGD(model.parameters(), lr=1e-3)
    with TrainingLog(mem_fs, "train.log") as log:
        stats = train_epoch(dataset, model, optimizer, rng,
                            training_cfg=TrainingConfig(augment=True),
                            training_log=log, threads=1)
    assert stats.steps + stats.skipped == len(dataset)
    assert len(mem_fs.readtext("train.log").splitlines()) == stats.steps + 1


@pytest.mark.slow
def test_overfits_fixed_triplet(model, synthetic, rng):
    """Repeated steps on one triplet do not increase its loss."""
    dataset, _ = synthetic
    triplet = Triplet("000001", "000000", "000002")
    initial = evaluate_triplets(model, dataset, [triplet])[0]
    optimizer = SGD(model.parameters(), lr=0.01, momentum=0.0)
    loss_cfg = LossConfig(lambda_local=0.0)
    for _ in range(30):
        train_step(model, optimizer, dataset, triplet, loss_cfg,
                   TrainingConfig(), rng)
    final = evaluate_triplets(model, dataset, [triplet])[0]
    assert final <= initial + 1e-9


@pytest.mark.slow
def test_overfits_synthetic_places():
    """Twenty synthetic places are told apart within 500 steps."""
    dataset, _ = generate_synthetic(num_scenes=20, points_per_scene=256,
                                    seed=0)
    model = SalsaModel(seed=0)
    optimizer = make_optimizer(model.parameters(), TrainingConfig())
    loss_cfg = LossConfig(lambda_local=0.0)
    mining_cfg = MiningConfig()
    rng = np.random.default_rng(0)

    history, steps = [], 0
    while steps < 500:
        stats = train_epoch(dataset, model, optimizer, rng, loss_cfg,
                            mining_cfg, threads=1, max_steps=500 - steps)
        history.append(stats.mean_query_loss)
        steps += stats.steps
        if stats.steps == 0:
            break
    rises = sum(later > earlier
                for earlier, later in zip(history[:5], history[1:5]))
    assert rises <= 1

    ids = dataset.ids
    positions = dict(zip(ids, dataset.positions(ids)))
    descriptors = compute_descriptors(model, dataset, ids, threads=1)
    mined = mine_hard_negatives(ids, ids, positions, descriptors, mining_cfg,
                                rng)
    losses = evaluate_triplets(model, dataset, mined.triplets,
                               loss_cfg.margin, threads=1)
    assert losses.sum() / (len(ids) - mined.no_positive) < 0.01

    database = DescriptorDatabase()
    for scan_id in dataset.database_ids:
        database.add(scan_id, descriptors[scan_id], dataset.pose(scan_id))
    results = [database.knn(descriptors[q], 1, q) for q in dataset.query_ids]
    db_positions = {i: positions[i] for i in dataset.database_ids}
    assert recall_at_k(results, dataset.positions(dataset.query_ids),
                       db_positions, 1, 5.0) == 100.0
