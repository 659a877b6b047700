# coding: utf-8
"""Model container tests."""

from __future__ import absolute_import
from __future__ import unicode_literals

import io

import numpy as np
import pytest

from salsa import SalsaModel, fit_pca_whitener, load_model, save_model
from salsa._checkpoint import MODEL_MAGIC, read_container, write_container
from salsa.errors import CheckpointError

from .conftest import tiny_aggregator, tiny_backbone


def test_model_round_trip(model, mem_fs):
    """Loading restores every parameter bit for bit."""
    save_model(mem_fs, "model.salsa", model)
    other = SalsaModel(tiny_backbone(), tiny_aggregator(), seed=99)
    assert load_model(mem_fs, "model.salsa", other) is None
    for p, q in zip(model.parameters(), other.parameters()):
        assert p.name == q.name
        np.testing.assert_array_equal(p.data, q.data)


def test_whitener_round_trip(model, mem_fs, rng):
    """The whitener section is optional and exact."""
    whitener = fit_pca_whitener(rng.normal(size=(20, 8)), 5)
    save_model(mem_fs, "model.salsa", model, whitener)
    loaded = load_model(mem_fs, "model.salsa", model)
    np.testing.assert_array_equal(loaded.mean, whitener.mean)
    np.testing.assert_array_equal(loaded.projection, whitener.projection)


def test_container_layout():
    """Records are stored after the magic in insertion order."""
    stream = io.BytesIO()
    write_container(stream, {"b": np.ones((1, 2)), "a": np.zeros((3, 1))})
    data = stream.getvalue()
    assert data.startswith(MODEL_MAGIC)
    arrays, whitener = read_container(io.BytesIO(data))
    assert list(arrays) == ["b", "a"]
    assert arrays["a"].shape == (3, 1)
    assert whitener is None


@pytest.mark.parametrize("mangle", [
    lambda data: b"XXXXXXX" + data[7:],
    lambda data: data[:-3],
    lambda data: data + b"\0",
])
def test_container_rejects_damage(mangle):
    """Bad magic, truncation and trailing bytes are detected."""
    stream = io.BytesIO()
    write_container(stream, {"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(CheckpointError):
        read_container(io.BytesIO(mangle(stream.getvalue())), "damaged")


def test_load_requires_matching_model(model, mem_fs):
    """A container from another configuration does not load."""
    save_model(mem_fs, "model.salsa", model)
    with pytest.raises(CheckpointError):
        load_model(mem_fs, "model.salsa", SalsaModel(seed=0))
