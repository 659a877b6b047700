# coding: utf-8
"""Worker pool, location and stopwatch helper tests."""

from __future__ import absolute_import
from __future__ import unicode_literals

import logging
import os

from fs.memoryfs import MemoryFS

from salsa._util import (THREADS_ENV, Stopwatch, dump_json, ensure_fs,
                         load_json, parallel_map, split_location,
                         worker_count)


def test_parallel_map_keeps_order():
    """Results come back in input order whatever the pool size."""
    items = list(range(50))
    assert parallel_map(lambda x: x * x, items, threads=4) == \
        [x * x for x in items]
    assert parallel_map(lambda x: x, [], threads=4) == []


def test_worker_count_environment(monkeypatch):
    """The environment overrides the configured pool size."""
    monkeypatch.delenv(THREADS_ENV, raising=False)
    assert worker_count(3) == 3
    assert worker_count(0) == (os.cpu_count() or 1)
    monkeypatch.setenv(THREADS_ENV, "2")
    assert worker_count(8) == 2
    monkeypatch.setenv(THREADS_ENV, "many")
    assert worker_count(5) == 5


def test_split_location():
    """Bare file names live in the current directory."""
    assert split_location("model.salsa") == (".", "model.salsa")
    assert split_location("runs/a/model.salsa") == ("runs/a", "model.salsa")


def test_ensure_fs_passes_filesystems_through():
    """An FS object is used as is."""
    with MemoryFS() as mem_fs:
        assert ensure_fs(mem_fs) is mem_fs


def test_stopwatch_accumulates(caplog):
    """Repeated stages add up under one name."""
    watch = Stopwatch()
    for _ in range(3):
        with watch.stage("extract"):
            pass
    with watch.stage("query"):
        pass
    assert list(watch.totals) == ["extract", "query"]
    assert all(total >= 0.0 for total in watch.totals.values())
    with caplog.at_level(logging.INFO, logger="salsa"):
        watch.report()
    assert "extract" in caplog.text


def test_json_helpers(mem_fs):
    """JSON documents are written sorted and read back."""
    dump_json(mem_fs, "doc.json", {"b": [1, 2], "a": None})
    assert mem_fs.readtext("doc.json").index('"a"') < \
        mem_fs.readtext("doc.json").index('"b"')
    assert load_json(mem_fs, "doc.json") == {"a": None, "b": [1, 2]}
