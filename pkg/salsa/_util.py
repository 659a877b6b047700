# coding: utf-8
"""SALSA utility functions: filesystems, worker pool and timing."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "THREADS_ENV",
    "ensure_fs",
    "split_location",
    "worker_count",
    "parallel_map",
    "Stopwatch",
    "dump_json",
    "load_json",
]

import collections
import concurrent.futures
import contextlib
import json
import logging
import os
import time

from fs import open_fs
from fs.base import FS
from fs.path import basename, dirname


log = logging.getLogger(__name__)

THREADS_ENV = "SALSA_THREADS"


def ensure_fs(location, create=False):
    """
    Return an FS object for `location`.

    :param location: An :class:`fs.base.FS` instance (returned as is), an FS
                     URL such as ``mem://`` or a local directory path.
    :param bool create: Create the directory when it does not exist.
    """
    # type: (object, bool) -> FS

    if isinstance(location, FS):
        return location
    return open_fs(location, create=create)


def split_location(path):
    """
    Split a local file path into ``(directory, filename)``.

    The directory part defaults to ``.`` so that it can be passed to
    :func:`ensure_fs`.
    """
    # type: (str) -> tuple

    path = path.replace(os.sep, "/")
    return dirname(path) or ".", basename(path)


def worker_count(configured=0):
    """
    Return the size of the worker pool.

    ``SALSA_THREADS`` overrides `configured`; zero or less means one worker
    per CPU.
    """
    # type: (int) -> int

    value = os.environ.get(THREADS_ENV)
    if value:
        try:
            configured = int(value)
        except ValueError:
            log.warning("ignoring non-integer %s=%r", THREADS_ENV, value)
    if configured <= 0:
        configured = os.cpu_count() or 1
    return configured


def parallel_map(func, items, threads=0):
    """
    Apply `func` to every item on a bounded thread pool.

    Results are returned in input order. A single worker runs inline.
    """
    # type: (object, list, int) -> list

    items = list(items)
    workers = min(worker_count(threads), max(len(items), 1))
    if workers == 1:
        return [func(item) for item in items]
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(func, items))


class Stopwatch(object):
    """Accumulate wall time per named stage."""

    def __init__(self):
        """Create an empty stopwatch."""
        # type: () -> None

        self.totals = collections.OrderedDict()

    def __repr__(self):
        """Return the stage totals."""
        # type: () -> str

        return "<stopwatch {}>".format(
            ", ".join("{}={:.3f}s".format(k, v)
                      for k, v in self.totals.items()))

    @contextlib.contextmanager
    def stage(self, name):
        """Time the enclosed block under `name`."""
        start = time.perf_counter()
        try:
            yield
        finally:
            elapsed = time.perf_counter() - start
            self.totals[name] = self.totals.get(name, 0.0) + elapsed
            log.debug("stage %s took %.3fs", name, elapsed)

    def report(self, logger=None):
        """Log every stage total at INFO."""
        # type: (logging.Logger) -> None

        logger = logger or log
        for name, total in self.totals.items():
            logger.info("%-12s %8.3fs", name, total)


def dump_json(filesystem, path, payload):
    """Write `payload` as sorted, indented JSON."""
    # type: (FS, str, object) -> None

    filesystem.writetext(
        path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_json(filesystem, path):
    """Read a JSON document."""
    # type: (FS, str) -> object

    return json.loads(filesystem.readtext(path))
