# coding: utf-8
"""Binary model container holding parameters and an optional whitener."""

from __future__ import absolute_import
from __future__ import print_function
from __future__ import unicode_literals

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = (
    "This software is released under the MIT license cited in LICENSE.txt"
)

__all__ = [
    "MODEL_MAGIC",
    "WHITENER_TAG",
    "write_container",
    "read_container",
    "save_model",
    "load_model",
]

import collections
import io
import logging
import struct

import numpy as np

from ._numeric import PCAWhitener
from .errors import CheckpointError


log = logging.getLogger(__name__)

MODEL_MAGIC = b"SALSAw1"
WHITENER_TAG = b"PCAW"

_U32 = struct.Struct("<I")


def _read_exact(stream, size, path, what):
    """Read exactly `size` bytes or fail naming `what`."""
    # type: (io.BufferedIOBase, int, str, str) -> bytes

    data = stream.read(size)
    if len(data) != size:
        raise CheckpointError(path, "truncated {}".format(what))
    return data


def _read_u32(stream, path, what):
    return _U32.unpack(_read_exact(stream, 4, path, what))[0]


def _read_f64(stream, count, path, what):
    data = _read_exact(stream, 8 * count, path, what)
    return np.frombuffer(data, dtype="<f8").astype(np.float64)


def write_container(stream, arrays, whitener=None):
    """
    Serialize named matrices and an optional whitener to `stream`.

    Layout: magic, record count, then per record the UTF-8 name, rows, cols
    and row-major little-endian float64 data; an optional ``PCAW`` section
    stores ``e_out``, ``e_in``, the mean and the projection.

    :param stream: Writable binary file object.
    :param collections.OrderedDict arrays: name -> 2-D array.
    :param PCAWhitener whitener: Optional whitener.
    """
    # type: (io.BufferedIOBase, collections.OrderedDict, PCAWhitener) -> None

    stream.write(MODEL_MAGIC)
    stream.write(_U32.pack(len(arrays)))
    for name, array in arrays.items():
        array = np.asarray(array, dtype="<f8")
        encoded = name.encode("utf-8")
        stream.write(_U32.pack(len(encoded)))
        stream.write(encoded)
        stream.write(struct.pack("<II", *array.shape))
        stream.write(np.ascontiguousarray(array).tobytes())
    if whitener is not None:
        stream.write(WHITENER_TAG)
        stream.write(struct.pack("<II", whitener.e_out, whitener.e_in))
        stream.write(whitener.mean.astype("<f8").tobytes())
        stream.write(np.ascontiguousarray(
            whitener.projection, dtype="<f8").tobytes())


def read_container(stream, path="<stream>"):
    """
    Parse a container written by :func:`write_container`.

    :return: ``(arrays, whitener)``; whitener is ``None`` when absent.
    :raises CheckpointError: On a bad magic, truncation or trailing bytes.
    """
    # type: (io.BufferedIOBase, str) -> tuple

    if stream.read(len(MODEL_MAGIC)) != MODEL_MAGIC:
        raise CheckpointError(path, "bad magic")
    arrays = collections.OrderedDict()
    for _ in range(_read_u32(stream, path, "record count")):
        size = _read_u32(stream, path, "name length")
        name = _read_exact(stream, size, path, "name").decode("utf-8")
        rows = _read_u32(stream, path, "rows")
        cols = _read_u32(stream, path, "cols")
        arrays[name] = _read_f64(stream, rows * cols, path, name).reshape(
            rows, cols)

    whitener = None
    tag = stream.read(len(WHITENER_TAG))
    if tag == WHITENER_TAG:
        e_out = _read_u32(stream, path, "whitener size")
        e_in = _read_u32(stream, path, "whitener size")
        mean = _read_f64(stream, e_in, path, "whitener mean")
        projection = _read_f64(stream, e_out * e_in, path,
                               "whitener projection").reshape(e_out, e_in)
        whitener = PCAWhitener(mean, projection)
        tag = stream.read(1)
    if tag:
        raise CheckpointError(path, "unexpected trailing data")
    return arrays, whitener


def save_model(filesystem, path, model, whitener=None):
    """
    Write the parameters of `model` and `whitener` to `path`.

    :param fs.base.FS filesystem: Target filesystem.
    :param str path: Path of the container inside `filesystem`.
    :param SalsaModel model: The model.
    :param PCAWhitener whitener: Optional fitted whitener.
    """
    # type: (FS, str, SalsaModel, PCAWhitener) -> None

    arrays = collections.OrderedDict(
        (name, p.data) for name, p in model.named_parameters().items())
    with filesystem.openbin(path, "w") as stream:
        write_container(stream, arrays, whitener)
    log.debug("saved %d parameter arrays to %s", len(arrays), path)


def load_model(filesystem, path, model):
    """
    Load parameters from `path` into `model` in place.

    The container must hold exactly the parameters of `model` with matching
    shapes, so `model` has to be created with the configuration it was
    trained with.

    :return: The stored whitener, or ``None``.
    :raises fs.errors.ResourceNotFound: When `path` does not exist.
    :raises CheckpointError: When the container does not fit `model`.
    """
    # type: (FS, str, SalsaModel) -> PCAWhitener

    with filesystem.openbin(path) as stream:
        arrays, whitener = read_container(stream, path)
    params = model.named_parameters()
    if list(arrays) != list(params):
        missing = sorted(set(params) - set(arrays))
        extra = sorted(set(arrays) - set(params))
        raise CheckpointError(path, "parameter names differ (missing {}, "
                                    "unexpected {})".format(missing, extra))
    for name, array in arrays.items():
        if array.shape != params[name].shape:
            raise CheckpointError(path, "{} has shape {}, expected {}".format(
                name, array.shape, params[name].shape))
        params[name].data[...] = array
    return whitener
