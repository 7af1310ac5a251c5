"""
NAME
ptools

DESCRIPTION
Tools shared by the modules of regtools: the exception hierarchy, seed derivation, smoothing of curves and
writing (and reading back) plain-text files safely.

CLASSES
RegistrationError and subclasses

FUNCTIONS
derive_seed
moving_average
atomic_write
columns_to_csv
read_csv
"""

import os
import itertools
import tempfile
import numpy as np


class RegistrationError(Exception):
    """Base class of all errors raised by synthreg."""


class ShapeMismatchError(RegistrationError, ValueError):
    """Two grids that have to share a shape do not."""


class FieldKindError(RegistrationError, ValueError):
    """A vector field with the wrong kind tag was passed."""


class ForwardRecordError(RegistrationError, RuntimeError):
    """backward was called without a recorded forward pass."""


class ConfigMismatchError(RegistrationError, ValueError):
    """Two model configurations that have to agree do not."""


class EmptyDatasetError(RegistrationError, ValueError):
    """A dataset without any volumes was given."""


class RunConfigError(RegistrationError, ValueError):
    """The run configuration contains unknown or invalid entries."""


class VolumeFormatError(RegistrationError):
    """A volume, field or checkpoint file could not be read."""


class CheckpointFormatError(VolumeFormatError):
    """The file is not a valid checkpoint."""


class NiftiMagicError(VolumeFormatError):
    """The NIfTI magic string is not recognised."""


class NiftiDetachedError(VolumeFormatError):
    """The header belongs to a detached (.hdr/.img) NIfTI pair, which is not supported."""


class NiftiDatatypeError(VolumeFormatError):
    """The NIfTI datatype code is not supported."""


class NiftiTruncatedError(VolumeFormatError):
    """The NIfTI payload is shorter than the header announces."""


def derive_seed(base_seed: int, *keys: int) -> int:
    """
    Derive an independent 64-bit seed from a base seed and a path of integer keys.

    numpy's SeedSequence is used as the splittable hash, so different key paths give statistically
    independent streams and the result does not depend on the order in which seeds are requested.

    :param base_seed:   non-negative integer
    :param keys:        non-negative integers, for example (pair index,) or (pair index, channel)
    :return:            integer in [0, 2**64)
    """
    if base_seed < 0 or any(k < 0 for k in keys):
        raise ValueError("Seeds and seed keys should be non-negative, got {} and {}".format(base_seed, keys))
    sequence = np.random.SeedSequence(entropy=int(base_seed), spawn_key=tuple(int(k) for k in keys))
    return int(sequence.generate_state(1, dtype=np.uint64)[0])


def moving_average(values, window: int) -> np.ndarray:
    """
    Trailing moving average, averaging over the available points at the start of the curve.

    :param values:  sequence of numbers
    :param window:  number of points to average, at least 1
    :return:        array of the same length as values
    """
    if window < 1:
        raise ValueError("Expected a smoothing window of at least 1, got {}".format(window))
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return values
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    ends = np.arange(1, values.size + 1)
    starts = np.maximum(ends - window, 0)
    return (cumulative[ends] - cumulative[starts]) / (ends - starts)


def atomic_write(path: str, content, binary=False):
    """
    Write content to path through a temporary file in the same folder and a rename.

    Readers never see a half written file; if writing fails the original file is left untouched.
    """
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    handle, tmp_path = tempfile.mkstemp(dir=folder, prefix=".tmp_", suffix=os.path.basename(path))
    try:
        with os.fdopen(handle, "wb" if binary else "w") as outfile:
            outfile.write(content)
        os.replace(tmp_path, path)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise


def columns_to_csv(header: list, columns: list, path: str):
    """
    Save columns of numbers to a csv file with a one-line header.

    Numbers are written with repr precision, so reading the file back gives the same floats.

    :param header:  list of column titles
    :param columns: list of equally long sequences
    :param path:    file to write
    """
    output = ",".join(header) + "\n"
    rows = itertools.zip_longest(*columns, fillvalue="")
    for line in rows:
        output += ",".join(map(_format_number, line)) + "\n"
    atomic_write(path, output)


def read_csv(path: str):
    """Read a csv file written by columns_to_csv, return the header and a list of float columns."""
    with open(path) as infile:
        lines = infile.read().splitlines()
    if not lines:
        raise VolumeFormatError("Empty csv file: {}".format(path))
    header = lines[0].split(",")
    columns = [[] for _ in header]
    for line in lines[1:]:
        for column, value in zip(columns, line.split(",")):
            if value != "":
                column.append(float(value))
    return header, columns


def _format_number(value):
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)
