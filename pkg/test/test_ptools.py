import os
import numpy as np
import pytest
from synthreg.regtools import ptools


def test_derive_seed_should_be_deterministic_and_depend_on_every_key():
    assert ptools.derive_seed(3, 1, 2) == ptools.derive_seed(3, 1, 2)
    seeds = {ptools.derive_seed(3), ptools.derive_seed(3, 1), ptools.derive_seed(3, 2), ptools.derive_seed(3, 1, 2),
             ptools.derive_seed(4, 1, 2)}
    assert len(seeds) == 5


def test_derive_seed_should_reject_negative_values():
    with pytest.raises(ValueError):
        ptools.derive_seed(-1)
    with pytest.raises(ValueError):
        ptools.derive_seed(1, -2)


def test_moving_average_should_average_over_available_points_at_the_start():
    output = ptools.moving_average([1.0, 2.0, 3.0, 4.0], 2)
    np.testing.assert_allclose(output, [1.0, 1.5, 2.5, 3.5])


def test_moving_average_should_reject_window_below_one():
    with pytest.raises(ValueError):
        ptools.moving_average([1.0], 0)


def test_columns_to_csv_should_write_header_and_padded_columns(tmp_path):
    path = os.path.join(tmp_path, "columns.csv")
    ptools.columns_to_csv(["step", "loss"], [[1, 2, 3], [0.5, 0.25]], path)
    with open(path) as infile:
        lines = infile.read().splitlines()
    assert lines == ["step,loss", "1,0.5", "2,0.25", "3,"]
    header, columns = ptools.read_csv(path)
    assert header == ["step", "loss"]
    assert columns == [[1.0, 2.0, 3.0], [0.5, 0.25]]


def test_atomic_write_should_leave_no_temporary_files(tmp_path):
    path = os.path.join(tmp_path, "out", "data.bin")
    ptools.atomic_write(path, b"abc", binary=True)
    ptools.atomic_write(path, b"abcd", binary=True)
    assert os.listdir(os.path.dirname(path)) == ["data.bin"]
    with open(path, "rb") as infile:
        assert infile.read() == b"abcd"


def test_error_classes_should_share_the_registration_error_base():
    for error in (ptools.ShapeMismatchError, ptools.FieldKindError, ptools.ForwardRecordError,
                  ptools.ConfigMismatchError, ptools.EmptyDatasetError, ptools.NiftiMagicError,
                  ptools.CheckpointFormatError):
        assert issubclass(error, ptools.RegistrationError)
