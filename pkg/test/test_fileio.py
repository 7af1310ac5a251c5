import os
import numpy as np
import nibabel as nib
import pytest
import synthreg.regtools as rt
from synthreg.regtools import fileio
from synthreg.regtools.ptools import (VolumeFormatError, NiftiMagicError, NiftiDetachedError, NiftiDatatypeError,
                                      NiftiTruncatedError)


def nifti_blob(data, endianness="<", magic=b"n+1", dtype=np.float32, zooms=(1.0, 1.0, 1.0)):
    header = nib.Nifti1Header(endianness=endianness)
    header.set_data_dtype(dtype)
    header.set_data_shape(data.shape)
    header.set_zooms(zooms)
    header["vox_offset"] = 352
    header["magic"] = magic
    payload = np.asarray(data, dtype=np.dtype(dtype).newbyteorder(endianness)).tobytes(order="F")
    return header.binaryblock + bytes(4) + payload


def write_blob(folder, name, blob):
    path = os.path.join(folder, name)
    with open(path, "wb") as outfile:
        outfile.write(blob)
    return path


def test_rvol_should_store_images_bit_exactly_with_spacing(tmp_path):
    rng = np.random.default_rng(0)
    for dtype in (np.float32, np.float64):
        image = rt.ScalarVolume(rng.random((3, 4, 5)).astype(dtype), spacing=(0.5, 1.0, 2.0))
        path = os.path.join(tmp_path, "image.rvol")
        rt.write_rvol(image, path)
        restored = rt.read_rvol(path)
        assert isinstance(restored, rt.ScalarVolume)
        assert restored.data.dtype == dtype
        np.testing.assert_array_equal(restored.data, image.data)
        assert restored.spacing == (0.5, 1.0, 2.0)


def test_rvol_should_write_x_fastest_after_the_header(tmp_path):
    image = rt.ScalarVolume(np.arange(24, dtype=np.float32).reshape(2, 3, 4))
    path = os.path.join(tmp_path, "order.rvol")
    rt.write_rvol(image, path)
    with open(path, "rb") as infile:
        blob = infile.read()
    assert blob[:4] == b"RVOL"
    payload = np.frombuffer(blob, dtype="<f4", offset=fileio._RVOL_HEADER.size)
    np.testing.assert_array_equal(payload[:3], [image.data[0, 0, 0], image.data[1, 0, 0], image.data[0, 1, 0]])


def test_rvol_should_store_label_maps_and_vector_fields_with_their_kind(tmp_path):
    labels = rt.LabelVolume(np.arange(60).reshape(3, 4, 5) % 7)
    path = os.path.join(tmp_path, "labels.rvol")
    rt.write_rvol(labels, path)
    restored = rt.read_rvol(path)
    assert isinstance(restored, rt.LabelVolume)
    np.testing.assert_array_equal(restored.data, labels.data)
    field = rt.VectorField(np.random.default_rng(1).normal(size=(3, 3, 4, 5)), kind="displacement")
    path = os.path.join(tmp_path, "field.rvol")
    rt.write_rvol(field, path)
    restored = rt.read_rvol(path)
    assert restored.kind == "displacement"
    np.testing.assert_array_equal(restored.data, field.data)


def test_rvol_should_reject_foreign_and_truncated_files(tmp_path):
    path = write_blob(tmp_path, "foreign.rvol", b"NOPE" + bytes(100))
    with pytest.raises(VolumeFormatError):
        rt.read_rvol(path)
    rt.write_rvol(rt.ScalarVolume(np.zeros((3, 3, 3))), os.path.join(tmp_path, "full.rvol"))
    with open(os.path.join(tmp_path, "full.rvol"), "rb") as infile:
        blob = infile.read()
    with pytest.raises(VolumeFormatError):
        rt.read_rvol(write_blob(tmp_path, "short.rvol", blob[:-8]))


def test_nifti_should_round_trip_an_image_with_spacing(tmp_path):
    image = rt.ScalarVolume(np.random.default_rng(2).random((4, 5, 6)).astype(np.float32), spacing=(1.0, 1.5, 2.0))
    path = os.path.join(tmp_path, "image.nii")
    rt.write_nifti1(image, path)
    restored = rt.read_nifti1(path)
    np.testing.assert_array_equal(restored.data, image.data)
    np.testing.assert_allclose(restored.spacing, (1.0, 1.5, 2.0))


def test_nifti_should_read_big_endian_files(tmp_path):
    data = np.arange(24, dtype=np.float32).reshape(2, 3, 4)
    path = write_blob(tmp_path, "big.nii", nifti_blob(data, endianness=">", zooms=(1.5, 2.0, 1.0)))
    restored = rt.read_nifti1(path)
    np.testing.assert_array_equal(restored.data, data)
    np.testing.assert_allclose(restored.spacing, (1.5, 2.0, 1.0))


def test_nifti_with_integer_data_should_read_as_labels_unless_asked_for_an_image(tmp_path):
    data = (np.arange(24).reshape(2, 3, 4) % 3).astype(np.int16)
    path = write_blob(tmp_path, "labels.nii", nifti_blob(data, dtype=np.int16))
    labels = rt.read_nifti1(path)
    assert isinstance(labels, rt.LabelVolume)
    np.testing.assert_array_equal(labels.data, data)
    image = rt.read_nifti1(path, kind="scalar")
    assert isinstance(image, rt.ScalarVolume)
    np.testing.assert_array_equal(image.data, data.astype(np.float32))


def test_nifti_should_raise_a_distinct_error_for_each_unsupported_file(tmp_path):
    data = np.zeros((2, 2, 2), dtype=np.float32)
    cases = [
        (nifti_blob(data, magic=b"ni1"), NiftiDetachedError),
        (nifti_blob(data, magic=b"abc"), NiftiMagicError),
        (nifti_blob(data, dtype=np.uint8), NiftiDatatypeError),
        (nifti_blob(data)[:-4], NiftiTruncatedError),
        (bytes(100), NiftiTruncatedError),
        (bytes(400), NiftiMagicError),
    ]
    for index, (blob, error) in enumerate(cases):
        path = write_blob(tmp_path, "case{}.nii".format(index), blob)
        with pytest.raises(error):
            rt.read_nifti1(path)


def test_landmarks_should_round_trip_points_and_spacing(tmp_path):
    landmarks = rt.LandmarkSet([[1.0, 2.5, 3.0], [0.0, 0.25, 7.0]], spacing=(0.5, 0.5, 2.0))
    path = os.path.join(tmp_path, "points.txt")
    rt.write_landmarks(landmarks, path)
    restored = rt.read_landmarks(path)
    np.testing.assert_array_equal(restored.points, landmarks.points)
    assert restored.spacing == (0.5, 0.5, 2.0)
    bad = write_blob(tmp_path, "bad.txt", b"1 2\n")
    with pytest.raises(VolumeFormatError):
        rt.read_landmarks(bad)


def test_manifest_should_round_trip_key_value_lines(tmp_path):
    path = os.path.join(tmp_path, "manifest.txt")
    rt.write_manifest({"seed": 3, "run.out": "a/b", "dice_mean": 0.5}, path)
    assert rt.read_manifest(path) == {"seed": "3", "run.out": "a/b", "dice_mean": "0.5"}
    with pytest.raises(ValueError):
        rt.write_manifest({"note": "two\nlines"}, path)


def test_rvol_should_keep_the_label_count_of_a_label_map(tmp_path):
    labels = rt.LabelVolume(np.arange(27).reshape(3, 3, 3) % 3, label_count=6)
    path = os.path.join(tmp_path, "labels.rvol")
    rt.write_rvol(labels, path)
    assert rt.read_rvol(path).label_count == 6


def test_rvol_without_a_stored_label_count_should_infer_it(tmp_path):
    labels = rt.LabelVolume(np.arange(27).reshape(3, 3, 3) % 3, label_count=6)
    path = os.path.join(tmp_path, "labels.rvol")
    rt.write_rvol(labels, path)
    with open(path, "rb") as infile:
        blob = bytearray(infile.read())
    blob[9:12] = bytes(3)
    restored = rt.read_rvol(write_blob(tmp_path, "older.rvol", bytes(blob)))
    assert restored.label_count == 3


def test_nifti_read_as_labels_should_reject_non_integer_values(tmp_path):
    data = np.full((2, 3, 4), 1.5, dtype=np.float32)
    path = write_blob(tmp_path, "fractional.nii", nifti_blob(data))
    with pytest.raises(VolumeFormatError):
        rt.read_nifti1(path, kind="labels")
    whole = write_blob(tmp_path, "whole.nii", nifti_blob(np.full((2, 3, 4), 2.0, dtype=np.float32)))
    labels = rt.read_nifti1(whole, kind="labels")
    assert isinstance(labels, rt.LabelVolume)
    np.testing.assert_array_equal(labels.data, np.full((2, 3, 4), 2))
