"""
NAME
volume

DESCRIPTION
Dense 3D grids and the geometric operations every other module is built on: trilinear sampling with
border-replicate clamping, warping of images and label maps, composition of deformations, finite differences,
Jacobian determinants and align-corners resampling.

All coordinates are voxel indices. Arrays are indexed [x, y, z] (channels first for vector data); on disk
they are written x-fastest. A deformation stores for every voxel the absolute position to sample from.

CLASSES
Shape3
ScalarVolume
VectorField
LabelVolume
TrilinearSampler

FUNCTIONS
as_shape
identity_grid
trilinear_sample
warp_scalar
warp_labels
compose
forward_difference
forward_difference_adjoint
spatial_gradient
jacobian_determinants
interpolation_matrix
resample_array
resample_array_adjoint
resample
"""

import logging
from typing import NamedTuple
import numpy as np
from .defaultvalues import default_spacing
from .ptools import ShapeMismatchError, FieldKindError

logger = logging.getLogger(__name__)

FIELD_KINDS = ("velocity", "displacement", "deformation")
FLOAT_TYPES = (np.dtype(np.float32), np.dtype(np.float64))


class Shape3(NamedTuple):
    """Voxel counts per axis."""
    nx: int
    ny: int
    nz: int

    @property
    def voxel_count(self):
        return self.nx * self.ny * self.nz


def as_shape(value) -> Shape3:
    """Return value as a Shape3, check that it has three dimensions of at least 2 voxels."""
    dims = tuple(int(n) for n in value)
    if len(dims) != 3:
        raise ValueError("Expected three dimensions, got {}".format(dims))
    if min(dims) < 2:
        raise ValueError("Every dimension should be at least 2 voxels, got {}".format(dims))
    return Shape3(*dims)


def _float_array(data) -> np.ndarray:
    data = np.array(data)
    if data.dtype not in FLOAT_TYPES:
        data = data.astype(np.float32)
    return data


class ScalarVolume:
    """
    A 3D grid of intensities, for example a fixed or moving image.

    ATTRIBUTES
    :ivar data:     float32 (or float64 in 64-bit mode) array of shape (nx, ny, nz), read-only
    :ivar spacing:  tuple of three floats, mm per voxel
    """

    def __init__(self, data, spacing=default_spacing):
        data = _float_array(data)
        if data.ndim != 3:
            raise ValueError("Expected a 3D array for a scalar volume, got shape {}".format(data.shape))
        as_shape(data.shape)
        if not np.all(np.isfinite(data)):
            raise ValueError("Scalar volume contains non-finite values")
        data.flags.writeable = False
        self.data = data
        self.spacing = tuple(float(s) for s in spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("Expected three positive spacings, got {}".format(spacing))

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.data.shape)

    def __repr__(self):
        return "ScalarVolume(shape={}, dtype={}, spacing={})".format(tuple(self.shape), self.data.dtype,
                                                                     self.spacing)


class VectorField:
    """
    A 3D grid of 3-vectors in voxel units.

    ATTRIBUTES
    :ivar data:     float array of shape (3, nx, ny, nz), read-only
    :ivar kind:     "velocity", "displacement" or "deformation". A deformation holds absolute sample
                    positions (identity grid + displacement).
    """

    def __init__(self, data, kind: str):
        if kind not in FIELD_KINDS:
            raise ValueError("Expected field kind in {}, got {}".format(FIELD_KINDS, kind))
        data = _float_array(data)
        if data.ndim != 4 or data.shape[0] != 3:
            raise ValueError("Expected an array of shape (3, nx, ny, nz), got {}".format(data.shape))
        as_shape(data.shape[1:])
        if not np.all(np.isfinite(data)):
            raise ValueError("Vector field contains non-finite values")
        data.flags.writeable = False
        self.data = data
        self.kind = kind

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.data.shape[1:])

    def __repr__(self):
        return "VectorField(kind={}, shape={}, dtype={})".format(self.kind, tuple(self.shape), self.data.dtype)


class LabelVolume:
    """
    A 3D grid of integer labels.

    ATTRIBUTES
    :ivar data:         int32 array of shape (nx, ny, nz), read-only
    :ivar label_count:  labels are in [0, label_count)
    """

    def __init__(self, data, label_count=None):
        data = np.array(data)
        if data.ndim != 3:
            raise ValueError("Expected a 3D array for a label volume, got shape {}".format(data.shape))
        if not np.issubdtype(data.dtype, np.integer):
            rounded = np.rint(data)
            if not np.array_equal(rounded, data):
                raise ValueError("Label volumes can only hold integer values")
            data = rounded
        data = data.astype(np.int32)
        as_shape(data.shape)
        if label_count is None:
            label_count = int(data.max()) + 1
        if data.min() < 0 or data.max() >= label_count:
            raise ValueError("Labels should be in [0, {}), found range [{}, {}]".format(
                label_count, data.min(), data.max()))
        data.flags.writeable = False
        self.data = data
        self.label_count = int(label_count)

    @property
    def shape(self) -> Shape3:
        return Shape3(*self.data.shape)

    def one_hot(self, dtype=np.float64) -> np.ndarray:
        """Return an array of shape (label_count, nx, ny, nz) with one channel per label."""
        return (np.arange(self.label_count).reshape(-1, 1, 1, 1) == self.data[None]).astype(dtype)

    def __repr__(self):
        return "LabelVolume(shape={}, label_count={})".format(tuple(self.shape), self.label_count)


def _check_same_shape(*grids):
    shapes = {tuple(grid.shape) for grid in grids}
    if len(shapes) > 1:
        raise ShapeMismatchError("Expected grids of one shape, got {}".format(sorted(shapes)))


def _check_kind(field: VectorField, kind: str):
    if field.kind != kind:
        raise FieldKindError("Expected a {} field, got a {} field".format(kind, field.kind))


def identity_grid(shape, dtype=np.float32) -> VectorField:
    """Return the deformation that maps every voxel (i, j, k) to (i, j, k)."""
    shape = as_shape(shape)
    axes = [np.arange(n, dtype=dtype) for n in shape]
    return VectorField(np.stack(np.meshgrid(*axes, indexing="ij")), kind="deformation")


class TrilinearSampler:
    """
    Trilinear interpolation weights of a set of continuous sample points on a grid.

    Points outside the grid are clamped to the border (border-replicate). The sampler is built once per set
    of points and can then sample any number of channels, and give the adjoint of sampling with respect to
    the grid values and the derivative with respect to the point coordinates. Weights and sums are kept in
    64 bit; scatter-adds use np.bincount, so the result does not depend on thread scheduling.

    METHODS
    sample                  interpolate grid values at the points
    sample_adjoint          transpose of sample (scatter of point gradients onto the grid)
    coordinate_gradient     gradient of a weighted sum of samples with respect to the point coordinates
    """

    def __init__(self, grid_shape, coords):
        """
        :param grid_shape:  shape of the grid that is sampled
        :param coords:      array of shape (3, ...) with voxel coordinates of the sample points
        """
        self.grid_shape = as_shape(grid_shape)
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[0] != 3:
            raise ValueError("Expected coordinates of shape (3, ...), got {}".format(coords.shape))
        self.point_shape = coords.shape[1:]
        self._inside = []
        self._frac = []
        base = []
        for axis in range(3):
            n = self.grid_shape[axis]
            c = coords[axis].ravel()
            self._inside.append((c >= 0) & (c <= n - 1))
            c = np.clip(c, 0, n - 1)
            i0 = np.minimum(np.floor(c), n - 2).astype(np.intp)
            base.append(i0)
            self._frac.append(c - i0)
        _, ny, nz = self.grid_shape
        self._corners = []
        for dx in (0, 1):
            for dy in (0, 1):
                for dz in (0, 1):
                    index = ((base[0] + dx) * ny + base[1] + dy) * nz + base[2] + dz
                    self._corners.append(((dx, dy, dz), index))

    @property
    def point_count(self):
        return int(np.prod(self.point_shape, dtype=np.int64))

    def _factors(self, offset):
        return [f if o else 1.0 - f for f, o in zip(self._frac, offset)]

    def sample(self, values) -> np.ndarray:
        """
        Interpolate values at the points.

        :param values:  array of shape (..., nx, ny, nz)
        :return:        float64 array of shape (..., *point_shape)
        """
        values = np.asarray(values)
        lead = values.shape[:-3]
        flat = values.reshape(lead + (-1,))
        result = np.zeros(lead + (self.point_count,), dtype=np.float64)
        for offset, index in self._corners:
            fx, fy, fz = self._factors(offset)
            result += flat[..., index] * (fx * fy * fz)
        return result.reshape(lead + self.point_shape)

    def sample_adjoint(self, grad) -> np.ndarray:
        """
        Scatter gradients given at the points back onto the grid.

        :param grad:    array of shape (..., *point_shape)
        :return:        float64 array of shape (..., nx, ny, nz)
        """
        grad = np.asarray(grad, dtype=np.float64)
        lead = grad.shape[:grad.ndim - len(self.point_shape)]
        rows = grad.reshape((-1, self.point_count))
        voxels = self.grid_shape.voxel_count
        all_index = np.concatenate([index for _, index in self._corners])
        weights = [np.prod(self._factors(offset), axis=0) for offset, _ in self._corners]
        result = np.empty((rows.shape[0], voxels), dtype=np.float64)
        for r, row in enumerate(rows):
            contributions = np.concatenate([row * w for w in weights])
            result[r] = np.bincount(all_index, weights=contributions, minlength=voxels)
        return result.reshape(lead + tuple(self.grid_shape))

    def coordinate_gradient(self, values, grad) -> np.ndarray:
        """
        Gradient of sum(grad * sample(values)) with respect to the point coordinates.

        Channels in the leading axes are summed. Along an axis where a point was clamped the derivative is 0.

        :param values:  array of shape (..., nx, ny, nz)
        :param grad:    array of shape (..., *point_shape), same leading axes as values
        :return:        float64 array of shape (3, *point_shape)
        """
        values = np.asarray(values)
        flat = values.reshape((-1, self.grid_shape.voxel_count))
        grad = np.asarray(grad, dtype=np.float64).reshape((flat.shape[0], self.point_count))
        result = np.zeros((3, self.point_count), dtype=np.float64)
        for offset, index in self._corners:
            corner = (grad * flat[:, index]).sum(axis=0)
            factors = self._factors(offset)
            signs = [1.0 if o else -1.0 for o in offset]
            result[0] += corner * signs[0] * factors[1] * factors[2]
            result[1] += corner * factors[0] * signs[1] * factors[2]
            result[2] += corner * factors[0] * factors[1] * signs[2]
        for axis in range(3):
            result[axis] *= self._inside[axis]
        return result.reshape((3,) + self.point_shape)


def trilinear_sample(vol: ScalarVolume, point) -> float:
    """Interpolate vol at one continuous point (x, y, z), clamping to the border outside the grid."""
    coords = np.asarray(point, dtype=np.float64).reshape(3, 1)
    return float(TrilinearSampler(vol.shape, coords).sample(vol.data)[0])


def warp_scalar(m: ScalarVolume, phi: VectorField) -> ScalarVolume:
    """
    Warp an image with a deformation: output(x) = m(phi(x)), trilinear with border clamping.

    :param m:   image to warp
    :param phi: deformation field of the same shape
    :return:    warped image, same spacing as m
    """
    _check_kind(phi, "deformation")
    _check_same_shape(m, phi)
    dtype = np.result_type(m.data.dtype, phi.data.dtype)
    warped = TrilinearSampler(m.shape, phi.data).sample(m.data)
    return ScalarVolume(warped.astype(dtype), spacing=m.spacing)


def warp_labels(labels: LabelVolume, phi: VectorField) -> LabelVolume:
    """Warp a label map with nearest-neighbour sampling, so labels are preserved exactly."""
    _check_kind(phi, "deformation")
    _check_same_shape(labels, phi)
    index = []
    for axis in range(3):
        c = np.clip(phi.data[axis].astype(np.float64), 0, labels.shape[axis] - 1)
        index.append(np.floor(c + 0.5).astype(np.intp))
    return LabelVolume(labels.data[tuple(index)], label_count=labels.label_count)


def compose(phi_outer: VectorField, phi_inner: VectorField) -> VectorField:
    """
    Compose two deformations: result(x) = phi_outer(phi_inner(x)).

    phi_outer is interpolated trilinearly per channel, with border clamping.
    """
    _check_kind(phi_outer, "deformation")
    _check_kind(phi_inner, "deformation")
    _check_same_shape(phi_outer, phi_inner)
    dtype = np.result_type(phi_outer.data.dtype, phi_inner.data.dtype)
    composed = TrilinearSampler(phi_outer.shape, phi_inner.data).sample(phi_outer.data)
    return VectorField(composed.astype(dtype), kind="deformation")


def forward_difference(array, axis: int) -> np.ndarray:
    """
    Forward difference along one spatial axis of an array shaped (..., nx, ny, nz).

    The last plane along the axis is set to 0.
    """
    array = np.asarray(array, dtype=np.float64)
    ax = array.ndim - 3 + axis
    result = np.zeros_like(array)
    head = [slice(None)] * array.ndim
    tail = [slice(None)] * array.ndim
    head[ax] = slice(0, -1)
    tail[ax] = slice(1, None)
    result[tuple(head)] = array[tuple(tail)] - array[tuple(head)]
    return result


def forward_difference_adjoint(grad, axis: int) -> np.ndarray:
    """Transpose of forward_difference along the same axis."""
    grad = np.asarray(grad, dtype=np.float64)
    ax = grad.ndim - 3 + axis
    head = [slice(None)] * grad.ndim
    tail = [slice(None)] * grad.ndim
    head[ax] = slice(0, -1)
    tail[ax] = slice(1, None)
    g = grad[tuple(head)]
    result = np.zeros_like(grad)
    result[tuple(head)] -= g
    result[tuple(tail)] += g
    return result


def spatial_gradient(u) -> np.ndarray:
    """
    Partial derivatives of a vector field by forward differences.

    :param u:   VectorField (or array of shape (3, nx, ny, nz))
    :return:    array of shape (3, 3, nx, ny, nz); entry [c, d] holds du_c/dx_d, 0 on the last plane along d
    """
    data = u.data if isinstance(u, VectorField) else np.asarray(u)
    return np.stack([forward_difference(data, axis) for axis in range(3)], axis=1)


def _one_sided(array, axis, direction):
    """Derivative along a spatial axis, forward (+1) or backward (-1), falling back to the other side at the
    border."""
    ax = array.ndim - 3 + axis
    diff = np.diff(array, axis=ax)
    first = [slice(None)] * array.ndim
    last = [slice(None)] * array.ndim
    first[ax] = slice(0, 1)
    last[ax] = slice(-1, None)
    if direction > 0:
        return np.concatenate([diff, diff[tuple(last)]], axis=ax)
    return np.concatenate([diff[tuple(first)], diff], axis=ax)


def determinant3(jac) -> np.ndarray:
    """Determinant of an array of 3x3 matrices shaped (3, 3, ...)."""
    return (jac[0, 0] * (jac[1, 1] * jac[2, 2] - jac[1, 2] * jac[2, 1])
            - jac[0, 1] * (jac[1, 0] * jac[2, 2] - jac[1, 2] * jac[2, 0])
            + jac[0, 2] * (jac[1, 0] * jac[2, 1] - jac[1, 1] * jac[2, 0]))


def jacobian_matrices(phi: VectorField, scheme="central") -> np.ndarray:
    """
    Finite-difference Jacobian of a deformation.

    :param phi:     deformation (a displacement field is accepted and the identity is added)
    :param scheme:  "central" (one-sided at the borders), "forward", "backward", or a tuple of three
                    directions (+1 or -1), one per axis
    :return:        float64 array of shape (3, 3, nx, ny, nz); entry [c, d] holds dphi_c/dx_d
    """
    if phi.kind not in ("deformation", "displacement"):
        raise FieldKindError("Expected a deformation or displacement field, got a {} field".format(phi.kind))
    data = phi.data.astype(np.float64)
    if phi.kind == "displacement":
        data = data + identity_grid(phi.shape, dtype=np.float64).data
    if scheme == "central":
        columns = [np.gradient(data, axis=1 + axis) for axis in range(3)]
    else:
        if scheme == "forward":
            directions = (1, 1, 1)
        elif scheme == "backward":
            directions = (-1, -1, -1)
        else:
            directions = tuple(int(d) for d in scheme)
            if len(directions) != 3 or any(d not in (-1, 1) for d in directions):
                raise ValueError("Expected 'central', 'forward', 'backward' or three of +1/-1, got {}".format(
                    scheme))
        columns = [_one_sided(data, axis, d) for axis, d in enumerate(directions)]
    return np.stack(columns, axis=1)


def jacobian_determinants(phi: VectorField, scheme="central") -> ScalarVolume:
    """
    Determinant of the finite-difference Jacobian at each voxel.

    See jacobian_matrices for the schemes. The result is a float64 volume.
    """
    return ScalarVolume(determinant3(jacobian_matrices(phi, scheme)))


def interpolation_matrix(n_old: int, n_new: int) -> np.ndarray:
    """
    Linear interpolation matrix of shape (n_new, n_old) using the align-corners convention.

    New sample i sits at old coordinate i * (n_old - 1) / (n_new - 1), so both end points map onto each other.
    """
    positions = np.arange(n_new, dtype=np.float64) * (n_old - 1) / (n_new - 1)
    i0 = np.minimum(np.floor(positions), n_old - 2).astype(np.intp)
    t = positions - i0
    matrix = np.zeros((n_new, n_old), dtype=np.float64)
    rows = np.arange(n_new)
    matrix[rows, i0] = 1.0 - t
    matrix[rows, i0 + 1] += t
    return matrix


def resample_array(array, new_shape) -> np.ndarray:
    """Trilinear align-corners resampling of an array shaped (..., nx, ny, nz) to (..., *new_shape)."""
    result = np.asarray(array, dtype=np.float64)
    for axis, n_new in enumerate(as_shape(new_shape)):
        ax = result.ndim - 3 + axis
        matrix = interpolation_matrix(result.shape[ax], n_new)
        result = np.moveaxis(np.tensordot(matrix, result, axes=([1], [ax])), 0, ax)
    return result


def resample_array_adjoint(grad, old_shape) -> np.ndarray:
    """Transpose of resample_array: map a gradient on the new grid back to the old grid."""
    result = np.asarray(grad, dtype=np.float64)
    for axis, n_old in enumerate(as_shape(old_shape)):
        ax = result.ndim - 3 + axis
        matrix = interpolation_matrix(n_old, result.shape[ax])
        result = np.moveaxis(np.tensordot(matrix.T, result, axes=([1], [ax])), 0, ax)
    return result


def resample(vol, new_shape):
    """
    Resample a ScalarVolume or VectorField to a new grid size (trilinear, align corners).

    Vector values are not rescaled; the spacing of a scalar volume is adjusted so the physical extent stays.
    """
    new_shape = as_shape(new_shape)
    if isinstance(vol, ScalarVolume):
        spacing = tuple(s * (n_old - 1) / (n_new - 1) for s, n_old, n_new in zip(vol.spacing, vol.shape, new_shape))
        return ScalarVolume(resample_array(vol.data, new_shape).astype(vol.data.dtype), spacing=spacing)
    if isinstance(vol, VectorField):
        return VectorField(resample_array(vol.data, new_shape).astype(vol.data.dtype), kind=vol.kind)
    raise TypeError("Expected ScalarVolume or VectorField, got {}".format(type(vol)))
