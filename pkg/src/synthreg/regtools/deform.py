"""
NAME
deform

DESCRIPTION
Integration of stationary velocity fields by scaling-and-squaring, with an exact reverse-mode derivative.

The velocity is scaled down by 2**N and added to the identity grid; the resulting small deformation is then
composed with itself N times. The intermediate deformations are kept in a FlowRecord so the derivative can be
evaluated without repeating the forward computation.

CLASSES
SsConfig
FlowRecord

FUNCTIONS
integrate_velocity
scaling_and_squaring
displacement_of
deformation_of
ss_vjp
"""

import logging
from dataclasses import dataclass
import numpy as np
from .defaultvalues import default_ss_steps, default_max_ss_steps
from .ptools import FieldKindError, ShapeMismatchError
from .volume import VectorField, TrilinearSampler, identity_grid, as_shape

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SsConfig:
    """Number of squaring steps N, 0 <= N <= 12."""
    steps: int = default_ss_steps

    def __post_init__(self):
        if not 0 <= self.steps <= default_max_ss_steps:
            raise ValueError("Expected 0 <= steps <= {}, got {}".format(default_max_ss_steps, self.steps))


class FlowRecord:
    """
    Intermediates of one scaling-and-squaring run.

    :ivar steps:        number of squarings
    :ivar inputs:       deformation arrays that were squared, in order
    :ivar samplers:     TrilinearSampler of every squaring (the input sampled at itself)
    """

    def __init__(self, steps, inputs, samplers):
        self.steps = steps
        self.inputs = inputs
        self.samplers = samplers


def integrate_velocity(velocity, steps: int):
    """
    Scaling-and-squaring on a raw velocity array.

    :param velocity:    array of shape (3, nx, ny, nz) in voxel units
    :param steps:       number of squarings N
    :return:            (float64 deformation array, FlowRecord)
    """
    velocity = np.asarray(velocity, dtype=np.float64)
    shape = as_shape(velocity.shape[1:])
    phi = identity_grid(shape, dtype=np.float64).data + velocity / 2 ** steps
    inputs = []
    samplers = []
    for _ in range(steps):
        sampler = TrilinearSampler(shape, phi)
        inputs.append(phi)
        samplers.append(sampler)
        phi = sampler.sample(phi)
    return phi, FlowRecord(steps, inputs, samplers)


def scaling_and_squaring(v: VectorField, cfg=SsConfig()) -> VectorField:
    """
    Deformation generated by a stationary velocity field.

    :param v:   velocity field
    :param cfg: SsConfig with the number of squaring steps
    :return:    deformation field with the dtype of v
    """
    if v.kind != "velocity":
        raise FieldKindError("Expected a velocity field, got a {} field".format(v.kind))
    phi, _ = integrate_velocity(v.data, cfg.steps)
    return VectorField(phi.astype(v.data.dtype), kind="deformation")


def displacement_of(phi: VectorField) -> VectorField:
    """Return the displacement u = phi - identity of a deformation."""
    if phi.kind != "deformation":
        raise FieldKindError("Expected a deformation field, got a {} field".format(phi.kind))
    identity = identity_grid(phi.shape, dtype=phi.data.dtype).data
    return VectorField(phi.data - identity, kind="displacement")


def deformation_of(u: VectorField) -> VectorField:
    """Return the deformation identity + u of a displacement."""
    if u.kind != "displacement":
        raise FieldKindError("Expected a displacement field, got a {} field".format(u.kind))
    identity = identity_grid(u.shape, dtype=u.data.dtype).data
    return VectorField(u.data + identity, kind="deformation")


def ss_vjp(v, cfg, grad_phi, record=None) -> np.ndarray:
    """
    Vector-Jacobian product of scaling-and-squaring: gradient with respect to the velocity.

    Every squaring phi_out(x) = phi_in(phi_in(x)) depends on phi_in twice, as the sampled values and as the
    sample positions, so the gradient is the sum of the scatter (adjoint of sampling) and the coordinate
    derivative of the trilinear interpolation.

    :param v:           velocity field (VectorField or array of shape (3, nx, ny, nz))
    :param cfg:         SsConfig used in the forward computation
    :param grad_phi:    gradient of some scalar with respect to the deformation, shape (3, nx, ny, nz)
    :param record:      FlowRecord of the forward computation; recomputed when not given
    :return:            float64 array of shape (3, nx, ny, nz)
    """
    data = v.data if isinstance(v, VectorField) else np.asarray(v)
    grad = np.asarray(grad_phi, dtype=np.float64)
    if grad.shape != data.shape:
        raise ShapeMismatchError("Gradient of shape {} does not match velocity of shape {}".format(
            grad.shape, data.shape))
    if record is None:
        _, record = integrate_velocity(data, cfg.steps)
    for phi_in, sampler in zip(reversed(record.inputs), reversed(record.samplers)):
        grad = sampler.sample_adjoint(grad) + sampler.coordinate_gradient(phi_in, grad)
    return grad / 2 ** record.steps
