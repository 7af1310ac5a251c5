"""
NAME
selftest

DESCRIPTION
Numerical checks of the registration toolbox, grouped in four suites:

gradients               finite-difference check of every hand-written gradient: the losses, warping,
                        scaling-and-squaring at several step counts, convolution and both network modes end
                        to end. Everything runs in 64 bit on tiny inputs and passes below a relative error of
                        1e-3.
diffeomorphism          random velocity fields at the default configuration integrate to deformations without
                        folds, and a folded deformation is recognized as such.
loss_oracles            closed-form values of the losses and the Adam update against a plain re-implementation.
scaling_and_squaring    a constant velocity integrates to a translation, and general fields agree with a
                        fine-stepped Euler integration.

FUNCTIONS
directional_check
euler_integrate
reference_adam
run_selftest
"""

import math
import logging
from collections import namedtuple
import numpy as np
from ..regtools.defaultvalues import default_shape
from ..regtools.volume import ScalarVolume, VectorField, TrilinearSampler, identity_grid, warp_scalar
from ..regtools.deform import SsConfig, integrate_velocity, ss_vjp
from ..regtools.synth import PairConfig, random_svf
from ..regtools.losses import (NccConfig, LossWeights, ncc_loss, diffusion_reg, kl_gaussian, soft_dice_loss,
                               pretrain_loss, velocity_loss)
from ..regtools.metrics import ndv_percent
from ..regtools.network import ModelConfig, RegistrationModel, GaussianField
from ..regtools.network.layers import conv3d, conv3d_backward
from ..regtools.train import AdamState, adam_step

logger = logging.getLogger(__name__)

TOLERANCE = 1e-3
DIFFEOMORPHISM_SEEDS = 50
EULER_STEPS = 128
EULER_LIMIT = 0.05
EULER_MARGIN = 6

SelftestResult = namedtuple("SelftestResult", ["suite", "check", "value", "passed"])


def directional_check(fn, x, gradient, rng, h=1e-6, directions=3):
    """
    Compare gradient with central differences of fn along random directions.

    :param fn:          scalar function of an array shaped like x
    :param gradient:    analytic gradient of fn at x
    :return:            largest relative error over the directions
    """
    worst = 0.0
    for _ in range(directions):
        direction = rng.normal(size=x.shape)
        numeric = (fn(x + h * direction) - fn(x - h * direction)) / (2 * h)
        analytic = float(np.sum(gradient * direction))
        error = abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-10)
        worst = max(worst, error)
    return worst


def euler_integrate(velocity, steps=EULER_STEPS) -> np.ndarray:
    """
    Deformation of a stationary velocity field by forward Euler steps along every trajectory.

    :param velocity:    array of shape (3, nx, ny, nz) in voxel units
    :return:            float64 deformation array of the same shape
    """
    velocity = np.asarray(velocity, dtype=np.float64)
    shape = velocity.shape[1:]
    positions = identity_grid(shape, dtype=np.float64).data.copy()
    for _ in range(steps):
        positions = positions + TrilinearSampler(shape, positions).sample(velocity) / steps
    return positions


def reference_adam(params, gradient_fn, steps, lr, betas=(0.9, 0.999), epsilon=1e-8):
    """
    Adam on a list of floats, one coordinate at a time.

    :param gradient_fn: maps the parameter list to its gradient list
    :return:            list of parameter lists after every step
    """
    params = [float(p) for p in params]
    first = [0.0] * len(params)
    second = [0.0] * len(params)
    trajectory = []
    for step in range(1, steps + 1):
        grads = gradient_fn(params)
        for i, g in enumerate(grads):
            first[i] = betas[0] * first[i] + (1 - betas[0]) * g
            second[i] = betas[1] * second[i] + (1 - betas[1]) * g * g
            m_hat = first[i] / (1 - betas[0] ** step)
            v_hat = second[i] / (1 - betas[1] ** step)
            params[i] -= lr * m_hat / (math.sqrt(v_hat) + epsilon)
        trajectory.append(list(params))
    return trajectory


def _images(rng, shape):
    return rng.random(shape), rng.random(shape)


def _interior(margin):
    return (slice(None),) + (slice(margin, -margin),) * 3


def _check_ncc(rng):
    a, b = _images(rng, (8, 8, 8))
    cfg = NccConfig(window=3)
    grads = ncc_loss(a, b, cfg).gradients
    return max(directional_check(lambda x: ncc_loss(x, b, cfg).value, a, grads["warped"], rng),
               directional_check(lambda x: ncc_loss(a, x, cfg).value, b, grads["fixed"], rng))


def _check_diffusion(rng):
    u = rng.normal(size=(3, 6, 6, 6))
    return directional_check(lambda x: diffusion_reg(x).value, u, diffusion_reg(u).gradients["u"], rng)


def _check_kl(rng):
    fields = [rng.normal(size=(3, 4, 4, 4)) for _ in range(4)]

    def kl(values):
        return kl_gaussian(GaussianField(values[0], values[1]), GaussianField(values[2], values[3]))

    grads = kl(fields).gradients
    names = ("ens_mean", "ens_log_variance", "dec_mean", "dec_log_variance")
    worst = 0.0
    for index, name in enumerate(names):
        def partial(x, index=index):
            values = list(fields)
            values[index] = x
            return kl(values).value
        worst = max(worst, directional_check(partial, fields[index], grads[name], rng))
    return worst


def _check_dice(rng):
    a = rng.random((3, 5, 5, 5))
    b = rng.random((3, 5, 5, 5))
    grads = soft_dice_loss(a, b).gradients
    return directional_check(lambda x: soft_dice_loss(x, b).value, a, grads["warped"], rng)


def _check_warp(rng):
    shape = (6, 6, 6)
    moving = rng.normal(size=shape)
    # sample points away from the lattice planes, where interpolation has kinks
    phi = rng.integers(0, 5, size=(3,) + shape) + rng.uniform(0.1, 0.9, size=(3,) + shape)
    weights = rng.normal(size=shape)
    sampler = TrilinearSampler(shape, phi)

    def warped_sum(image, coords):
        return float(np.sum(warp_scalar(ScalarVolume(image), VectorField(coords, kind="deformation")).data
                            * weights))

    return max(directional_check(lambda x: warped_sum(moving, x), phi,
                                 sampler.coordinate_gradient(moving, weights), rng),
               directional_check(lambda x: warped_sum(x, phi), moving, sampler.sample_adjoint(weights), rng))


def _check_scaling_and_squaring(rng, steps):
    v = rng.normal(scale=1.5, size=(3, 6, 6, 6))
    weights = rng.normal(size=v.shape)
    cfg = SsConfig(steps)
    gradient = ss_vjp(v, cfg, weights)
    return directional_check(lambda x: float(np.sum(integrate_velocity(x, cfg.steps)[0] * weights)), v, gradient, rng)


def _check_conv(rng):
    x = rng.normal(size=(2, 5, 5, 5))
    weight = rng.normal(size=(3, 2, 3, 3, 3))
    bias = rng.normal(size=3)
    upstream = rng.normal(size=(3, 5, 5, 5))
    grad_x, grad_w, grad_b = conv3d_backward(x, weight, upstream)
    return max(directional_check(lambda y: float(np.sum(conv3d(y, weight, bias) * upstream)), x, grad_x, rng),
               directional_check(lambda w: float(np.sum(conv3d(x, w, bias) * upstream)), weight, grad_w, rng),
               directional_check(lambda c: float(np.sum(conv3d(x, weight, c) * upstream)), bias, grad_b, rng))


def _randomize_heads(model, rng, scale=0.05):
    for name in model.parameter_names:
        if "head" in name:
            model[name][...] = rng.normal(scale=scale, size=model[name].shape)


def _model_check(rng, mode):
    cfg = ModelConfig(stages=2, base_channels=2, decoder_channels=2, mode=mode, dtype="float64", ss_steps=3,
                      seed=int(rng.integers(1000)))
    model = RegistrationModel(cfg)
    _randomize_heads(model, rng)
    f, m = _images(rng, (8, 8, 8))
    weights = LossWeights(1.0, 0.5)
    ncc = NccConfig(window=3)
    ss = SsConfig(cfg.ss_steps)

    def loss():
        outputs = model.forward(f, m)
        if mode == "pretrain":
            return pretrain_loss(outputs, f, m, weights, ncc, ss)
        return velocity_loss(outputs.velocity, f, m, 1.0, ncc, ss, flow=outputs.flow)

    gradient = model.backward(loss().gradients)
    start = model.params.copy()

    def value(params):
        model.params[...] = params
        result = loss().value
        model.params[...] = start
        return result

    return directional_check(value, start, gradient, rng)


def _gradient(check):
    def run(rng):
        error = check(rng)
        return error, error < TOLERANCE
    return run


def _random_fields_without_folds(rng):
    cfg = PairConfig()
    seeds = rng.integers(2 ** 31, size=DIFFEOMORPHISM_SEEDS)
    worst = 0.0
    for seed in seeds:
        v = random_svf(default_shape, cfg, int(seed)).data
        phi = VectorField(integrate_velocity(v, cfg.ss_steps)[0], kind="deformation")
        worst = max(worst, ndv_percent(phi))
    return worst, worst == 0.0


def _folded_field(rng):
    data = identity_grid((8, 8, 8), dtype=np.float64).data.copy()
    data[0, 3], data[0, 4] = data[0, 4].copy(), data[0, 3].copy()
    percent = ndv_percent(VectorField(data, kind="deformation"))
    return percent, percent > 0


def _ncc_of_an_image_with_itself(rng):
    image = rng.random((8, 8, 8))
    value = ncc_loss(image, image, NccConfig(window=3)).value
    return abs(value + 1.0), abs(value + 1.0) < TOLERANCE


def _ncc_affine_invariance(rng):
    a, b = _images(rng, (8, 8, 8))
    cfg = NccConfig(window=3)
    gap = abs(ncc_loss(2.0 * a + 3.0, b, cfg).value - ncc_loss(a, b, cfg).value)
    return gap, gap < TOLERANCE


def _kl_closed_form(rng):
    shape = (3, 4, 4, 4)
    ens = GaussianField(np.ones(shape), np.zeros(shape))
    dec = GaussianField(np.zeros(shape), np.zeros(shape))
    gap = abs(kl_gaussian(ens, dec).value - 0.5)
    return gap, gap < 1e-12


def _diffusion_of_a_constant(rng):
    u = np.broadcast_to(rng.normal(size=(3, 1, 1, 1)), (3, 6, 6, 6)).copy()
    value = abs(diffusion_reg(u).value)
    return value, value < 1e-12


def _adam_against_reference(rng):
    curvature = rng.uniform(0.5, 2.0, size=10)
    centre = rng.normal(size=10)
    start = rng.normal(size=10)

    def gradient(params):
        return [a * (p - c) for a, p, c in zip(curvature, params, centre)]

    expected = reference_adam(start, gradient, steps=100, lr=0.05)
    params = start.copy()
    state = AdamState(params.size, lr=0.05)
    worst = 0.0
    for step in range(100):
        adam_step(params, np.array(gradient(params)), state)
        worst = max(worst, float(np.abs(params - expected[step]).max()))
    return worst, worst < 1e-10


def _constant_velocity_translation(rng):
    shift = rng.uniform(-1.5, 1.5, size=3)
    velocity = np.broadcast_to(shift.reshape(3, 1, 1, 1), (3, 16, 16, 16))
    phi = integrate_velocity(velocity, PairConfig().ss_steps)[0]
    expected = identity_grid((16, 16, 16), dtype=np.float64).data + shift.reshape(3, 1, 1, 1)
    error = float(np.abs(phi - expected)[_interior(3)].max())
    return error, error < 1e-4


def _euler_agreement(rng):
    cfg = PairConfig()
    worst = 0.0
    for seed in rng.integers(2 ** 31, size=3):
        v = random_svf(default_shape, cfg, int(seed)).data
        phi = integrate_velocity(v, cfg.ss_steps)[0]
        worst = max(worst, float(np.abs(phi - euler_integrate(v))[_interior(EULER_MARGIN)].max()))
    return worst, worst < EULER_LIMIT


SUITES = {
    "gradients": {
        "ncc_loss": _gradient(_check_ncc),
        "diffusion_reg": _gradient(_check_diffusion),
        "kl_gaussian": _gradient(_check_kl),
        "soft_dice_loss": _gradient(_check_dice),
        "warp": _gradient(_check_warp),
        "scaling_and_squaring_0": _gradient(lambda rng: _check_scaling_and_squaring(rng, 0)),
        "scaling_and_squaring_1": _gradient(lambda rng: _check_scaling_and_squaring(rng, 1)),
        "scaling_and_squaring_4": _gradient(lambda rng: _check_scaling_and_squaring(rng, 4)),
        "scaling_and_squaring_7": _gradient(lambda rng: _check_scaling_and_squaring(rng, 7)),
        "conv3d": _gradient(_check_conv),
        "pretrain model": _gradient(lambda rng: _model_check(rng, "pretrain")),
        "backbone model": _gradient(lambda rng: _model_check(rng, "backbone")),
    },
    "diffeomorphism": {
        "max ndv_percent": _random_fields_without_folds,
        "folded ndv_percent": _folded_field,
    },
    "loss_oracles": {
        "ncc self": _ncc_of_an_image_with_itself,
        "ncc affine": _ncc_affine_invariance,
        "kl closed form": _kl_closed_form,
        "diffusion constant": _diffusion_of_a_constant,
        "adam reference": _adam_against_reference,
    },
    "scaling_and_squaring": {
        "constant translation": _constant_velocity_translation,
        "euler agreement": _euler_agreement,
    },
}


def run_selftest(seed=0, suites=None):
    """
    Run the checks of the given suites, all of them by default.

    :return:    list of SelftestResult(suite, check, value, passed); value is the error or statistic the check
                judges
    """
    suites = list(SUITES) if not suites else list(suites)
    unknown = [name for name in suites if name not in SUITES]
    if unknown:
        raise ValueError("Unknown selftest suites {}, expected some of {}".format(unknown, list(SUITES)))
    results = []
    for suite_index, suite in enumerate(SUITES):
        if suite not in suites:
            continue
        for index, (name, check) in enumerate(SUITES[suite].items()):
            rng = np.random.default_rng([seed, suite_index, index])
            value, passed = check(rng)
            logger.info("%-20s %-22s %.2e %s", suite, name, value, "ok" if passed else "FAILED")
            results.append(SelftestResult(suite, name, float(value), bool(passed)))
    return results
