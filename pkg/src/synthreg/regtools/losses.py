"""
NAME
losses

DESCRIPTION
Scalar objectives of registration training, each returned together with its exact gradient: windowed local
normalized cross-correlation, the diffusion regularizer, the diagonal Gaussian KL divergence used for
self-distillation, the soft Dice loss, and their compositions for pretraining and fine-tuning.

All evaluation is done in 64 bit. Losses return a LossResult, which unpacks as (value, gradients).

CLASSES
LossWeights
NccConfig
LossResult

FUNCTIONS
box_sum
ncc_loss
diffusion_reg
kl_gaussian
soft_dice_loss
velocity_loss
pretrain_loss
finetune_loss
"""

import logging
from dataclasses import dataclass, field
import numpy as np
from scipy.ndimage import uniform_filter
from . import defaultvalues as dv
from .ptools import ShapeMismatchError
from .volume import TrilinearSampler, identity_grid, forward_difference, forward_difference_adjoint, as_shape
from .deform import SsConfig, integrate_velocity, ss_vjp

logger = logging.getLogger(__name__)

SIMILARITIES = ("ncc", "dice")


@dataclass(frozen=True)
class LossWeights:
    """Weight of the diffusion regularizer (lam) and of the self-distillation KL term (eta)."""
    lam: float = dv.default_lambda
    eta: float = dv.default_eta

    def __post_init__(self):
        if self.lam < 0 or self.eta < 0:
            raise ValueError("Expected non-negative loss weights, got lam={} and eta={}".format(self.lam, self.eta))


@dataclass(frozen=True)
class NccConfig:
    """Cube side of the NCC window (odd, at least 3) and the denominator guard."""
    window: int = dv.default_ncc_window
    epsilon: float = dv.default_ncc_epsilon

    def __post_init__(self):
        if self.window < 3 or self.window % 2 == 0:
            raise ValueError("Expected an odd NCC window of at least 3, got {}".format(self.window))
        if self.epsilon <= 0:
            raise ValueError("Expected a positive epsilon, got {}".format(self.epsilon))


@dataclass
class LossResult:
    """
    Value of a loss with its gradients.

    :ivar value:        float
    :ivar gradients:    dict of float64 arrays, keyed by input name
    :ivar terms:        dict of named partial values, for logging
    """
    value: float
    gradients: dict = field(default_factory=dict)
    terms: dict = field(default_factory=dict)

    def __iter__(self):
        yield self.value
        yield self.gradients


def _array(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def _check_shapes(a, b):
    if a.shape != b.shape:
        raise ShapeMismatchError("Expected equal shapes, got {} and {}".format(a.shape, b.shape))


def box_sum(array, window: int) -> np.ndarray:
    """Sum over the window cube around every voxel, counting only voxels inside the grid."""
    return uniform_filter(array, size=window, mode="constant", cval=0.0) * window ** 3


def ncc_loss(warped, fixed, cfg=NccConfig()) -> LossResult:
    """
    Windowed local NCC loss: -mean over voxels of cross**2 / (var_a * var_b + epsilon).

    Window statistics use the voxels of the window that lie inside the grid. The sum over the window is a
    symmetric zero-padded filter, so it is its own transpose, which gives the gradient.

    :param warped:  ScalarVolume or array, the warped moving image
    :param fixed:   ScalarVolume or array of the same shape
    :param cfg:     NccConfig
    :return:        LossResult with gradients "warped" and "fixed"
    """
    a = _array(warped)
    b = _array(fixed)
    _check_shapes(a, b)
    w = cfg.window
    n = box_sum(np.ones_like(a), w)
    sa, sb = box_sum(a, w), box_sum(b, w)
    saa, sbb, sab = box_sum(a * a, w), box_sum(b * b, w), box_sum(a * b, w)
    cross = sab - sa * sb / n
    var_a = saa - sa * sa / n
    var_b = sbb - sb * sb / n
    denominator = var_a * var_b + cfg.epsilon
    cc = cross * cross / denominator
    value = -float(cc.mean())

    g = -1.0 / a.size
    g_cross = g * 2 * cross / denominator
    g_var_a = -g * cross * cross * var_b / denominator ** 2
    g_var_b = -g * cross * cross * var_a / denominator ** 2
    g_sa = -g_cross * sb / n - 2 * g_var_a * sa / n
    g_sb = -g_cross * sa / n - 2 * g_var_b * sb / n
    s_sab = box_sum(g_cross, w)
    grad_a = box_sum(g_sa, w) + 2 * a * box_sum(g_var_a, w) + b * s_sab
    grad_b = box_sum(g_sb, w) + 2 * b * box_sum(g_var_b, w) + a * s_sab
    return LossResult(value, {"warped": grad_a, "fixed": grad_b}, {"ncc": value})


def diffusion_reg(u) -> LossResult:
    """
    Diffusion regularizer: mean over voxels and the 9 partial derivatives of squared forward differences.

    :param u:   displacement VectorField or array of shape (3, nx, ny, nz)
    :return:    LossResult with gradient "u"
    """
    data = _array(u)
    count = 9 * data[0].size
    value = 0.0
    grad = np.zeros_like(data)
    for axis in range(3):
        diff = forward_difference(data, axis)
        value += float(np.sum(diff * diff))
        grad += forward_difference_adjoint(2 * diff, axis)
    return LossResult(value / count, {"u": grad / count}, {"diffusion": value / count})


def kl_gaussian(ens, dec) -> LossResult:
    """
    KL divergence KL(ens || dec) between diagonal Gaussians, averaged over voxels and components.

    Both arguments carry a mean and a log variance (attributes mean and log_variance).

    :return:    LossResult with gradients "ens_mean", "ens_log_variance", "dec_mean", "dec_log_variance"
    """
    mu_e, lv_e = _array(ens.mean), _array(ens.log_variance)
    mu_d, lv_d = _array(dec.mean), _array(dec.log_variance)
    for x in (lv_e, mu_d, lv_d):
        _check_shapes(mu_e, x)
    count = mu_e.size
    var_e = np.exp(lv_e)
    inv_var_d = np.exp(-lv_d)
    diff = mu_e - mu_d
    kl = 0.5 * (lv_d - lv_e) + (var_e + diff * diff) * inv_var_d / 2 - 0.5
    value = float(kl.mean())
    grad_mu = diff * inv_var_d / count
    gradients = {
        "ens_mean": grad_mu,
        "dec_mean": -grad_mu,
        "ens_log_variance": (-0.5 + 0.5 * var_e * inv_var_d) / count,
        "dec_log_variance": (0.5 - (var_e + diff * diff) * inv_var_d / 2) / count,
    }
    return LossResult(value, gradients, {"kl": value})


def soft_dice_loss(warped_probs, fixed_probs, epsilon=dv.default_dice_epsilon) -> LossResult:
    """
    Soft Dice loss over label channels: 1 - mean over labels of (2 sum(ab) + eps) / (sum(a) + sum(b) + eps).

    :param warped_probs:    array of shape (L, nx, ny, nz), for example linearly warped one-hot channels
    :param fixed_probs:     array of the same shape
    :return:                LossResult with gradients "warped" and "fixed"
    """
    a = _array(warped_probs)
    b = _array(fixed_probs)
    if a.ndim != 4 or b.ndim != 4 or a.shape[0] != b.shape[0]:
        raise ShapeMismatchError("Expected label channels of one count, got {} and {}".format(a.shape, b.shape))
    _check_shapes(a, b)
    labels = a.shape[0]
    axes = (1, 2, 3)
    overlap = (a * b).sum(axis=axes)
    denominator = a.sum(axis=axes) + b.sum(axis=axes) + epsilon
    dice = (2 * overlap + epsilon) / denominator
    value = 1.0 - float(dice.mean())
    d = denominator.reshape(-1, 1, 1, 1)
    q = dice.reshape(-1, 1, 1, 1)
    grad_a = -(2 * b / d - q / d) / labels
    grad_b = -(2 * a / d - q / d) / labels
    return LossResult(value, {"warped": grad_a, "fixed": grad_b}, {"dice_loss": value})


def velocity_loss(velocity, fixed, moving, lam=dv.default_lambda, ncc_cfg=NccConfig(), ss_cfg=SsConfig(),
                  similarity="ncc", fixed_probs=None, moving_probs=None, flow=None) -> LossResult:
    """
    Similarity of the moving image warped by SS(velocity) to the fixed image, plus lam times the diffusion
    regularizer of the displacement, with the gradient with respect to the velocity.

    :param velocity:        array of shape (3, nx, ny, nz)
    :param similarity:      "ncc" on the images, or "dice" on the label probabilities
    :param fixed_probs:     (L, nx, ny, nz) label probabilities of the fixed image, for "dice"
    :param moving_probs:    (L, nx, ny, nz) label probabilities of the moving image, for "dice"
    :param flow:            (deformation array, FlowRecord) of velocity when already integrated
    :return:                LossResult with gradient "velocity" and array "phi" and "warped" in terms
    """
    if similarity not in SIMILARITIES:
        raise ValueError("Expected similarity in {}, got {}".format(SIMILARITIES, similarity))
    velocity = _array(velocity)
    f = _array(fixed)
    m = _array(moving)
    _check_shapes(f, m)
    _check_shapes(velocity[0], f)
    shape = as_shape(f.shape)
    phi, record = flow if flow is not None else integrate_velocity(velocity, ss_cfg.steps)
    sampler = TrilinearSampler(shape, phi)
    warped = sampler.sample(m)
    if similarity == "ncc":
        sim = ncc_loss(warped, f, ncc_cfg)
        grad_phi = sampler.coordinate_gradient(m, sim.gradients["warped"])
    else:
        if fixed_probs is None or moving_probs is None:
            raise ValueError("The dice similarity needs label probabilities of both images")
        moving_probs = _array(moving_probs)
        sim = soft_dice_loss(sampler.sample(moving_probs), fixed_probs)
        grad_phi = sampler.coordinate_gradient(moving_probs, sim.gradients["warped"])
    reg = diffusion_reg(phi - identity_grid(shape, dtype=np.float64).data)
    value = sim.value + lam * reg.value
    grad_phi = grad_phi + lam * reg.gradients["u"]
    grad_velocity = ss_vjp(velocity, ss_cfg, grad_phi, record)
    terms = {"similarity": sim.value, "diffusion": reg.value, "phi": phi, "warped": warped}
    return LossResult(value, {"velocity": grad_velocity}, terms)


def pretrain_loss(outputs, fixed, moving, weights=LossWeights(), ncc_cfg=NccConfig(), ss_cfg=SsConfig(),
                  similarity="ncc", fixed_probs=None, moving_probs=None) -> LossResult:
    """
    Pretraining objective: similarity of the moving image warped by SS(ensemble mean) to the fixed image,
    plus lam times the diffusion of the ensemble displacement, plus eta times the KL divergence of the
    ensemble to every stage distribution, averaged over the K stages.

    :param outputs: object with attributes ensemble (GaussianField at full resolution), stages (list of
                    GaussianField upsampled to full resolution) and optionally flow (deformation array,
                    FlowRecord) of the ensemble mean
    :return:        LossResult with gradients "ensemble_mean", "ensemble_log_variance", "stage_means" and
                    "stage_log_variances" (lists, one array per stage)
    """
    ensemble = outputs.ensemble
    stages = list(outputs.stages)
    core = velocity_loss(ensemble.mean, fixed, moving, weights.lam, ncc_cfg, ss_cfg, similarity,
                         fixed_probs, moving_probs, flow=getattr(outputs, "flow", None))
    grad_ens_mean = core.gradients["velocity"]
    grad_ens_lv = np.zeros_like(grad_ens_mean)
    stage_means = []
    stage_log_variances = []
    kl_total = 0.0
    scale = weights.eta / max(len(stages), 1)
    for stage in stages:
        kl = kl_gaussian(ensemble, stage)
        kl_total += kl.value
        grad_ens_mean = grad_ens_mean + scale * kl.gradients["ens_mean"]
        grad_ens_lv = grad_ens_lv + scale * kl.gradients["ens_log_variance"]
        stage_means.append(scale * kl.gradients["dec_mean"])
        stage_log_variances.append(scale * kl.gradients["dec_log_variance"])
    kl_mean = kl_total / max(len(stages), 1)
    value = core.value + weights.eta * kl_mean
    gradients = {
        "ensemble_mean": grad_ens_mean,
        "ensemble_log_variance": grad_ens_lv,
        "stage_means": stage_means,
        "stage_log_variances": stage_log_variances,
    }
    terms = dict(core.terms, kl=kl_mean)
    return LossResult(value, gradients, terms)


def finetune_loss(warped, fixed, u, lam=dv.default_lambda, ncc_cfg=NccConfig()) -> LossResult:
    """
    Fine-tuning objective: NCC(warped, fixed) + lam * diffusion(u).

    :return:    LossResult with gradients "warped" and "u"
    """
    sim = ncc_loss(warped, fixed, ncc_cfg)
    reg = diffusion_reg(u)
    value = sim.value + lam * reg.value
    gradients = {"warped": sim.gradients["warped"], "u": lam * reg.gradients["u"]}
    return LossResult(value, gradients, {"similarity": sim.value, "diffusion": reg.value})
