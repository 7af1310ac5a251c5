"""
NAME
regtools

DESCRIPTION
Package for pretraining registration encoders on randomly generated image pairs and fine-tuning them on a
downstream registration task.

Beside the option to import this package and use the tools directly, a command line is provided
(synthreg.command_line).

PACKAGE CONTENTS
defaultvalues
ptools
volume
deform
synth
losses
metrics
network (package)
train
fileio

CLASSES
ScalarVolume
VectorField
LabelVolume
SsConfig
PerlinConfig
PairConfig
TrainingPair
DownstreamConfig
LossWeights
NccConfig
ModelConfig
RegistrationModel
TrainConfig
CurveLog

FUNCTIONS
warp_scalar, warp_labels, compose, jacobian_determinants, resample
scaling_and_squaring, displacement_of, deformation_of
perlin3, make_pair, pair_stream, make_downstream_dataset
ncc_loss, diffusion_reg, kl_gaussian, soft_dice_loss, pretrain_loss, finetune_loss
dice, ndv_percent, tre
pretrain, finetune, train_on_random_only, instance_optimize
read_rvol, write_rvol, read_nifti1, write_nifti1

DETAILED CONTENTS AND USE
volume - Dense grids (images, label maps, vector fields in voxel units) and trilinear warping. A deformation
    holds for every voxel the position to sample the moving image at.
deform - Scaling-and-squaring integration of stationary velocity fields, with its exact derivative.
synth - Random shape images made from the argmax of noise channels, random smooth velocity fields and
    registration pairs of one image deformed twice. Also the downstream synthetic family: one anatomy
    deformed per subject, with smooth intensity gradients and noise.
losses - Windowed NCC, diffusion regularizer, Gaussian KL divergence and soft Dice, each with its gradient,
    and the pretraining and fine-tuning objectives built from them.
network - The encoder with lightweight decoders and an ensemble head for pretraining, and the same encoder
    in a U-shaped backbone for fine-tuning. Pretrained encoder weights are moved to a backbone with
    transfer_encoder.
train - Adam, the training loops and the experiment drivers.
metrics - Dice, percentage of non-diffeomorphic volume and target registration error.
fileio - RVOL and NIfTI-1 volumes, landmark lists and run manifests.

defaultvalues contains every default setting, used both by the configuration classes and the command line.
"""

from . import defaultvalues
from . import network
from .volume import (ScalarVolume, VectorField, LabelVolume, Shape3, identity_grid, trilinear_sample, warp_scalar,
                     warp_labels, compose, spatial_gradient, jacobian_determinants, resample)
from .deform import SsConfig, scaling_and_squaring, displacement_of, deformation_of, ss_vjp
from .synth import (PerlinConfig, PairConfig, TrainingPair, PairProducer, DownstreamConfig, DownstreamDataset,
                    perlin3, multi_channel_labels, assign_intensities, random_svf, make_pair, pair_stream,
                    make_downstream_dataset, downstream_pair_stream)
from .losses import (LossWeights, NccConfig, LossResult, ncc_loss, diffusion_reg, kl_gaussian, soft_dice_loss,
                     velocity_loss, pretrain_loss, finetune_loss)
from .metrics import DiceReport, LandmarkSet, TreReport, dice, ndv_percent, tre
from .network import ModelConfig, GaussianField, RegistrationModel, save_checkpoint, load_checkpoint, transfer_encoder
from .train import (AdamState, TrainConfig, CurveLog, adam_step, pretrain, finetune, train_on_random_only,
                    instance_optimize, step_timer, epochs_to_threshold, evaluate_model, data_fraction_sweep,
                    run_ablation)
from .fileio import (read_rvol, write_rvol, read_nifti1, write_nifti1, read_landmarks, write_landmarks,
                     read_manifest, write_manifest)
from .ptools import RegistrationError, derive_seed, moving_average
