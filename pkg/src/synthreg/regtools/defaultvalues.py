"""
NAME
defaultvalues

DESCRIPTION
Default values that can be used by other modules in the synthreg package.
Full-scale values are kept next to the desk-scale values that the command line and the tests use, so it is
always clear which one a run is based on.
The configuration classes in the other modules take their defaults from here, and the packaged default
configuration file of the command line repeats them.

VARIABLES
default_output_folder
default_spacing
default_perlin_frequency, default_perlin_octaves, default_perlin_persistence
default_label_channels, default_svf_amplitude, default_svf_frequency, default_ss_steps
default_lambda, default_eta, default_ncc_window, default_ncc_window_full_scale, default_ncc_epsilon
default_log_variance_bounds
default_stages, default_base_channels, default_decoder_channels, default_leaky_slope
default_pretrain_lr, default_finetune_lr, default_pairs_per_epoch, default_pairs_per_epoch_full_scale
default_pretrain_epochs_full_scale, default_finetune_epochs_full_scale
default_adam_betas, default_adam_epsilon
default_smoothing_window, default_threshold_fraction
default_downstream_split, default_shape
"""

import os

# saving location
default_output_folder = os.path.join(os.path.expanduser("~"), "synthreg_runs")    # where runs are written

# grids
default_shape = (32, 32, 32)    # desk-scale volume size
default_spacing = (1.0, 1.0, 1.0)    # mm per voxel

# random shapes and deformations
default_perlin_frequency = 4    # lattice cells per axis
default_perlin_octaves = 1
default_perlin_persistence = 0.5    # amplitude decay per octave
default_label_channels = 16    # number of random shapes (argmax channels)
default_svf_amplitude = 3.0    # max velocity magnitude in voxels
default_svf_frequency = 4    # lattice cells per axis of the velocity noise
default_ss_steps = 7    # squaring steps
default_max_ss_steps = 12

# losses
default_lambda = 1.0    # diffusion regularizer weight
default_eta = 1e-7    # self-distillation KL weight
default_ncc_window = 5    # desk scale
default_ncc_window_full_scale = 9
default_ncc_epsilon = 1e-5
default_dice_epsilon = 1e-5
default_log_variance_bounds = (-10.0, 10.0)    # clamp of emitted log variances

# network
default_stages = 4
default_base_channels = 8    # doubles per encoder stage
default_decoder_channels = 4    # width of each lightweight decoder
default_leaky_slope = 0.2

# optimisation
default_pretrain_lr = 4e-4
default_finetune_lr = 1e-4
default_adam_betas = (0.9, 0.999)
default_adam_epsilon = 1e-8
default_pairs_per_epoch = 200    # desk scale
default_pairs_per_epoch_full_scale = 3000
default_pretrain_epochs_full_scale = 50
default_finetune_epochs_full_scale = 250

# curves and acceptance statistics
default_smoothing_window = 5
default_threshold_fraction = 0.95    # epochs-to-threshold uses 95% of the scratch run's final Dice

# downstream synthetic family
default_downstream_split = (64, 16, 16)    # train / validation / test volumes
default_downstream_labels = 8
default_downstream_frequency = 3
default_downstream_svf_amplitude = 2.5
default_downstream_noise = 0.02    # std of the additive Gaussian noise
default_data_fractions = (1.0, 0.8, 0.6, 0.4, 0.2, 0.1, 0.05)
