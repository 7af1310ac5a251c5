"""
NAME
network

DESCRIPTION
This package is part of the regtools toolset. It provides the convolutional registration network: an encoder
with lightweight per-stage decoders and an ensemble head for pretraining, and the same encoder with a
U-shaped decoder as the backbone for fine-tuning. Gradients are computed exactly by a recorded forward pass
and a hand-written backward pass, so no automatic differentiation library is needed.
When used for scripting, build a RegistrationModel from a ModelConfig, call forward and pass the loss
gradients to backward. Checkpoints are written with save_checkpoint and read with load_checkpoint.

CLASSES
ModelConfig
GaussianField
RegistrationModel

FUNCTIONS
save_checkpoint
load_checkpoint
transfer_encoder
"""

from .model import (ModelConfig, GaussianField, PretrainOutputs, BackboneOutputs, RegistrationModel,
                    save_checkpoint, load_checkpoint, checkpoint_bytes, model_from_bytes, transfer_encoder)
