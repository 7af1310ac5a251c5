"""
NAME
model

DESCRIPTION
The registration network. A K-stage convolutional encoder reads the fixed and moving image as two channels.
In pretrain mode a lightweight decoder (two convolutions and a registration head) is attached to every
encoder stage and predicts a Gaussian distribution over a velocity field at the resolution of its stage; an
ensemble head combines the upsampled features of all decoders into a full resolution distribution, whose
mean is integrated and used to warp the moving image. In backbone mode the encoder feeds a U-shaped decoder
with skip connections and a single velocity head.

All parameters live in one flat array with named views, and the gradients in a second array with the same
layout, so an optimizer only deals with two vectors. The forward pass keeps a record of its intermediates;
backward uses and then clears it. A model instance must not run forward or backward from two threads.

CLASSES
ModelConfig
GaussianField
PretrainOutputs
BackboneOutputs
RegistrationModel

FUNCTIONS
save_checkpoint
load_checkpoint
checkpoint_bytes
model_from_bytes
transfer_encoder
"""

import json
import struct
import logging
import dataclasses
from dataclasses import dataclass
import numpy as np
from .. import defaultvalues as dv
from ..ptools import (ForwardRecordError, ConfigMismatchError, CheckpointFormatError, ShapeMismatchError,
                      derive_seed, atomic_write)
from ..volume import ScalarVolume, VectorField, TrilinearSampler, as_shape
from ..deform import integrate_velocity, SsConfig
from .layers import (conv3d, conv3d_backward, leaky_relu, leaky_relu_backward, avg_pool2, avg_pool2_backward,
                     upsample, upsample_backward, init_conv)

logger = logging.getLogger(__name__)

MODES = ("pretrain", "backbone")
DTYPES = ("float32", "float64")
CHECKPOINT_MAGIC = b"RREG"
CHECKPOINT_VERSION = 1
_DTYPE_CODES = {np.dtype("<f4"): 1, np.dtype("<f8"): 3}


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture of a RegistrationModel.

    Encoder stage k has base_channels * 2**k channels and works at 1 / 2**k of the input resolution, so every
    input size must be divisible by 2**(stages - 1). Every lightweight decoder is decoder_channels wide.
    """
    stages: int = dv.default_stages
    base_channels: int = dv.default_base_channels
    decoder_channels: int = dv.default_decoder_channels
    mode: str = "pretrain"
    dtype: str = "float32"
    leaky_slope: float = dv.default_leaky_slope
    ss_steps: int = dv.default_ss_steps
    seed: int = 0

    def __post_init__(self):
        if self.stages < 2:
            raise ValueError("Expected at least 2 stages, got {}".format(self.stages))
        if self.base_channels < 1 or self.decoder_channels < 1:
            raise ValueError("Expected positive channel counts, got {} and {}".format(
                self.base_channels, self.decoder_channels))
        if self.mode not in MODES:
            raise ValueError("Expected mode in {}, got {}".format(MODES, self.mode))
        if self.dtype not in DTYPES:
            raise ValueError("Expected dtype in {}, got {}".format(DTYPES, self.dtype))
        SsConfig(self.ss_steps)

    def channels(self, stage: int) -> int:
        return self.base_channels * 2 ** stage

    def check_shape(self, shape):
        """Raise ShapeMismatchError when the grid can not be downsampled stages - 1 times."""
        shape = as_shape(shape)
        factor = 2 ** (self.stages - 1)
        if any(n % factor for n in shape) or min(shape) // factor < 2:
            raise ShapeMismatchError("Grid {} is not divisible by {} into at least 2 voxels for {} stages".format(
                tuple(shape), factor, self.stages))
        return shape

    def encoder_key(self):
        return self.stages, self.base_channels, self.leaky_slope


class GaussianField:
    """
    Diagonal Gaussian distribution over a velocity field.

    ATTRIBUTES
    :ivar mean:             VectorField of kind velocity
    :ivar log_variance:     read-only array of shape (3, nx, ny, nz), within the clamp bounds
    """

    def __init__(self, mean, log_variance):
        if not isinstance(mean, VectorField):
            mean = VectorField(mean, kind="velocity")
        log_variance = np.array(log_variance)
        if log_variance.shape != mean.data.shape:
            raise ShapeMismatchError("Mean of shape {} and log variance of shape {} differ".format(
                mean.data.shape, log_variance.shape))
        low, high = dv.default_log_variance_bounds
        if log_variance.size and (log_variance.min() < low or log_variance.max() > high):
            raise ValueError("Log variance outside [{}, {}]".format(low, high))
        log_variance.flags.writeable = False
        self.mean = mean
        self.log_variance = log_variance

    @property
    def shape(self):
        return self.mean.shape


@dataclass
class PretrainOutputs:
    """
    Everything the pretraining loss needs.

    :ivar stages:           GaussianField per stage, upsampled to full resolution
    :ivar stage_fields:     GaussianField per stage at its own resolution
    :ivar ensemble:         GaussianField of the ensemble head
    :ivar phi:              deformation integrated from the ensemble mean
    :ivar warped:           moving image warped by phi
    :ivar flow:             (deformation array, FlowRecord) for the loss derivative
    """
    stages: list
    stage_fields: list
    ensemble: GaussianField
    phi: VectorField
    warped: ScalarVolume
    flow: tuple


@dataclass
class BackboneOutputs:
    """Velocity of the backbone head, its deformation, the warped moving image and the flow record."""
    velocity: VectorField
    phi: VectorField
    warped: ScalarVolume
    flow: tuple


def _conv_specs(cfg: ModelConfig):
    """List of (conv name, out channels, in channels, zero init) in parameter order."""
    specs = []
    for k in range(cfg.stages):
        specs.append(("encoder.{}".format(k), cfg.channels(k), 2 if k == 0 else cfg.channels(k - 1), False))
    if cfg.mode == "pretrain":
        d = cfg.decoder_channels
        for k in range(cfg.stages):
            name = "decoder.{}".format(k)
            specs.append((name + ".conv1", d, cfg.channels(k), False))
            specs.append((name + ".conv2", d, d, False))
            specs.append((name + ".head", 6, d, True))
        specs.append(("ensemble.head", 6, d, True))
    else:
        for k in reversed(range(cfg.stages - 1)):
            name = "up.{}".format(k)
            specs.append((name + ".conv1", cfg.channels(k), cfg.channels(k + 1) + cfg.channels(k), False))
            specs.append((name + ".conv2", cfg.channels(k), cfg.channels(k), False))
        specs.append(("head", 3, cfg.channels(0), True))
    return specs


def _array(x):
    return np.asarray(getattr(x, "data", x))


class RegistrationModel:
    """
    Encoder with lightweight decoders and an ensemble head (pretrain mode) or with a U-shaped decoder
    (backbone mode).

    ATTRIBUTES
    :ivar cfg:      ModelConfig
    :ivar params:   flat parameter array in the model dtype
    :ivar grads:    flat gradient array with the layout of params, filled by backward

    METHODS
    encoder_forward         features of every encoder stage
    lightweight_decode      pre-head features and stage distribution of one lightweight decoder
    ensemble_aggregate      full resolution distribution from the features of all decoders
    model_forward_pretrain  full pretrain-mode forward pass, recorded for backward
    model_forward_backbone  full backbone-mode forward pass, recorded for backward
    forward                 the forward pass of the model's mode
    backward                parameter gradients from the loss gradients of the last forward pass
    initialize              (re)initialize parameters from the configured seed
    """

    def __init__(self, cfg=ModelConfig()):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        self._convs = _conv_specs(cfg)
        shapes = []
        for name, c_out, c_in, _ in self._convs:
            shapes.append((name + ".weight", (c_out, c_in, 3, 3, 3)))
            shapes.append((name + ".bias", (c_out,)))
        total = sum(int(np.prod(shape)) for _, shape in shapes)
        self.params = np.zeros(total, dtype=self.dtype)
        self.grads = np.zeros(total, dtype=self.dtype)
        self._shapes = dict(shapes)
        self._views = {}
        self._grad_views = {}
        offset = 0
        for name, shape in shapes:
            count = int(np.prod(shape))
            self._views[name] = self.params[offset:offset + count].reshape(shape)
            self._grad_views[name] = self.grads[offset:offset + count].reshape(shape)
            offset += count
        self._record = None
        self.initialize()

    @property
    def parameter_names(self):
        return list(self._views)

    @property
    def parameter_count(self):
        return self.params.size

    def __getitem__(self, name):
        return self._views[name]

    def parameter_table(self):
        """List of (name, shape) in storage order."""
        return [(name, self._shapes[name]) for name in self._views]

    def initialize(self, prefix=""):
        """Initialize the convolutions whose name starts with prefix; registration heads start at zero."""
        for index, (name, c_out, c_in, zero) in enumerate(self._convs):
            if not name.startswith(prefix):
                continue
            rng = np.random.default_rng(derive_seed(self.cfg.seed, index))
            weight, bias = init_conv(rng, c_out, c_in, zero=zero, dtype=self.dtype)
            self._views[name + ".weight"][...] = weight
            self._views[name + ".bias"][...] = bias

    # layers with gradient bookkeeping
    def _conv(self, name, x):
        return conv3d(x, self._views[name + ".weight"], self._views[name + ".bias"])

    def _conv_backward(self, name, x, grad):
        grad = grad.astype(self.dtype, copy=False)
        grad_x, grad_weight, grad_bias = conv3d_backward(x, self._views[name + ".weight"], grad)
        self._grad_views[name + ".weight"] += grad_weight
        self._grad_views[name + ".bias"] += grad_bias
        return grad_x

    def _leaky(self, x):
        return leaky_relu(x, self.cfg.leaky_slope)

    def _leaky_backward(self, x, grad):
        return leaky_relu_backward(x, grad, self.cfg.leaky_slope)

    def _head_split(self, raw, scale):
        low, high = dv.default_log_variance_bounds
        mean = raw[:3] * scale
        mask = (raw[3:] > low) & (raw[3:] < high)
        return mean, np.clip(raw[3:], low, high), mask

    def _pair_input(self, f, m):
        f = _array(f)
        m = _array(m)
        if f.shape != m.shape:
            raise ShapeMismatchError("Fixed image of shape {} and moving image of shape {} differ".format(
                f.shape, m.shape))
        self.cfg.check_shape(f.shape)
        return np.stack([f, m]).astype(self.dtype)

    # encoder
    def _encode(self, x):
        inputs, pre, features = [], [], []
        h = x
        for k in range(self.cfg.stages):
            if k > 0:
                h = avg_pool2(h)
            inputs.append(h)
            z = self._conv("encoder.{}".format(k), h)
            pre.append(z)
            h = self._leaky(z)
            features.append(h)
        return features, (inputs, pre)

    def _encode_backward(self, record, feature_grads):
        inputs, pre = record
        carried = None
        for k in reversed(range(self.cfg.stages)):
            grad = feature_grads[k]
            if carried is not None:
                grad = carried if grad is None else grad + carried
            if grad is None:
                carried = None
                continue
            grad_input = self._conv_backward("encoder.{}".format(k), inputs[k], self._leaky_backward(pre[k], grad))
            carried = avg_pool2_backward(grad_input) if k > 0 else None

    def encoder_forward(self, f, m):
        """
        Features of every encoder stage for the image pair.

        :return:    list of K arrays; stage k has shape (base_channels * 2**k, *shape / 2**k)
        """
        features, _ = self._encode(self._pair_input(f, m))
        return features

    # lightweight decoders and ensemble
    def _decode(self, k, feature):
        name = "decoder.{}".format(k)
        z1 = self._conv(name + ".conv1", feature)
        h1 = self._leaky(z1)
        z2 = self._conv(name + ".conv2", h1)
        h2 = self._leaky(z2)
        raw = self._conv(name + ".head", h2)
        mean, log_variance, mask = self._head_split(raw, 2 ** k)
        return h2, mean, log_variance, (feature, z1, h1, z2, h2, mask)

    def lightweight_decode(self, stage: int, feature):
        """
        Run the lightweight decoder of one stage.

        Means are returned in full resolution voxel units (the head output times 2**stage).

        :return:    (pre-head features, GaussianField at the stage resolution)
        """
        if self.cfg.mode != "pretrain":
            raise ConfigMismatchError("Lightweight decoders only exist in pretrain mode")
        if not 0 <= stage < self.cfg.stages:
            raise ValueError("Expected a stage in [0, {}), got {}".format(self.cfg.stages, stage))
        h2, mean, log_variance, _ = self._decode(stage, feature)
        return h2, GaussianField(mean, log_variance)

    def _aggregate(self, features, shape):
        upsampled = [upsample(h, shape) for h in features]
        average = (sum(upsampled) / len(upsampled)).astype(self.dtype)
        raw = self._conv("ensemble.head", average)
        mean, log_variance, mask = self._head_split(raw, 1)
        return mean, log_variance, (average, mask)

    def ensemble_aggregate(self, features, shape):
        """
        Upsample the pre-head features of every decoder to the full resolution shape, average them and apply
        the ensemble registration head.

        :return:    GaussianField at full resolution
        """
        if self.cfg.mode != "pretrain":
            raise ConfigMismatchError("The ensemble head only exists in pretrain mode")
        if not features:
            raise ValueError("Expected the features of at least one decoder")
        mean, log_variance, _ = self._aggregate(features, as_shape(shape))
        return GaussianField(mean, log_variance)

    def model_forward_pretrain(self, f, m) -> PretrainOutputs:
        """Pretrain-mode forward pass; the intermediates are recorded for backward."""
        if self.cfg.mode != "pretrain":
            raise ConfigMismatchError("Model is in {} mode, not pretrain mode".format(self.cfg.mode))
        x = self._pair_input(f, m)
        shape = as_shape(x.shape[1:])
        features, encoder_record = self._encode(x)
        decoder_records, pre_head, stage_fields, stages = [], [], [], []
        for k, feature in enumerate(features):
            h2, mean, log_variance, record = self._decode(k, feature)
            decoder_records.append(record)
            pre_head.append(h2)
            stage_fields.append(GaussianField(mean, log_variance))
            stages.append(GaussianField(upsample(mean, shape), upsample(log_variance, shape)))
        mean, log_variance, ensemble_record = self._aggregate(pre_head, shape)
        phi, flow_record = integrate_velocity(mean, self.cfg.ss_steps)
        warped = TrilinearSampler(shape, phi).sample(x[1]).astype(self.dtype)
        self._record = ("pretrain", shape, encoder_record, decoder_records, ensemble_record)
        return PretrainOutputs(stages=stages, stage_fields=stage_fields,
                               ensemble=GaussianField(mean, log_variance),
                               phi=VectorField(phi.astype(self.dtype), kind="deformation"),
                               warped=ScalarVolume(warped), flow=(phi, flow_record))

    def model_forward_backbone(self, f, m) -> BackboneOutputs:
        """Backbone-mode forward pass; the intermediates are recorded for backward."""
        if self.cfg.mode != "backbone":
            raise ConfigMismatchError("Model is in {} mode, not backbone mode".format(self.cfg.mode))
        x = self._pair_input(f, m)
        shape = as_shape(x.shape[1:])
        features, encoder_record = self._encode(x)
        h = features[-1]
        up_records = []
        for k in reversed(range(self.cfg.stages - 1)):
            name = "up.{}".format(k)
            joined = np.concatenate([upsample(h, features[k].shape[1:]).astype(self.dtype), features[k]])
            z1 = self._conv(name + ".conv1", joined)
            h1 = self._leaky(z1)
            z2 = self._conv(name + ".conv2", h1)
            up_records.append((k, h.shape[1:], joined, z1, h1, z2))
            h = self._leaky(z2)
        velocity = self._conv("head", h)
        phi, flow_record = integrate_velocity(velocity, self.cfg.ss_steps)
        warped = TrilinearSampler(shape, phi).sample(x[1]).astype(self.dtype)
        self._record = ("backbone", shape, encoder_record, up_records, h)
        return BackboneOutputs(velocity=VectorField(velocity, kind="velocity"),
                               phi=VectorField(phi.astype(self.dtype), kind="deformation"),
                               warped=ScalarVolume(warped), flow=(phi, flow_record))

    def forward(self, f, m):
        if self.cfg.mode == "pretrain":
            return self.model_forward_pretrain(f, m)
        return self.model_forward_backbone(f, m)

    def register(self, f, m) -> VectorField:
        """Deformation the model predicts for the pair; nothing is recorded."""
        outputs = self.forward(f, m)
        self._record = None
        return outputs.phi

    def predict_velocity(self, f, m) -> VectorField:
        """Velocity the model predicts for the pair (the ensemble mean in pretrain mode); nothing is recorded."""
        outputs = self.forward(f, m)
        self._record = None
        if self.cfg.mode == "pretrain":
            return outputs.ensemble.mean
        return outputs.velocity

    # backward
    def backward(self, gradients: dict) -> np.ndarray:
        """
        Parameter gradients of the last forward pass.

        :param gradients:   pretrain mode: "ensemble_mean" and optionally "ensemble_log_variance",
                            "stage_means" and "stage_log_variances" (lists of full resolution arrays);
                            backbone mode: "velocity"
        :return:            copy of the flat gradient array
        """
        if self._record is None:
            raise ForwardRecordError("backward needs a recorded forward pass")
        record, self._record = self._record, None
        self.grads[...] = 0
        if record[0] == "pretrain":
            self._backward_pretrain(record, gradients)
        else:
            self._backward_backbone(record, gradients)
        return self.grads.copy()

    def _backward_pretrain(self, record, gradients):
        _, shape, encoder_record, decoder_records, (average, ensemble_mask) = record
        stages = self.cfg.stages
        grad_mean = np.asarray(gradients["ensemble_mean"])
        grad_lv = gradients.get("ensemble_log_variance")
        grad_lv = np.zeros_like(grad_mean) if grad_lv is None else np.asarray(grad_lv)
        grad_raw = np.concatenate([grad_mean, grad_lv * ensemble_mask])
        grad_average = self._conv_backward("ensemble.head", average, grad_raw)
        stage_means = gradients.get("stage_means") or [None] * stages
        stage_lvs = gradients.get("stage_log_variances") or [None] * stages
        feature_grads = []
        for k, (feature, z1, h1, z2, h2, mask) in enumerate(decoder_records):
            name = "decoder.{}".format(k)
            stage_shape = feature.shape[1:]
            grad_h2 = upsample_backward(grad_average / stages, stage_shape)
            if stage_means[k] is not None or stage_lvs[k] is not None:
                g_mean = np.zeros((3,) + stage_shape) if stage_means[k] is None else \
                    upsample_backward(stage_means[k], stage_shape) * 2 ** k
                g_lv = np.zeros((3,) + stage_shape) if stage_lvs[k] is None else \
                    upsample_backward(stage_lvs[k], stage_shape) * mask
                grad_h2 = grad_h2 + self._conv_backward(name + ".head", h2, np.concatenate([g_mean, g_lv]))
            grad_h1 = self._conv_backward(name + ".conv2", h1, self._leaky_backward(z2, grad_h2))
            feature_grads.append(self._conv_backward(name + ".conv1", feature, self._leaky_backward(z1, grad_h1)))
        self._encode_backward(encoder_record, feature_grads)

    def _backward_backbone(self, record, gradients):
        _, shape, encoder_record, up_records, last = record
        grad_h = self._conv_backward("head", last, np.asarray(gradients["velocity"]))
        feature_grads = [None] * self.cfg.stages
        for k, coarse_shape, joined, z1, h1, z2 in reversed(up_records):
            name = "up.{}".format(k)
            grad_h1 = self._conv_backward(name + ".conv2", h1, self._leaky_backward(z2, grad_h))
            grad_joined = self._conv_backward(name + ".conv1", joined, self._leaky_backward(z1, grad_h1))
            coarse_channels = grad_joined.shape[0] - self.cfg.channels(k)
            feature_grads[k] = grad_joined[coarse_channels:]
            grad_h = upsample_backward(grad_joined[:coarse_channels], coarse_shape)
        feature_grads[-1] = grad_h
        self._encode_backward(encoder_record, feature_grads)


def checkpoint_bytes(model: RegistrationModel, extra=None) -> bytes:
    """
    Serialize a model: magic "RREG", format version, a JSON configuration block (with extra metadata such as
    seeds) and a table of named little-endian parameter tensors.
    """
    header = json.dumps({"config": dataclasses.asdict(model.cfg), "extra": extra or {}}, sort_keys=True)
    header = header.encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
             struct.pack("<I", len(model.parameter_names))]
    stored = model.dtype.newbyteorder("<")
    for name, shape in model.parameter_table():
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)) + encoded)
        parts.append(struct.pack("<BB", _DTYPE_CODES[stored], len(shape)))
        parts.append(struct.pack("<{}I".format(len(shape)), *shape))
        parts.append(np.ascontiguousarray(model[name], dtype=stored).tobytes())
    return b"".join(parts)


def _unpack(fmt, blob, offset):
    size = struct.calcsize(fmt)
    if offset + size > len(blob):
        raise CheckpointFormatError("Checkpoint is truncated")
    return struct.unpack_from(fmt, blob, offset), offset + size


def model_from_bytes(blob: bytes):
    """
    Rebuild a model from checkpoint_bytes output.

    :return:    (RegistrationModel, extra metadata dict)
    """
    if blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("Not a checkpoint: magic {!r}".format(blob[:4]))
    (version, header_size), offset = _unpack("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise CheckpointFormatError("Unsupported checkpoint version {}".format(version))
    if offset + header_size > len(blob):
        raise CheckpointFormatError("Checkpoint is truncated")
    try:
        header = json.loads(blob[offset:offset + header_size].decode("utf-8"))
        cfg = ModelConfig(**header["config"])
    except (ValueError, TypeError, KeyError) as error:
        raise CheckpointFormatError("Invalid checkpoint configuration: {}".format(error)) from error
    offset += header_size
    model = RegistrationModel(cfg)
    codes = {code: dtype for dtype, code in _DTYPE_CODES.items()}
    (count,), offset = _unpack("<I", blob, offset)
    if count != len(model.parameter_names):
        raise CheckpointFormatError("Expected {} parameters, found {}".format(len(model.parameter_names), count))
    for expected_name, expected_shape in model.parameter_table():
        (length,), offset = _unpack("<H", blob, offset)
        name = blob[offset:offset + length].decode("utf-8")
        offset += length
        (code, ndim), offset = _unpack("<BB", blob, offset)
        shape, offset = _unpack("<{}I".format(ndim), blob, offset)
        if name != expected_name or tuple(shape) != tuple(expected_shape) or code not in codes:
            raise CheckpointFormatError("Unexpected parameter {} of shape {}".format(name, shape))
        size = int(np.prod(shape)) * codes[code].itemsize
        if offset + size > len(blob):
            raise CheckpointFormatError("Checkpoint is truncated in parameter {}".format(name))
        model[name][...] = np.frombuffer(blob, dtype=codes[code], count=int(np.prod(shape)),
                                         offset=offset).reshape(shape)
        offset += size
    if offset != len(blob):
        raise CheckpointFormatError("Checkpoint has {} trailing bytes".format(len(blob) - offset))
    return model, header["extra"]


def save_checkpoint(model: RegistrationModel, path: str, extra=None):
    atomic_write(path, checkpoint_bytes(model, extra), binary=True)


def load_checkpoint(path: str):
    """Read a checkpoint file, return (RegistrationModel, extra metadata dict)."""
    with open(path, "rb") as infile:
        return model_from_bytes(infile.read())


def transfer_encoder(source, backbone: RegistrationModel) -> RegistrationModel:
    """
    Copy the encoder parameters of a pretrained model (or checkpoint path) into a backbone model.

    The decoder of the backbone keeps its fresh initialization and no parameter is frozen.
    """
    if isinstance(source, str):
        source, _ = load_checkpoint(source)
    if backbone.cfg.mode != "backbone":
        raise ConfigMismatchError("Encoder weights are transferred into a backbone model, got {} mode".format(
            backbone.cfg.mode))
    if source.cfg.encoder_key() != backbone.cfg.encoder_key():
        raise ConfigMismatchError("Encoder configurations differ: {} and {}".format(
            source.cfg.encoder_key(), backbone.cfg.encoder_key()))
    for name in source.parameter_names:
        if name.startswith("encoder."):
            backbone[name][...] = source[name]
    logger.info("Transferred %i encoder stages into the backbone", source.cfg.stages)
    return backbone
