import os
import numpy as np
import pytest
import synthreg.regtools as rt
from synthreg.regtools.network import (RegistrationModel, ModelConfig, checkpoint_bytes, model_from_bytes,
                                       transfer_encoder)
from synthreg.regtools.network import layers
from synthreg.regtools.ptools import (ConfigMismatchError, ForwardRecordError, ShapeMismatchError,
                                      CheckpointFormatError)
from synthreg.command_line.selftest import directional_check

tiny = ModelConfig(stages=2, base_channels=2, decoder_channels=2, dtype="float64", ss_steps=3)
rng = np.random.default_rng(0)
fixed = rng.random((8, 8, 8))
moving = rng.random((8, 8, 8))


def backbone(cfg=tiny, **changes):
    return RegistrationModel(ModelConfig(**dict(vars(cfg), mode="backbone", **changes)))


def randomize_heads(model, local):
    for name in model.parameter_names:
        if "head" in name:
            model[name][...] = local.normal(scale=0.05, size=model[name].shape)


def test_conv3d_with_a_centre_kernel_should_copy_its_input():
    x = rng.normal(size=(2, 4, 5, 6))
    weight = np.zeros((2, 2, 3, 3, 3))
    weight[0, 0, 1, 1, 1] = 1.0
    weight[1, 1, 1, 1, 1] = 1.0
    np.testing.assert_allclose(layers.conv3d(x, weight, np.zeros(2)), x)
    with pytest.raises(ValueError):
        layers.conv3d(x, np.zeros((2, 3, 3, 3, 3)))


def test_conv3d_backward_should_match_finite_differences():
    local = np.random.default_rng(1)
    x = local.normal(size=(2, 5, 4, 5))
    weight = local.normal(size=(3, 2, 3, 3, 3))
    bias = local.normal(size=3)
    upstream = local.normal(size=(3, 5, 4, 5))
    grad_x, grad_w, grad_b = layers.conv3d_backward(x, weight, upstream)

    def objective(x_, w_, b_):
        return float(np.sum(layers.conv3d(x_, w_, b_) * upstream))

    assert directional_check(lambda v: objective(v, weight, bias), x, grad_x, local) < 1e-6
    assert directional_check(lambda v: objective(x, v, bias), weight, grad_w, local) < 1e-6
    assert directional_check(lambda v: objective(x, weight, v), bias, grad_b, local) < 1e-6


def test_avg_pool2_backward_should_be_the_transpose_of_pooling():
    x = rng.normal(size=(2, 4, 6, 8))
    g = rng.normal(size=(2, 2, 3, 4))
    assert np.sum(layers.avg_pool2(x) * g) == pytest.approx(np.sum(x * layers.avg_pool2_backward(g)))
    with pytest.raises(ValueError):
        layers.avg_pool2(np.zeros((1, 3, 4, 4)))


def test_init_conv_should_give_zero_heads_and_scaled_weights():
    weight, bias = layers.init_conv(np.random.default_rng(2), 6, 4, zero=True)
    assert not weight.any() and not bias.any()
    weight, _ = layers.init_conv(np.random.default_rng(2), 64, 32)
    assert weight.std() == pytest.approx(np.sqrt(2.0 / (32 * 27)), rel=0.05)


def test_parameter_count_should_follow_the_architecture():
    assert RegistrationModel(tiny).parameter_count == 1868
    assert backbone().parameter_count == 931
    names = RegistrationModel(tiny).parameter_names
    assert names[0] == "encoder.0.weight"
    assert "ensemble.head.bias" in names


def test_initialize_should_depend_only_on_the_seed():
    first = RegistrationModel(tiny)
    second = RegistrationModel(tiny)
    other = RegistrationModel(ModelConfig(**dict(vars(tiny), seed=5)))
    np.testing.assert_array_equal(first.params, second.params)
    assert not np.array_equal(first.params, other.params)
    first["encoder.0.weight"][...] = 0
    first.initialize("encoder.0")
    np.testing.assert_array_equal(first.params, second.params)


def test_encoder_forward_should_halve_resolution_and_double_channels_per_stage():
    features = RegistrationModel(tiny).encoder_forward(fixed, moving)
    assert [f.shape for f in features] == [(2, 8, 8, 8), (4, 4, 4, 4)]


def test_check_shape_should_require_divisible_grids_of_at_least_two_coarse_voxels():
    cfg = ModelConfig(stages=3)
    assert cfg.check_shape((12, 8, 16)) == (12, 8, 16)
    with pytest.raises(ShapeMismatchError):
        cfg.check_shape((10, 8, 8))
    with pytest.raises(ShapeMismatchError):
        cfg.check_shape((4, 8, 8))
    with pytest.raises(ShapeMismatchError):
        RegistrationModel(tiny).forward(fixed, moving[:, :, :6])


def test_zero_initialized_heads_should_predict_the_identity():
    outputs = RegistrationModel(tiny).model_forward_pretrain(fixed, moving)
    np.testing.assert_array_equal(outputs.ensemble.mean.data, 0.0)
    np.testing.assert_array_equal(outputs.ensemble.log_variance, 0.0)
    np.testing.assert_allclose(outputs.phi.data, rt.identity_grid((8, 8, 8)).data)
    np.testing.assert_allclose(outputs.warped.data, moving)
    velocity = backbone().predict_velocity(fixed, moving)
    np.testing.assert_array_equal(velocity.data, 0.0)


def test_pretrain_forward_should_give_one_distribution_per_stage():
    model = RegistrationModel(tiny)
    randomize_heads(model, np.random.default_rng(3))
    outputs = model.model_forward_pretrain(fixed, moving)
    assert len(outputs.stages) == len(outputs.stage_fields) == 2
    assert outputs.stage_fields[1].shape == (4, 4, 4)
    assert outputs.stages[1].shape == (8, 8, 8)
    assert outputs.ensemble.shape == (8, 8, 8)
    features = model.encoder_forward(fixed, moving)
    pre_head, field = model.lightweight_decode(1, features[1])
    assert pre_head.shape == (2, 4, 4, 4)
    np.testing.assert_allclose(field.mean.data, outputs.stage_fields[1].mean.data)
    ensemble = model.ensemble_aggregate([model.lightweight_decode(k, f)[0] for k, f in enumerate(features)],
                                        (8, 8, 8))
    np.testing.assert_allclose(ensemble.mean.data, outputs.ensemble.mean.data)


def test_mode_specific_parts_should_be_refused_in_the_other_mode():
    model = backbone()
    with pytest.raises(ConfigMismatchError):
        model.lightweight_decode(0, np.zeros((2, 8, 8, 8)))
    with pytest.raises(ConfigMismatchError):
        model.model_forward_pretrain(fixed, moving)
    with pytest.raises(ConfigMismatchError):
        RegistrationModel(tiny).model_forward_backbone(fixed, moving)


def test_backward_should_need_a_recorded_forward_pass():
    model = backbone()
    with pytest.raises(ForwardRecordError):
        model.backward({"velocity": np.zeros((3, 8, 8, 8))})
    phi = model.register(fixed, moving)
    assert phi.kind == "deformation"
    with pytest.raises(ForwardRecordError):
        model.backward({"velocity": np.zeros((3, 8, 8, 8))})
    model.forward(fixed, moving)
    model.backward({"velocity": np.zeros((3, 8, 8, 8))})
    with pytest.raises(ForwardRecordError):
        model.backward({"velocity": np.zeros((3, 8, 8, 8))})


@pytest.mark.parametrize("mode", ["pretrain", "backbone"])
def test_model_gradients_should_match_finite_differences(mode):
    local = np.random.default_rng(4)
    model = RegistrationModel(tiny) if mode == "pretrain" else backbone()
    randomize_heads(model, local)
    ncc = rt.NccConfig(window=3)
    ss = rt.SsConfig(tiny.ss_steps)

    def loss():
        outputs = model.forward(fixed, moving)
        if mode == "pretrain":
            return rt.pretrain_loss(outputs, fixed, moving, rt.LossWeights(1.0, 0.5), ncc, ss)
        return rt.velocity_loss(outputs.velocity, fixed, moving, 1.0, ncc, ss, flow=outputs.flow)

    gradient = model.backward(loss().gradients)
    start = model.params.copy()

    def value(params):
        model.params[...] = params
        result = loss().value
        model.params[...] = start
        return result

    assert directional_check(value, start, gradient, local) < 1e-3


def test_checkpoint_should_restore_parameters_and_metadata(tmp_path):
    model = RegistrationModel(ModelConfig(stages=2, base_channels=2, decoder_channels=2, seed=4))
    randomize_heads(model, np.random.default_rng(5))
    path = os.path.join(tmp_path, "model.ckpt")
    rt.save_checkpoint(model, path, extra={"seed": 4, "epoch": 2})
    restored, extra = rt.load_checkpoint(path)
    assert restored.cfg == model.cfg
    assert extra == {"seed": 4, "epoch": 2}
    np.testing.assert_array_equal(restored.params, model.params)
    assert restored.params.dtype == np.float32
    wide, _ = model_from_bytes(checkpoint_bytes(RegistrationModel(tiny)))
    assert wide.params.dtype == np.float64


def test_damaged_checkpoints_should_raise_a_format_error():
    blob = checkpoint_bytes(backbone())
    for damaged in (b"XXXX" + blob[4:], blob[:-5], blob + b"\x00", blob[:20]):
        with pytest.raises(CheckpointFormatError):
            model_from_bytes(damaged)


def test_transfer_encoder_should_copy_only_the_encoder(tmp_path):
    source = RegistrationModel(ModelConfig(**dict(vars(tiny), seed=1)))
    target = backbone(seed=2)
    decoder_before = target["up.0.conv1.weight"].copy()
    transfer_encoder(source, target)
    for name in source.parameter_names:
        if name.startswith("encoder."):
            np.testing.assert_array_equal(target[name], source[name])
    np.testing.assert_array_equal(target["up.0.conv1.weight"], decoder_before)
    path = os.path.join(tmp_path, "pretrained.ckpt")
    rt.save_checkpoint(source, path)
    fresh = transfer_encoder(path, backbone(seed=3))
    np.testing.assert_array_equal(fresh["encoder.1.weight"], source["encoder.1.weight"])


def test_transfer_encoder_should_refuse_other_encoders_and_pretrain_targets():
    source = RegistrationModel(tiny)
    with pytest.raises(ConfigMismatchError):
        transfer_encoder(source, backbone(stages=3))
    with pytest.raises(ConfigMismatchError):
        transfer_encoder(source, RegistrationModel(tiny))


def test_gaussian_field_should_reject_out_of_bound_log_variances():
    with pytest.raises(ValueError):
        rt.GaussianField(np.zeros((3, 2, 2, 2)), np.full((3, 2, 2, 2), 11.0))
    with pytest.raises(ShapeMismatchError):
        rt.GaussianField(np.zeros((3, 2, 2, 2)), np.zeros((3, 2, 2, 3)))
