import os
import numpy as np
import pytest
import synthreg.regtools as rt
from synthreg.regtools.network import RegistrationModel, ModelConfig
from synthreg.regtools.train import select_fraction
from synthreg.regtools.ptools import ShapeMismatchError, EmptyDatasetError
from synthreg.command_line.selftest import reference_adam

tiny = ModelConfig(stages=2, base_channels=2, decoder_channels=2, ss_steps=4)
tiny_backbone = ModelConfig(stages=2, base_channels=2, decoder_channels=2, ss_steps=4, mode="backbone")
tiny_pairs = rt.PairConfig(shape=(8, 8, 8), channels=4, svf_amplitude=1.5, svf_frequency=2, label_frequency=2,
                           ss_steps=4)
tiny_family = rt.DownstreamConfig(shape=(8, 8, 8), labels=4, split=(3, 2, 1), ss_steps=4)


@pytest.fixture(scope="module")
def dataset():
    return rt.make_downstream_dataset(tiny_family)


def test_adam_first_step_should_move_every_parameter_by_the_learning_rate():
    params = np.array([1.0, 2.0, 3.0])
    state = rt.AdamState(3, lr=0.1)
    rt.adam_step(params, np.array([0.5, -2.0, 1e-3]), state)
    np.testing.assert_allclose(params, [0.9, 2.1, 2.9], rtol=1e-4)
    assert state.step == 1


def test_adam_should_reject_gradients_of_another_length_and_bad_learning_rates():
    with pytest.raises(ShapeMismatchError):
        rt.adam_step(np.zeros(3), np.zeros(4), rt.AdamState(3, lr=0.1))
    with pytest.raises(ValueError):
        rt.AdamState(3, lr=0.0)


def test_train_config_should_pick_the_learning_rate_of_the_phase():
    assert rt.TrainConfig().learning_rate == 4e-4
    assert rt.TrainConfig(phase="finetune").learning_rate == 1e-4
    assert rt.TrainConfig(phase="finetune", lr=0.01).learning_rate == 0.01
    with pytest.raises(ValueError):
        rt.TrainConfig(phase="other")
    with pytest.raises(ValueError):
        rt.TrainConfig(data_fraction=0.0)
    with pytest.raises(ValueError):
        rt.TrainConfig(ncc_window=4)


def test_curve_log_should_keep_increasing_steps_and_survive_csv(tmp_path):
    log = rt.CurveLog()
    for step, loss in enumerate([0.5, 0.4, 0.35, 0.3], start=1):
        log.add_step(step, loss)
    log.add_eval(1, 0.6)
    log.add_eval(2, 0.7)
    with pytest.raises(ValueError):
        log.add_step(4, 0.1)
    with pytest.raises(ValueError):
        log.add_eval(2, 0.8)
    np.testing.assert_allclose(log.epoch_mean_losses(2), [0.45, 0.325])
    log.to_csv(tmp_path)
    restored = rt.CurveLog.from_csv(tmp_path)
    assert restored.steps == log.steps and restored.losses == log.losses
    assert restored.epochs == log.epochs and restored.val_dice == log.val_dice


def test_select_fraction_should_return_a_reproducible_prefix():
    full = select_fraction(20, 1.0, seed=3)
    half = select_fraction(20, 0.5, seed=3)
    assert sorted(full) == list(range(20))
    np.testing.assert_array_equal(half, full[:10])
    np.testing.assert_array_equal(half, select_fraction(20, 0.5, seed=3))
    assert len(select_fraction(20, 0.01, seed=3)) == 1
    with pytest.raises(EmptyDatasetError):
        select_fraction(0, 1.0, seed=3)


def test_epochs_to_threshold_should_return_the_first_epoch_above_the_threshold():
    values = [0.1, 0.5, 0.9, 0.95]
    assert rt.epochs_to_threshold(values, 1.0, fraction=0.8, window=1) == 3
    assert rt.epochs_to_threshold(values, 1.0, fraction=0.8, window=2) == 4
    assert rt.epochs_to_threshold(values, 1.0, fraction=0.99, window=1) is None
    assert rt.epochs_to_threshold(values, 1.0, fraction=0.8, window=1, epochs=[5, 10, 15, 20]) == 15


def test_pretrain_should_be_reproducible_and_independent_of_prefetching(tmp_path):
    cfg = rt.TrainConfig(epochs=2, pairs_per_epoch=2, ncc_window=3, seed=4, output_dir=str(tmp_path))
    first, log = rt.pretrain(RegistrationModel(tiny), tiny_pairs, cfg)
    second, _ = rt.pretrain(RegistrationModel(tiny), tiny_pairs, cfg.replace(output_dir=None, prefetch=2))
    np.testing.assert_array_equal(first.params, second.params)
    assert log.steps == [1, 2, 3, 4]
    assert all(np.isfinite(log.losses))
    for name in ("best.ckpt", "last.ckpt", "train_loss.csv", "val_dice.csv"):
        assert os.path.exists(os.path.join(tmp_path, name))
    restored, extra = rt.load_checkpoint(os.path.join(tmp_path, "last.ckpt"))
    np.testing.assert_array_equal(restored.params, first.params)
    assert extra["epoch"] == 2


def test_pretrain_should_change_the_model_and_accept_every_pair_source():
    model = RegistrationModel(tiny)
    start = model.params.copy()
    cfg = rt.TrainConfig(epochs=1, pairs_per_epoch=2, ncc_window=3)
    rt.pretrain(model, tiny_pairs, cfg)
    assert not np.array_equal(model.params, start)
    _, log = rt.pretrain(RegistrationModel(tiny), tiny_pairs, cfg.replace(similarity="dice", random_flip=True))
    assert len(log) == 2
    _, log = rt.pretrain(RegistrationModel(tiny), tiny_pairs, cfg.replace(pretrain_source="in_domain"),
                         tiny_family)
    assert all(np.isfinite(log.losses))
    with pytest.raises(ValueError):
        rt.pretrain(RegistrationModel(tiny_backbone), tiny_pairs, cfg)


def test_train_on_random_only_should_train_a_backbone():
    cfg = rt.TrainConfig(phase="scratch", epochs=1, pairs_per_epoch=2, ncc_window=3)
    _, log = rt.train_on_random_only(RegistrationModel(tiny_backbone), tiny_pairs, cfg)
    assert len(log) == 2
    with pytest.raises(ValueError):
        rt.train_on_random_only(RegistrationModel(tiny), tiny_pairs, cfg)


def test_evaluate_model_without_model_should_score_the_identity(dataset):
    report = rt.evaluate_model(None, dataset.pairs("val"))
    assert len(report.dice) == 2
    assert all(0.0 <= value <= 1.0 for value in report.dice)
    assert report.ndv_mean == 0.0
    assert len(rt.evaluate_model(None, dataset.pairs("val"), limit=1).dice) == 1


def test_finetune_should_log_validation_dice_and_write_checkpoints(dataset, tmp_path):
    pretrained, _ = rt.pretrain(RegistrationModel(tiny), tiny_pairs,
                                rt.TrainConfig(epochs=1, pairs_per_epoch=1, ncc_window=3))
    cfg = rt.TrainConfig(phase="finetune", epochs=2, ncc_window=3, output_dir=str(tmp_path))
    model, log = rt.finetune(RegistrationModel(tiny_backbone), dataset, cfg, pretrained)
    np.testing.assert_array_equal(model["encoder.0.bias"].shape, (2,))
    assert len(log) == 6
    assert log.epochs == [1, 2]
    assert all(0.0 <= value <= 1.0 for value in log.val_dice)
    for name in ("best.ckpt", "last.ckpt", "train_loss.csv", "val_dice.csv"):
        assert os.path.exists(os.path.join(tmp_path, name))


def test_finetune_should_use_the_selected_fraction_of_subjects(dataset):
    cfg = rt.TrainConfig(phase="finetune", epochs=1, ncc_window=3, data_fraction=0.34)
    _, log = rt.finetune(RegistrationModel(tiny_backbone), dataset, cfg)
    assert len(log) == 1


def test_finetune_should_refuse_empty_datasets_and_pretrain_models(dataset):
    empty = rt.DownstreamDataset(dataset.atlas, dataset.atlas_labels, {"train": [], "val": [], "test": []})
    with pytest.raises(EmptyDatasetError):
        rt.finetune(RegistrationModel(tiny_backbone), empty, rt.TrainConfig(phase="finetune"))
    with pytest.raises(ValueError):
        rt.finetune(RegistrationModel(tiny), dataset, rt.TrainConfig(phase="finetune"))


def test_instance_optimize_should_lower_the_loss_of_one_pair():
    pair = rt.make_pair(rt.PairConfig(shape=(12, 12, 12), channels=4, svf_amplitude=1.5, svf_frequency=2,
                                      label_frequency=2), seed=3)
    history = []
    phi = rt.instance_optimize(pair.fixed, pair.moving, iterations=20, lr=0.1, ncc_cfg=rt.NccConfig(3),
                               ss_cfg=rt.SsConfig(5), history=history)
    assert phi.kind == "deformation"
    assert phi.data.dtype == np.float64
    assert len(history) == 21
    assert history[-1] < history[0]
    with pytest.raises(ShapeMismatchError):
        rt.instance_optimize(pair.fixed, np.zeros((12, 12, 10)), iterations=1)


def test_step_timer_should_time_every_requested_step():
    timing = rt.step_timer(RegistrationModel(tiny), steps=2, warmup=1, shape=(8, 8, 8))
    assert len(timing.samples) == 2
    assert timing.median > 0


def test_adam_should_follow_a_plain_reimplementation_on_a_quadratic():
    rng = np.random.default_rng(7)
    curvature = rng.uniform(0.5, 2.0, size=10)
    centre = rng.normal(size=10)
    params = rng.normal(size=10)
    expected = reference_adam(params, lambda p: [a * (x - c) for a, x, c in zip(curvature, p, centre)], steps=100,
                              lr=0.05)
    state = rt.AdamState(10, lr=0.05)
    for step in range(100):
        rt.adam_step(params, curvature * (params - centre), state)
        np.testing.assert_allclose(params, expected[step], rtol=0, atol=1e-10)


def smooth_image(shape=(16, 16, 16), seed=6):
    return rt.perlin3(shape, rt.PerlinConfig(base_frequency=2, octaves=2, seed=seed))


def test_instance_optimize_of_an_image_with_itself_should_barely_move():
    image = smooth_image()
    history = []
    phi = rt.instance_optimize(image, image, iterations=100, history=history)
    assert np.abs(rt.displacement_of(phi).data).max() < 0.1
    assert abs(history[-1] - history[0]) < 1e-3


def test_instance_optimize_should_recover_a_small_translation():
    fixed = smooth_image()
    shift = np.array([0.75, -0.5, 0.5])
    source = rt.identity_grid(fixed.shape, dtype=np.float64).data - shift.reshape(3, 1, 1, 1)
    moving = rt.warp_scalar(fixed, rt.VectorField(source, kind="deformation"))
    phi = rt.instance_optimize(fixed, moving, iterations=100)
    interior = (slice(None),) + (slice(3, -3),) * 3
    error = rt.displacement_of(phi).data[interior] - shift.reshape(3, 1, 1, 1)
    assert np.sqrt((error ** 2).sum(axis=0)).mean() < 0.25


def test_pretraining_without_kl_should_leave_the_distillation_heads_at_zero():
    cfg = rt.TrainConfig(epochs=1, pairs_per_epoch=4, ncc_window=3, eta=0.0)
    without, log_without = rt.pretrain(RegistrationModel(tiny), tiny_pairs, cfg)
    with_kl, log_with = rt.pretrain(RegistrationModel(tiny), tiny_pairs, cfg.replace(eta=1e-7))
    for k in range(tiny.stages):
        assert not np.any(without["decoder.{}.head.weight".format(k)])
        assert np.any(with_kl["decoder.{}.head.weight".format(k)])
    assert not np.any(without["ensemble.head.weight"][3:])
    assert np.any(with_kl["ensemble.head.weight"][3:])
    # the weighted KL is far below the similarity and smoothness terms
    np.testing.assert_allclose(log_with.losses, log_without.losses, rtol=0, atol=1e-6)


@pytest.mark.slow
def test_data_fraction_sweep_should_report_both_variants(dataset, tmp_path):
    pretrained, _ = rt.pretrain(RegistrationModel(tiny), tiny_pairs,
                                rt.TrainConfig(epochs=1, pairs_per_epoch=1, ncc_window=3))
    cfg = rt.TrainConfig(phase="finetune", epochs=1, ncc_window=3, output_dir=str(tmp_path))
    results = rt.data_fraction_sweep(dataset, tiny, cfg, pretrained, fractions=(1.0, 0.5))
    assert set(results) == {1.0, 0.5}
    assert set(results[0.5]) == {"scratch", "pretrained"}
    assert os.path.exists(os.path.join(tmp_path, "data_fractions.csv"))


@pytest.mark.slow
def test_run_ablation_should_fill_every_row(dataset, tmp_path):
    results = rt.run_ablation(dataset, tiny_pairs, tiny,
                              rt.TrainConfig(epochs=1, pairs_per_epoch=1, ncc_window=3),
                              rt.TrainConfig(phase="finetune", epochs=1, ncc_window=3), output_dir=str(tmp_path))
    assert list(results) == ["Initial", "Baseline", "Train w/ Rand.", "SD w/o KL", "SD w/ KL", "SD w/ Dice loss"]
    assert all(len(report.dice) == 1 for report in results.values())
    assert os.path.exists(os.path.join(tmp_path, "ablation.csv"))


@pytest.mark.slow
def test_pretraining_should_lower_the_loss_of_unseen_pairs():
    cfg = ModelConfig()
    pairs = [rt.make_pair(rt.PairConfig(), seed=1000 + index) for index in range(6)]
    model = RegistrationModel(cfg)

    def mean_loss():
        values = []
        for pair in pairs:
            outputs = model.model_forward_pretrain(pair.fixed, pair.moving)
            values.append(rt.pretrain_loss(outputs, pair.fixed, pair.moving).value)
        return np.mean(values)

    before = mean_loss()
    _, log = rt.pretrain(model, rt.PairConfig(), rt.TrainConfig(epochs=3, pairs_per_epoch=12, lr=1e-3))
    assert mean_loss() < before
    assert len(log.epoch_mean_losses(12)) == 3


@pytest.mark.slow
def test_pretrain_step_should_be_faster_than_a_backbone_step():
    pretrain_timing = rt.step_timer(RegistrationModel(ModelConfig()), steps=5, warmup=1)
    backbone_timing = rt.step_timer(RegistrationModel(ModelConfig(mode="backbone")), steps=5, warmup=1)
    assert pretrain_timing.median < backbone_timing.median
