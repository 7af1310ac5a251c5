import os
import numpy as np
import pytest
import synthreg.regtools as rt
from synthreg.command_line import run_cli
from synthreg.command_line.cli import cli_main
from synthreg.regtools.network import RegistrationModel, ModelConfig

tiny_settings = ["--set", "synth.channels=4", "--set", "synth.svf_frequency=2", "--set", "synth.label_frequency=2",
                 "--set", "synth.svf_amplitude=1.5", "--set", "deform.ss_steps=4"]
tiny_network = ["--set", "net.stages=2", "--set", "net.base_channels=2", "--set", "net.decoder_channels=2"]


def generate(folder, seed=3):
    return cli_main(["gen", "--pairs", "2", "--shape", "8", "--seed", str(seed), "--out", str(folder)] + tiny_settings)


def test_gen_should_write_pairs_manifest_and_configuration(tmp_path):
    assert generate(tmp_path) == 0
    names = set(os.listdir(tmp_path))
    for index in range(2):
        for part in ("fixed", "moving", "fixed_labels", "moving_labels"):
            assert "pair_{:04d}_{}.rvol".format(index, part) in names
    assert {"manifest.txt", "effective.cfg"} <= names
    manifest = rt.read_manifest(os.path.join(tmp_path, "manifest.txt"))
    assert manifest["run.seed"] == "3"
    assert manifest["command"] == "gen"
    assert rt.read_rvol(os.path.join(tmp_path, "pair_0000_fixed.rvol")).shape == (8, 8, 8)


def test_gen_should_write_identical_volumes_for_one_seed(tmp_path):
    first, second = os.path.join(tmp_path, "a"), os.path.join(tmp_path, "b")
    assert generate(first) == 0 and generate(second) == 0
    for name in os.listdir(first):
        if name.endswith(".rvol"):
            with open(os.path.join(first, name), "rb") as a, open(os.path.join(second, name), "rb") as b:
                assert a.read() == b.read()


def test_usage_errors_should_exit_with_one(tmp_path):
    assert cli_main(["frobnicate"]) == 1
    assert cli_main([]) == 1
    assert cli_main(["register", "--fixed", "f.rvol", "--moving", "m.rvol", "--ckpt", "c.ckpt"]) == 1
    assert run_cli(["gen", "--pairs", "many"]) == 1


def test_failing_runs_should_exit_with_two(tmp_path):
    assert cli_main(["gen", "--set", "synth.bogus=1", "--out", str(tmp_path)]) == 2
    assert cli_main(["eval", "--phi", os.path.join(tmp_path, "missing.rvol")]) == 2


def test_eval_of_a_file_without_a_deformation_should_exit_with_two(tmp_path):
    image = os.path.join(tmp_path, "image.rvol")
    rt.write_rvol(rt.ScalarVolume(np.zeros((4, 4, 4), dtype=np.float32)), image)
    labels = os.path.join(tmp_path, "labels.rvol")
    rt.write_rvol(rt.LabelVolume(np.zeros((4, 4, 4), dtype=np.int32)), labels)
    velocity = os.path.join(tmp_path, "velocity.rvol")
    rt.write_rvol(rt.VectorField(np.zeros((3, 4, 4, 4), dtype=np.float32), kind="velocity"), velocity)
    for path in (image, labels, velocity):
        assert cli_main(["eval", "--phi", path]) == 2


def test_register_and_eval_should_write_a_deformation_and_print_metrics(tmp_path, capsys):
    generate(tmp_path)
    checkpoint = os.path.join(tmp_path, "model.ckpt")
    rt.save_checkpoint(RegistrationModel(ModelConfig(stages=2, base_channels=2, mode="backbone", ss_steps=4)),
                       checkpoint)
    stem = os.path.join(tmp_path, "pair_0000_")
    phi_path = os.path.join(tmp_path, "phi.rvol")
    warped_path = os.path.join(tmp_path, "warped.rvol")
    assert cli_main(["register", "--fixed", stem + "fixed.rvol", "--moving", stem + "moving.rvol", "--ckpt",
                     checkpoint, "--out", phi_path, "--warped", warped_path]) == 0
    phi = rt.read_rvol(phi_path)
    assert phi.kind == "deformation"
    np.testing.assert_allclose(phi.data, rt.identity_grid((8, 8, 8)).data, atol=1e-6)
    assert os.path.exists(warped_path)

    landmarks = rt.LandmarkSet([[1.0, 2.0, 3.0], [4.0, 4.0, 4.0]])
    rt.write_landmarks(landmarks, os.path.join(tmp_path, "fixed.txt"))
    rt.write_landmarks(landmarks, os.path.join(tmp_path, "moving.txt"))
    results = os.path.join(tmp_path, "results.txt")
    capsys.readouterr()
    assert cli_main(["eval", "--phi", phi_path, "--fixed-labels", stem + "fixed_labels.rvol", "--moving-labels",
                     stem + "moving_labels.rvol", "--fixed-landmarks", os.path.join(tmp_path, "fixed.txt"),
                     "--moving-landmarks", os.path.join(tmp_path, "moving.txt"), "--out", results]) == 0
    printed = capsys.readouterr().out
    assert "ndv_percent = 0.0" in printed
    assert "dice_mean = " in printed
    entries = rt.read_manifest(results)
    assert float(entries["tre_mean_mm"]) == pytest.approx(0.0, abs=1e-5)


def test_register_with_refinement_should_return_a_deformation(tmp_path):
    generate(tmp_path)
    checkpoint = os.path.join(tmp_path, "model.ckpt")
    rt.save_checkpoint(RegistrationModel(ModelConfig(stages=2, base_channels=2, mode="backbone", ss_steps=4)),
                       checkpoint)
    stem = os.path.join(tmp_path, "pair_0001_")
    phi_path = os.path.join(tmp_path, "refined.rvol")
    assert cli_main(["register", "--fixed", stem + "fixed.rvol", "--moving", stem + "moving.rvol", "--ckpt",
                     checkpoint, "--out", phi_path, "--refine", "3", "--set", "losses.ncc_window=3"]) == 0
    assert rt.read_rvol(phi_path).kind == "deformation"


def test_pretrain_and_finetune_commands_should_write_run_folders(tmp_path):
    pretrain_dir = os.path.join(tmp_path, "pretrain")
    finetune_dir = os.path.join(tmp_path, "finetune")
    common = ["--set", "synth.shape=8", "--set", "losses.ncc_window=3"] + tiny_settings + tiny_network
    assert cli_main(["pretrain", "--epochs", "1", "--pairs-per-epoch", "2", "--out", pretrain_dir] + common) == 0
    for name in ("best.ckpt", "last.ckpt", "curves.svg", "manifest.txt", "effective.cfg", "train_loss.csv"):
        assert os.path.exists(os.path.join(pretrain_dir, name))
    family = ["--set", "downstream.labels=4", "--set", "downstream.train=2", "--set", "downstream.val=1", "--set",
              "downstream.test=1"]
    assert cli_main(["finetune", "--epochs", "1", "--encoder", os.path.join(pretrain_dir, "best.ckpt"), "--out",
                     finetune_dir] + common + family) == 0
    manifest = rt.read_manifest(os.path.join(finetune_dir, "manifest.txt"))
    assert 0.0 <= float(manifest["test_dice_mean"]) <= 1.0
    assert os.path.exists(os.path.join(finetune_dir, "val_dice.csv"))


def test_curves_should_plot_a_run_folder(tmp_path):
    log = rt.CurveLog()
    for step in range(1, 5):
        log.add_step(step, 1.0 / step)
    log.add_eval(1, 0.4)
    log.to_csv(tmp_path)
    assert cli_main(["curves", "--run", str(tmp_path), "--window", "2"]) == 0
    assert os.path.exists(os.path.join(tmp_path, "curves.svg"))
    assert os.path.exists(os.path.join(tmp_path, "curves.csv"))


def read_selftest_csv(path):
    with open(path) as infile:
        lines = infile.read().splitlines()
    return lines[0].split(","), [line.split(",") for line in lines[1:]]


def test_selftest_should_report_the_chosen_suite(tmp_path, capsys):
    out = os.path.join(tmp_path, "selftest.csv")
    assert cli_main(["selftest", "--suite", "loss_oracles", "--out", out]) == 0
    header, rows = read_selftest_csv(out)
    assert header == ["suite", "check", "value", "passed"]
    assert [row[0] for row in rows] == ["loss_oracles"] * 5
    assert all(row[3] == "1" for row in rows)
    assert "adam reference" in capsys.readouterr().out


def test_selftest_with_an_unknown_suite_should_be_a_usage_error():
    assert cli_main(["selftest", "--suite", "everything"]) == 1


@pytest.mark.slow
def test_selftest_should_pass_every_suite(tmp_path):
    out = os.path.join(tmp_path, "selftest.csv")
    assert cli_main(["selftest", "--out", out]) == 0
    header, rows = read_selftest_csv(out)
    assert {row[0] for row in rows} == {"gradients", "diffeomorphism", "loss_oracles", "scaling_and_squaring"}
    assert len(rows) == 21
    assert all(row[3] == "1" for row in rows)
