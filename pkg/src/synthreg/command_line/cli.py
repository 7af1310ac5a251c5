"""
NAME
cli

DESCRIPTION
The synthreg command line. Subcommands:

gen         write random registration pairs as RVOL volumes
pretrain    pretrain an encoder with lightweight decoders on random pairs
finetune    fine-tune a backbone on the downstream synthetic family, optionally from a pretrained encoder
register    register a moving image to a fixed image with a checkpoint, optionally refined per instance
eval        Dice, %NDV and TRE of a deformation
curves      plot the curves of a training run
selftest    numerical checks: gradients, diffeomorphism, loss oracles, scaling-and-squaring

Every subcommand accepts --seed, --config, --out, --set section.key=value and -v. The exit code is 0 on
success, 1 on a usage error and 2 when the run fails.

FUNCTIONS
cli_main
"""

import os
import sys
import logging
import argparse
from .. import __version__
from ..regtools import fileio
from ..regtools.ptools import RegistrationError, derive_seed, columns_to_csv
from ..regtools.volume import ScalarVolume, LabelVolume, VectorField, warp_scalar, warp_labels
from ..regtools.deform import SsConfig
from ..regtools.synth import make_pair, make_downstream_dataset
from ..regtools.metrics import dice, ndv_percent, tre
from ..regtools.network import RegistrationModel, load_checkpoint
from ..regtools.train import (CurveLog, pretrain, finetune, evaluate_model, instance_optimize, step_timer)
from .runconfig import RunConfig
from .plotting import write_curves_svg
from .selftest import SUITES, run_selftest

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_FAILURE = 2


class UsageError(Exception):
    """Raised by the argument parser instead of exiting."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _common_options():
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, help="base seed of the run (run.seed)")
    common.add_argument("--config", help="configuration file with sections of default.cfg")
    common.add_argument("--out", help="output file or folder")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one configuration value")
    common.add_argument("-v", "--verbose", action="count", default=0, help="debug output")
    return common


def build_parser():
    common = _common_options()
    parser = _Parser(prog="synthreg", description="Pretraining of registration networks on random image pairs")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    commands.required = True

    gen = commands.add_parser("gen", parents=[common], help="write random pairs")
    gen.add_argument("--pairs", type=int, default=1)
    gen.add_argument("--shape", type=int, nargs="+", help="one size or three")

    pre = commands.add_parser("pretrain", parents=[common], help="pretrain an encoder")
    pre.add_argument("--epochs", type=int)
    pre.add_argument("--pairs-per-epoch", type=int)
    pre.add_argument("--time", action="store_true", help="also time pretrain and backbone steps")

    fine = commands.add_parser("finetune", parents=[common], help="fine-tune a backbone")
    fine.add_argument("--encoder", help="pretrained checkpoint to take the encoder from")
    fine.add_argument("--epochs", type=int)
    fine.add_argument("--fraction", type=float, help="fraction of the training subjects")

    reg = commands.add_parser("register", parents=[common], help="register one pair")
    reg.add_argument("--fixed", required=True)
    reg.add_argument("--moving", required=True)
    reg.add_argument("--ckpt", required=True)
    reg.add_argument("--refine", type=int, default=0, help="instance optimization iterations")
    reg.add_argument("--lr", type=float, default=0.1, help="learning rate of the refinement")
    reg.add_argument("--warped", help="also write the warped moving image here")

    ev = commands.add_parser("eval", parents=[common], help="evaluate a deformation")
    ev.add_argument("--phi", required=True)
    ev.add_argument("--fixed-labels")
    ev.add_argument("--moving-labels")
    ev.add_argument("--fixed-landmarks")
    ev.add_argument("--moving-landmarks")

    cur = commands.add_parser("curves", parents=[common], help="plot the curves of a run folder")
    cur.add_argument("--run", required=True, help="folder with train_loss.csv and val_dice.csv")
    cur.add_argument("--window", type=int, default=5)

    test = commands.add_parser("selftest", parents=[common], help="run the numerical checks")
    test.add_argument("--suite", action="append", choices=list(SUITES), help="run only this suite (repeatable)")
    return parser


def _run_config(args):
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append("run.seed={}".format(args.seed))
    return RunConfig(args.config, overrides)


def _output_folder(args, config):
    folder = args.out or config.get("run", "out")
    os.makedirs(folder, exist_ok=True)
    return folder


def _manifest(config, folder, command, extra=None):
    entries = {"command": command, "synthreg_version": __version__}
    entries.update(config.as_dict())
    entries.update(config.describe())
    entries.update(extra or {})
    fileio.write_manifest(entries, os.path.join(folder, "manifest.txt"))
    config.write(os.path.join(folder, "effective.cfg"))


def read_volume(path, kind="scalar"):
    """Read an RVOL or NIfTI-1 file as an image or label map."""
    if path.endswith(".nii"):
        return fileio.read_nifti1(path, kind="labels" if kind == "labels" else "scalar")
    volume = fileio.read_rvol(path)
    expected = LabelVolume if kind == "labels" else ScalarVolume
    if not isinstance(volume, expected):
        raise RegistrationError("{} does not hold a {}".format(path, "label map" if kind == "labels" else "image"))
    return volume


def read_deformation(path):
    """Read an RVOL file that holds a deformation."""
    field = fileio.read_rvol(path)
    if not isinstance(field, VectorField) or field.kind != "deformation":
        raise RegistrationError("{} does not hold a deformation".format(path))
    return field


def cmd_gen(args, config):
    if args.shape:
        config.set("synth", "shape", " ".join(map(str, args.shape)))
    folder = _output_folder(args, config)
    cfg = config.pair_config()
    seed = config.getint("run", "seed")
    for index in range(args.pairs):
        pair = make_pair(cfg, derive_seed(seed, index))
        stem = os.path.join(folder, "pair_{:04d}_".format(index))
        fileio.write_rvol(pair.fixed, stem + "fixed.rvol")
        fileio.write_rvol(pair.moving, stem + "moving.rvol")
        fileio.write_rvol(pair.fixed_labels, stem + "fixed_labels.rvol")
        fileio.write_rvol(pair.moving_labels, stem + "moving_labels.rvol")
    logger.info("Wrote %i pairs to %s", args.pairs, folder)
    _manifest(config, folder, "gen", {"pairs": args.pairs})


def cmd_pretrain(args, config):
    if args.epochs is not None:
        config.set("train", "epochs", args.epochs)
    if args.pairs_per_epoch is not None:
        config.set("train", "pairs_per_epoch", args.pairs_per_epoch)
    folder = _output_folder(args, config)
    model = RegistrationModel(config.model_config("pretrain"))
    _, log = pretrain(model, config.pair_config(), config.train_config("pretrain", folder),
                      config.downstream_config())
    write_curves_svg(log, os.path.join(folder, "curves.svg"), title="pretraining")
    extra = {"final_loss": log.losses[-1], "parameters": model.parameter_count}
    if args.time:
        shape = config.shape()
        extra["pretrain_seconds_per_pair"] = step_timer(model, shape=shape).median
        extra["backbone_seconds_per_pair"] = step_timer(RegistrationModel(config.model_config("backbone")),
                                                        shape=shape).median
    _manifest(config, folder, "pretrain", extra)


def cmd_finetune(args, config):
    if args.epochs is not None:
        config.set("train", "epochs", args.epochs)
    if args.fraction is not None:
        config.set("train", "data_fraction", args.fraction)
    folder = _output_folder(args, config)
    dataset = make_downstream_dataset(config.downstream_config())
    model = RegistrationModel(config.model_config("backbone"))
    _, log = finetune(model, dataset, config.train_config("finetune", folder), args.encoder)
    write_curves_svg(log, os.path.join(folder, "curves.svg"), title="fine-tuning")
    report = evaluate_model(model, dataset.pairs("test"))
    initial = evaluate_model(None, dataset.pairs("test"))
    logger.info("Test Dice %.4f +- %.4f (initial %.4f), NDV %.3f%%", report.dice_mean, report.dice_std,
                initial.dice_mean, report.ndv_mean)
    _manifest(config, folder, "finetune", {"encoder": args.encoder or "none", "test_dice_mean": report.dice_mean,
                                           "test_dice_std": report.dice_std, "test_ndv_mean": report.ndv_mean,
                                           "initial_dice_mean": initial.dice_mean})


def cmd_register(args, config):
    if not args.out:
        raise UsageError("register needs --out for the deformation")
    fixed = read_volume(args.fixed)
    moving = read_volume(args.moving)
    model, _ = load_checkpoint(args.ckpt)
    phi = model.register(fixed, moving)
    if args.refine > 0:
        cfg = config.train_config("finetune")
        phi = instance_optimize(fixed, moving, iterations=args.refine, lr=args.lr, lam=cfg.lam, ncc_cfg=cfg.ncc,
                                ss_cfg=SsConfig(model.cfg.ss_steps), init=model.predict_velocity(fixed, moving))
    fileio.write_rvol(phi, args.out)
    if args.warped:
        fileio.write_rvol(warp_scalar(moving, phi), args.warped)
    logger.info("Deformation written to %s, NDV %.3f%%", args.out, ndv_percent(phi))


def cmd_eval(args, config):
    phi = read_deformation(args.phi)
    results = {"ndv_percent": ndv_percent(phi)}
    if args.fixed_labels and args.moving_labels:
        report = dice(warp_labels(read_volume(args.moving_labels, "labels"), phi),
                      read_volume(args.fixed_labels, "labels"))
        results["dice_mean"] = report.mean
        for label, value in report.per_label.items():
            results["dice_{}".format(label)] = value
    if args.fixed_landmarks and args.moving_landmarks:
        report = tre(fileio.read_landmarks(args.moving_landmarks), fileio.read_landmarks(args.fixed_landmarks), phi)
        results["tre_mean_mm"] = report.mean
        results["tre_std_mm"] = report.std
    for key, value in results.items():
        print("{} = {!r}".format(key, float(value)))
    if args.out:
        fileio.write_manifest(results, args.out)


def cmd_curves(args, config):
    log = CurveLog.from_csv(args.run)
    out = args.out or os.path.join(args.run, "curves.svg")
    write_curves_svg(log, out, window=args.window)


def cmd_selftest(args, config):
    results = run_selftest(config.getint("run", "seed"), args.suite)
    for result in results:
        print("{:<20} {:<22} {:.2e} {}".format(result.suite, result.check, result.value,
                                              "ok" if result.passed else "FAILED"))
    if args.out:
        columns_to_csv(["suite", "check", "value", "passed"],
                       [[r.suite for r in results], [r.check for r in results], [r.value for r in results],
                        [int(r.passed) for r in results]], args.out)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILURE


COMMANDS = {
    "gen": cmd_gen,
    "pretrain": cmd_pretrain,
    "finetune": cmd_finetune,
    "register": cmd_register,
    "eval": cmd_eval,
    "curves": cmd_curves,
    "selftest": cmd_selftest,
}


def cli_main(argv=None) -> int:
    """
    Run the command line.

    :param argv:    arguments without the program name; sys.argv[1:] when None
    :return:        exit code
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as error:
        print("synthreg: error: {}".format(error), file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s: %(message)s")
    try:
        config = _run_config(args)
        code = COMMANDS[args.command](args, config)
    except UsageError as error:
        print("synthreg: error: {}".format(error), file=sys.stderr)
        return EXIT_USAGE
    except (RegistrationError, OSError, ValueError) as error:
        logger.error("%s failed: %s", args.command, error)
        return EXIT_FAILURE
    return EXIT_OK if code is None else code
