"""
NAME
train

DESCRIPTION
Optimization of registration models: the Adam optimizer, pretraining on streamed random pairs (or in-domain
pairs), fine-tuning on the downstream family with a chosen data fraction, training a backbone on random
pairs only, instance-specific optimization of a single velocity field, step timing, and the experiment
drivers (data fraction sweep and ablation matrix).

Every logged number is a function of the configurations and seeds. The batch size is one pair.

CLASSES
AdamState
TrainConfig
CurveLog
EvaluationReport
StepTiming

FUNCTIONS
adam_step
select_fraction
evaluate_model
pretrain
finetune
train_on_random_only
instance_optimize
step_timer
epochs_to_threshold
data_fraction_sweep
run_ablation
"""

import os
import time
import logging
import dataclasses
from dataclasses import dataclass, field
from typing import Optional
import numpy as np
from . import defaultvalues as dv
from .ptools import ShapeMismatchError, EmptyDatasetError, derive_seed, moving_average, columns_to_csv, read_csv
from .volume import ScalarVolume, LabelVolume, VectorField, warp_labels, identity_grid
from .deform import SsConfig, integrate_velocity
from .synth import PairConfig, PairProducer, DownstreamConfig, make_pair, downstream_pair_stream
from .losses import LossWeights, NccConfig, velocity_loss, pretrain_loss, SIMILARITIES
from .metrics import dice, ndv_percent
from .network import ModelConfig, RegistrationModel, save_checkpoint, transfer_encoder

logger = logging.getLogger(__name__)

PHASES = ("pretrain", "finetune", "scratch")
PRETRAIN_SOURCES = ("random", "in_domain")
ABLATION_ROWS = ("Baseline", "Train w/ Rand.", "SD w/o KL", "SD w/ KL", "SD w/ Dice loss")


class AdamState:
    """
    Moment buffers and step count of the Adam optimizer.

    :ivar lr:       learning rate
    :ivar betas:    decay rates of the first and second moment
    :ivar epsilon:  denominator guard
    :ivar step:     number of updates done
    :ivar m:        first moment, float64
    :ivar v:        second moment, float64
    """

    def __init__(self, size: int, lr: float, betas=dv.default_adam_betas, epsilon=dv.default_adam_epsilon):
        if lr <= 0:
            raise ValueError("Expected a positive learning rate, got {}".format(lr))
        self.lr = lr
        self.betas = tuple(betas)
        self.epsilon = epsilon
        self.step = 0
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)


def adam_step(params, grads, state: AdamState):
    """
    One bias-corrected Adam update of params, in place.

    :param params:  flat parameter array
    :param grads:   flat gradient array of the same length
    :return:        params
    """
    grads = np.asarray(grads, dtype=np.float64).ravel()
    if params.size != grads.size or params.size != state.m.size:
        raise ShapeMismatchError("Parameters ({}), gradients ({}) and optimizer state ({}) differ in length".format(
            params.size, grads.size, state.m.size))
    beta1, beta2 = state.betas
    state.step += 1
    state.m = beta1 * state.m + (1 - beta1) * grads
    state.v = beta2 * state.v + (1 - beta2) * grads * grads
    m_hat = state.m / (1 - beta1 ** state.step)
    v_hat = state.v / (1 - beta2 ** state.step)
    flat = params.reshape(-1)
    flat -= (state.lr * m_hat / (np.sqrt(v_hat) + state.epsilon)).astype(params.dtype)
    return params


@dataclass(frozen=True)
class TrainConfig:
    """
    Settings of a training run.

    lr None takes the learning rate of the phase (pretraining 4e-4, otherwise 1e-4). pairs_per_epoch applies to
    streamed pairs; fine-tuning epochs are one pass over the selected training subjects.
    """
    phase: str = "pretrain"
    epochs: int = 2
    pairs_per_epoch: int = dv.default_pairs_per_epoch
    data_fraction: float = 1.0
    seed: int = 0
    similarity: str = "ncc"
    lam: float = dv.default_lambda
    eta: float = dv.default_eta
    lr: Optional[float] = None
    ncc_window: int = dv.default_ncc_window
    eval_every: int = 1
    output_dir: Optional[str] = None
    pretrain_source: str = "random"
    random_flip: bool = False
    prefetch: int = 0
    validation_subjects: Optional[int] = None

    def __post_init__(self):
        if self.phase not in PHASES:
            raise ValueError("Expected phase in {}, got {}".format(PHASES, self.phase))
        if self.epochs < 1 or self.pairs_per_epoch < 1 or self.eval_every < 1:
            raise ValueError("Expected positive epochs, pairs_per_epoch and eval_every")
        if not 0 < self.data_fraction <= 1:
            raise ValueError("Expected 0 < data_fraction <= 1, got {}".format(self.data_fraction))
        if self.similarity not in SIMILARITIES:
            raise ValueError("Expected similarity in {}, got {}".format(SIMILARITIES, self.similarity))
        if self.pretrain_source not in PRETRAIN_SOURCES:
            raise ValueError("Expected pretrain_source in {}, got {}".format(PRETRAIN_SOURCES, self.pretrain_source))
        if self.lr is not None and self.lr <= 0:
            raise ValueError("Expected a positive learning rate, got {}".format(self.lr))
        LossWeights(self.lam, self.eta)
        NccConfig(self.ncc_window)

    @property
    def learning_rate(self):
        if self.lr is not None:
            return self.lr
        return dv.default_pretrain_lr if self.phase == "pretrain" else dv.default_finetune_lr

    @property
    def weights(self):
        return LossWeights(self.lam, self.eta)

    @property
    def ncc(self):
        return NccConfig(self.ncc_window)

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


class CurveLog:
    """
    Training and validation curves of a run.

    ATTRIBUTES
    :ivar steps:            global step index of every training loss
    :ivar losses:           training loss per step
    :ivar epochs:           epoch of every validation evaluation
    :ivar val_dice:         mean validation Dice per evaluation
    :ivar epoch_seconds:    wall-clock seconds per pair, per epoch (not part of the reproducible record)
    """

    def __init__(self):
        self.steps = []
        self.losses = []
        self.epochs = []
        self.val_dice = []
        self.epoch_seconds = []

    def __len__(self):
        return len(self.losses)

    def add_step(self, step: int, loss: float):
        if self.steps and step <= self.steps[-1]:
            raise ValueError("Step indices should increase, got {} after {}".format(step, self.steps[-1]))
        self.steps.append(int(step))
        self.losses.append(float(loss))

    def add_eval(self, epoch: int, value: float):
        if self.epochs and epoch <= self.epochs[-1]:
            raise ValueError("Epochs should increase, got {} after {}".format(epoch, self.epochs[-1]))
        self.epochs.append(int(epoch))
        self.val_dice.append(float(value))

    def epoch_mean_losses(self, steps_per_epoch: int):
        losses = np.asarray(self.losses)
        count = len(losses) // steps_per_epoch
        return losses[:count * steps_per_epoch].reshape(count, steps_per_epoch).mean(axis=1)

    def smoothed_dice(self, window=dv.default_smoothing_window):
        return moving_average(self.val_dice, window)

    def to_csv(self, folder: str, prefix=""):
        """Write <prefix>train_loss.csv (step,loss) and <prefix>val_dice.csv (epoch,val_dice)."""
        columns_to_csv(["step", "loss"], [self.steps, self.losses], os.path.join(folder, prefix + "train_loss.csv"))
        columns_to_csv(["epoch", "val_dice"], [self.epochs, self.val_dice],
                       os.path.join(folder, prefix + "val_dice.csv"))

    @classmethod
    def from_csv(cls, folder: str, prefix=""):
        log = cls()
        loss_path = os.path.join(folder, prefix + "train_loss.csv")
        if os.path.exists(loss_path):
            _, (steps, losses) = read_csv(loss_path)
            for step, loss in zip(steps, losses):
                log.add_step(int(step), loss)
        dice_path = os.path.join(folder, prefix + "val_dice.csv")
        if os.path.exists(dice_path):
            _, (epochs, values) = read_csv(dice_path)
            for epoch, value in zip(epochs, values):
                log.add_eval(int(epoch), value)
        return log


@dataclass
class EvaluationReport:
    """Mean Dice and %NDV per evaluated pair, plus their summaries."""
    dice: list = field(default_factory=list)
    ndv: list = field(default_factory=list)

    @property
    def dice_mean(self):
        return float(np.mean(self.dice)) if self.dice else float("nan")

    @property
    def dice_std(self):
        return float(np.std(self.dice)) if self.dice else float("nan")

    @property
    def ndv_mean(self):
        return float(np.mean(self.ndv)) if self.ndv else float("nan")

    @property
    def ndv_std(self):
        return float(np.std(self.ndv)) if self.ndv else float("nan")


def select_fraction(count: int, fraction: float, seed: int) -> np.ndarray:
    """Indices of the training subjects used: a prefix of a seed-shuffled index list, at least one index."""
    if count < 1:
        raise EmptyDatasetError("No training subjects to select from")
    order = np.random.default_rng(derive_seed(seed, 0)).permutation(count)
    return order[:max(1, int(round(fraction * count)))]


def _flip(rng, *volumes):
    """Flip every volume along the same random axis, with probability one half."""
    if rng.random() < 0.5:
        return volumes
    axis = int(rng.integers(3))
    flipped = []
    for volume in volumes:
        if volume is None:
            flipped.append(None)
        elif isinstance(volume, LabelVolume):
            flipped.append(LabelVolume(np.flip(volume.data, axis), label_count=volume.label_count))
        else:
            flipped.append(ScalarVolume(np.flip(volume.data, axis), spacing=volume.spacing))
    return tuple(flipped)


def _probs(fixed_labels, moving_labels, similarity):
    if similarity != "dice":
        return None, None
    if fixed_labels is None or moving_labels is None:
        raise ValueError("Training with the dice similarity needs label maps")
    count = max(fixed_labels.label_count, moving_labels.label_count)
    fixed_labels = LabelVolume(fixed_labels.data, count)
    moving_labels = LabelVolume(moving_labels.data, count)
    return fixed_labels.one_hot(), moving_labels.one_hot()


def _training_step(model, state, cfg: TrainConfig, fixed, moving, fixed_labels=None, moving_labels=None):
    """Forward, loss, backward and Adam update for one pair; returns the loss value."""
    ss_cfg = SsConfig(model.cfg.ss_steps)
    fixed_probs, moving_probs = _probs(fixed_labels, moving_labels, cfg.similarity)
    if model.cfg.mode == "pretrain":
        outputs = model.model_forward_pretrain(fixed, moving)
        loss = pretrain_loss(outputs, fixed, moving, cfg.weights, cfg.ncc, ss_cfg, cfg.similarity, fixed_probs,
                             moving_probs)
    else:
        outputs = model.model_forward_backbone(fixed, moving)
        loss = velocity_loss(outputs.velocity, fixed, moving, cfg.lam, cfg.ncc, ss_cfg, cfg.similarity,
                             fixed_probs, moving_probs, flow=outputs.flow)
    grads = model.backward(loss.gradients)
    adam_step(model.params, grads, state)
    return loss.value


def _save(model, folder, name, extra):
    if folder is not None:
        save_checkpoint(model, os.path.join(folder, name), extra)


def _stream_epoch(cfg: TrainConfig, synth_cfg, downstream_cfg, epoch: int):
    """Pairs of one epoch, generated in a background thread when cfg.prefetch > 0."""
    base = derive_seed(cfg.seed, 1, epoch)
    if cfg.pretrain_source == "in_domain":
        source = downstream_pair_stream(downstream_cfg or DownstreamConfig(), base, stop=cfg.pairs_per_epoch)
        make = lambda index: next(source)
    else:
        make = lambda index: make_pair(synth_cfg, derive_seed(base, index))
    if cfg.prefetch > 0:
        producer = PairProducer(make, cfg.pairs_per_epoch, maxsize=cfg.prefetch)
        try:
            yield from producer
        finally:
            producer.close()
    else:
        for index in range(cfg.pairs_per_epoch):
            yield make(index)


def _train_on_stream(model, synth_cfg, cfg: TrainConfig, downstream_cfg=None, label="pretraining"):
    state = AdamState(model.parameter_count, cfg.learning_rate)
    log = CurveLog()
    best = np.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        flip_rng = np.random.default_rng(derive_seed(cfg.seed, 2, epoch))
        start = time.perf_counter()
        epoch_losses = []
        for pair in _stream_epoch(cfg, synth_cfg, downstream_cfg, epoch):
            fixed, moving, fixed_labels, moving_labels = pair.fixed, pair.moving, pair.fixed_labels, pair.moving_labels
            if cfg.random_flip:
                fixed, moving, fixed_labels, moving_labels = _flip(flip_rng, fixed, moving, fixed_labels,
                                                                   moving_labels)
            value = _training_step(model, state, cfg, fixed, moving, fixed_labels, moving_labels)
            step += 1
            log.add_step(step, value)
            epoch_losses.append(value)
            logger.debug("step %i loss %.6f", step, value)
        log.epoch_seconds.append((time.perf_counter() - start) / len(epoch_losses))
        mean_loss = float(np.mean(epoch_losses))
        logger.info("%s epoch %i/%i: mean loss %.6f", label, epoch, cfg.epochs, mean_loss)
        extra = {"seed": cfg.seed, "epoch": epoch, "mean_loss": mean_loss}
        _save(model, cfg.output_dir, "last.ckpt", extra)
        if mean_loss < best:
            best = mean_loss
            _save(model, cfg.output_dir, "best.ckpt", extra)
    if cfg.output_dir is not None:
        log.to_csv(cfg.output_dir)
    return log


def pretrain(model: RegistrationModel, synth_cfg=PairConfig(), cfg=TrainConfig(), downstream_cfg=None):
    """
    Pretrain a pretrain-mode model on streamed pairs with the self-distillation objective.

    Pair i of epoch e uses a seed derived from (cfg.seed, e, i); with pretrain_source "in_domain" the pairs
    come from the downstream family instead of random shapes. Checkpoints (last.ckpt, and best.ckpt by mean
    epoch loss) and the curves are written to cfg.output_dir when set.

    :return:    (model, CurveLog)
    """
    if model.cfg.mode != "pretrain":
        raise ValueError("pretrain needs a pretrain-mode model, got {} mode".format(model.cfg.mode))
    log = _train_on_stream(model, synth_cfg, cfg, downstream_cfg, "pretraining")
    return model, log


def train_on_random_only(model: RegistrationModel, synth_cfg=PairConfig(), cfg=TrainConfig(phase="scratch")):
    """
    Train a backbone model from scratch on random shape pairs only, with the fine-tuning objective.

    :return:    (model, CurveLog)
    """
    if model.cfg.mode != "backbone":
        raise ValueError("train_on_random_only needs a backbone model, got {} mode".format(model.cfg.mode))
    cfg = cfg.replace(pretrain_source="random", similarity="ncc")
    log = _train_on_stream(model, synth_cfg, cfg, None, "random-only training")
    return model, log


def evaluate_model(model: RegistrationModel, pairs, limit=None) -> EvaluationReport:
    """
    Register every (fixed, fixed_labels, moving, moving_labels) pair with the model; report the Dice of the
    warped moving labels against the fixed labels and the %NDV of the deformation.

    A model of None evaluates the identity transform.
    """
    report = EvaluationReport()
    for fixed, fixed_labels, moving, moving_labels in pairs[:limit]:
        if model is None:
            phi = identity_grid(fixed.shape)
        else:
            phi = model.register(fixed, moving)
        report.dice.append(dice(warp_labels(moving_labels, phi), fixed_labels).mean)
        report.ndv.append(ndv_percent(phi))
    return report


def finetune(model: RegistrationModel, dataset, cfg=TrainConfig(phase="finetune"), encoder_checkpoint=None):
    """
    Fine-tune a backbone model on the training subjects of a DownstreamDataset (atlas-to-subject pairs).

    With an encoder checkpoint (path or pretrained model) the encoder is transferred first; without one this
    is training from scratch. Only the subjects selected by cfg.data_fraction are used. Validation Dice is
    evaluated every cfg.eval_every epochs; best.ckpt (by validation Dice) and last.ckpt are written to
    cfg.output_dir when set.

    :return:    (model, CurveLog)
    """
    if model.cfg.mode != "backbone":
        raise ValueError("finetune needs a backbone model, got {} mode".format(model.cfg.mode))
    train_pairs = dataset.pairs("train")
    if not train_pairs:
        raise EmptyDatasetError("The downstream dataset has no training subjects")
    if encoder_checkpoint is not None:
        transfer_encoder(encoder_checkpoint, model)
    selected = select_fraction(len(train_pairs), cfg.data_fraction, cfg.seed)
    validation = dataset.pairs("val")
    logger.info("Fine-tuning on %i of %i training subjects", len(selected), len(train_pairs))
    state = AdamState(model.parameter_count, cfg.learning_rate)
    log = CurveLog()
    best = -np.inf
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        rng = np.random.default_rng(derive_seed(cfg.seed, 3, epoch))
        start = time.perf_counter()
        for index in rng.permutation(selected):
            fixed, fixed_labels, moving, moving_labels = train_pairs[index]
            if cfg.random_flip:
                fixed, moving, fixed_labels, moving_labels = _flip(rng, fixed, moving, fixed_labels, moving_labels)
            value = _training_step(model, state, cfg, fixed, moving, fixed_labels, moving_labels)
            step += 1
            log.add_step(step, value)
        log.epoch_seconds.append((time.perf_counter() - start) / len(selected))
        extra = {"seed": cfg.seed, "epoch": epoch, "data_fraction": cfg.data_fraction}
        if validation and epoch % cfg.eval_every == 0:
            score = evaluate_model(model, validation, cfg.validation_subjects).dice_mean
            log.add_eval(epoch, score)
            logger.info("fine-tuning epoch %i/%i: validation Dice %.4f", epoch, cfg.epochs, score)
            if score > best:
                best = score
                _save(model, cfg.output_dir, "best.ckpt", dict(extra, val_dice=score))
        _save(model, cfg.output_dir, "last.ckpt", extra)
    if cfg.output_dir is not None:
        log.to_csv(cfg.output_dir)
    return model, log


def instance_optimize(fixed, moving, iterations=100, lr=0.1, lam=dv.default_lambda, ncc_cfg=NccConfig(),
                      ss_cfg=SsConfig(), init=None, history=None) -> VectorField:
    """
    Optimize one velocity field for a single pair with Adam on NCC plus diffusion.

    :param init:    starting velocity (VectorField or array), for example a model prediction; zero when None
    :param history: list that receives the loss of every iteration
    :return:        deformation field SS(v)
    """
    fixed_data = np.asarray(getattr(fixed, "data", fixed))
    if fixed_data.shape != np.asarray(getattr(moving, "data", moving)).shape:
        raise ShapeMismatchError("Fixed and moving image differ in shape")
    if init is None:
        velocity = np.zeros((3,) + fixed_data.shape, dtype=np.float64)
    else:
        velocity = np.array(getattr(init, "data", init), dtype=np.float64)
    state = AdamState(velocity.size, lr)
    for iteration in range(iterations):
        loss = velocity_loss(velocity, fixed, moving, lam, ncc_cfg, ss_cfg)
        if history is not None:
            history.append(loss.value)
        adam_step(velocity, loss.gradients["velocity"], state)
    if history is not None:
        history.append(velocity_loss(velocity, fixed, moving, lam, ncc_cfg, ss_cfg).value)
    phi, _ = integrate_velocity(velocity, ss_cfg.steps)
    return VectorField(phi, kind="deformation")


@dataclass
class StepTiming:
    """Wall-clock seconds of training steps: every sample, their median and standard deviation."""
    samples: list
    median: float
    std: float


def step_timer(model: RegistrationModel, steps=20, warmup=2, shape=None, seed=0) -> StepTiming:
    """
    Time forward, loss and backward of the model on one random pair; the parameters are not updated.

    :param steps:   number of timed steps, at least 20 for a stable median
    :param warmup:  untimed steps before the measurement
    """
    shape = tuple(shape or dv.default_shape)
    pair = make_pair(PairConfig(shape=shape, emit_labels=False), seed)
    ss_cfg = SsConfig(model.cfg.ss_steps)
    samples = []
    for index in range(warmup + steps):
        start = time.perf_counter()
        if model.cfg.mode == "pretrain":
            outputs = model.model_forward_pretrain(pair.fixed, pair.moving)
            loss = pretrain_loss(outputs, pair.fixed, pair.moving, ss_cfg=ss_cfg)
        else:
            outputs = model.model_forward_backbone(pair.fixed, pair.moving)
            loss = velocity_loss(outputs.velocity, pair.fixed, pair.moving, ss_cfg=ss_cfg, flow=outputs.flow)
        model.backward(loss.gradients)
        if index >= warmup:
            samples.append(time.perf_counter() - start)
    timing = StepTiming(samples, float(np.median(samples)), float(np.std(samples)))
    logger.info("%s step: median %.4f s, std %.4f s over %i steps", model.cfg.mode, timing.median, timing.std, steps)
    return timing


def epochs_to_threshold(val_dice, reference_final: float, fraction=dv.default_threshold_fraction,
                        window=dv.default_smoothing_window, epochs=None):
    """
    First epoch at which the smoothed validation Dice exceeds fraction times the reference final Dice.

    :param val_dice:        validation Dice per evaluation
    :param reference_final: final Dice of the reference (scratch) run
    :param epochs:          epoch of every evaluation; 1, 2, ... when None
    :return:                epoch, or None when the threshold is never reached
    """
    smoothed = moving_average(val_dice, window)
    epochs = list(epochs) if epochs is not None else list(range(1, len(smoothed) + 1))
    threshold = fraction * reference_final
    for epoch, value in zip(epochs, smoothed):
        if value > threshold:
            return epoch
    return None


def _backbone_config(model_cfg: ModelConfig):
    return dataclasses.replace(model_cfg, mode="backbone")


def data_fraction_sweep(dataset, model_cfg=ModelConfig(), cfg=TrainConfig(phase="finetune"),
                        encoder_checkpoint=None, fractions=dv.default_data_fractions):
    """
    Fine-tune with and without the pretrained encoder for every data fraction.

    :return:    dict fraction -> {"pretrained": mean test Dice, "scratch": mean test Dice}; "pretrained" is
                left out without an encoder checkpoint. Written as data_fractions.csv to cfg.output_dir.
    """
    test = dataset.pairs("test")
    results = {}
    for fraction in fractions:
        run = cfg.replace(data_fraction=fraction, output_dir=None)
        scores = {}
        variants = [("scratch", None)] + ([("pretrained", encoder_checkpoint)] if encoder_checkpoint else [])
        for name, checkpoint in variants:
            model = RegistrationModel(_backbone_config(model_cfg))
            finetune(model, dataset, run, checkpoint)
            scores[name] = evaluate_model(model, test).dice_mean
        logger.info("data fraction %.2f: %s", fraction, scores)
        results[fraction] = scores
    if cfg.output_dir is not None:
        ordered = list(results)
        columns_to_csv(["fraction", "scratch", "pretrained"],
                       [ordered, [results[f]["scratch"] for f in ordered],
                        [results[f].get("pretrained", float("nan")) for f in ordered]],
                       os.path.join(cfg.output_dir, "data_fractions.csv"))
    return results


def run_ablation(dataset, synth_cfg=PairConfig(), model_cfg=ModelConfig(), pretrain_cfg=TrainConfig(),
                 finetune_cfg=TrainConfig(phase="finetune"), output_dir=None):
    """
    Ablation matrix on the test subjects: Initial (identity), Baseline (scratch), Train w/ Rand.
    (random pairs only, zero-shot), SD w/o KL (eta 0), SD w/ KL and SD w/ Dice loss.

    :return:    dict row -> EvaluationReport; written as ablation.csv to output_dir when set
    """
    test = dataset.pairs("test")
    results = {"Initial": evaluate_model(None, test)}
    backbone_cfg = _backbone_config(model_cfg)
    pretrain_model_cfg = dataclasses.replace(model_cfg, mode="pretrain")
    finetune_cfg = finetune_cfg.replace(output_dir=None)

    model, _ = finetune(RegistrationModel(backbone_cfg), dataset, finetune_cfg)
    results["Baseline"] = evaluate_model(model, test)

    random_cfg = finetune_cfg.replace(phase="scratch", epochs=pretrain_cfg.epochs,
                                      pairs_per_epoch=pretrain_cfg.pairs_per_epoch, lr=pretrain_cfg.lr)
    model, _ = train_on_random_only(RegistrationModel(backbone_cfg), synth_cfg, random_cfg)
    results["Train w/ Rand."] = evaluate_model(model, test)

    variants = (("SD w/o KL", {"eta": 0.0}), ("SD w/ KL", {}), ("SD w/ Dice loss", {"similarity": "dice"}))
    for row, changes in variants:
        encoder, _ = pretrain(RegistrationModel(pretrain_model_cfg), synth_cfg,
                              pretrain_cfg.replace(output_dir=None, **changes))
        model, _ = finetune(RegistrationModel(backbone_cfg), dataset, finetune_cfg, encoder)
        results[row] = evaluate_model(model, test)
    for row, report in results.items():
        logger.info("%-16s Dice %.3f +- %.3f, NDV %.2f +- %.2f", row, report.dice_mean, report.dice_std,
                    report.ndv_mean, report.ndv_std)
    if output_dir is not None:
        rows = list(results)
        columns_to_csv(["row", "dice_mean", "dice_std", "ndv_mean", "ndv_std"],
                       [[row.replace(",", ";") for row in rows],
                        [results[r].dice_mean for r in rows], [results[r].dice_std for r in rows],
                        [results[r].ndv_mean for r in rows], [results[r].ndv_std for r in rows]],
                       os.path.join(output_dir, "ablation.csv"))
    return results
