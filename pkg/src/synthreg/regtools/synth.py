"""
NAME
synth

DESCRIPTION
Procedural generation of training data: Perlin gradient noise, random shape label maps (argmax over noise
channels), constant per-shape intensities, random stationary velocity fields and registration pairs made by
deforming one random image twice. Every output is a pure function of its configuration and seed, so pairs
can be generated on the fly in any order.

The module also generates the downstream synthetic family used for fine-tuning experiments: one fixed
anatomy, deformed per subject, with smooth per-region intensity gradients and mild noise.

CLASSES
PerlinConfig
PairConfig
TrainingPair
PairProducer
DownstreamConfig
DownstreamDataset

FUNCTIONS
perlin3
argmax_labels
multi_channel_labels
assign_intensities
random_svf
make_pair
pair_stream
make_downstream_dataset
downstream_pair_stream
"""

import logging
import queue
import threading
import itertools
from dataclasses import dataclass, field
from typing import Optional
import numpy as np
from . import defaultvalues as dv
from .ptools import derive_seed
from .volume import ScalarVolume, VectorField, LabelVolume, as_shape, warp_scalar, warp_labels, identity_grid
from .deform import SsConfig, scaling_and_squaring

logger = logging.getLogger(__name__)

INTENSITY_POLICIES = ("shared", "independent")


@dataclass(frozen=True)
class PerlinConfig:
    """Gradient noise settings: lattice cells per axis, octave count, amplitude decay per octave and seed."""
    base_frequency: int = dv.default_perlin_frequency
    octaves: int = dv.default_perlin_octaves
    persistence: float = dv.default_perlin_persistence
    seed: int = 0

    def __post_init__(self):
        if self.base_frequency < 1:
            raise ValueError("Expected base_frequency >= 1, got {}".format(self.base_frequency))
        if self.octaves < 1:
            raise ValueError("Expected octaves >= 1, got {}".format(self.octaves))
        if not 0 < self.persistence <= 1:
            raise ValueError("Expected 0 < persistence <= 1, got {}".format(self.persistence))


def _fade(t):
    return t * t * t * (t * (t * 6 - 15) + 10)


def _lattice_tables(seed):
    """Permutation table and unit gradient vectors of one noise realization."""
    rng = np.random.default_rng(seed)
    permutation = rng.permutation(256)
    gradients = rng.normal(size=(256, 3))
    gradients /= np.linalg.norm(gradients, axis=1, keepdims=True)
    return permutation, gradients


def _gradient_noise(shape, frequency, seed):
    """One octave of gradient noise on the grid, lattice points every n / frequency voxels."""
    permutation, gradients = _lattice_tables(seed)
    cells = []
    fracs = []
    for axis, n in enumerate(shape):
        p = np.arange(n, dtype=np.float64) * frequency / n
        c = np.floor(p)
        cells.append(c.astype(np.intp))
        fracs.append(p - c)
    ix, iy, iz = cells[0][:, None, None], cells[1][None, :, None], cells[2][None, None, :]
    fx, fy, fz = fracs[0][:, None, None], fracs[1][None, :, None], fracs[2][None, None, :]
    ux, uy, uz = _fade(fx), _fade(fy), _fade(fz)
    noise = np.zeros(tuple(shape), dtype=np.float64)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                h = permutation[(permutation[(permutation[(ix + dx) & 255] + iy + dy) & 255] + iz + dz) & 255]
                g = gradients[h]
                dot = g[..., 0] * (fx - dx) + g[..., 1] * (fy - dy) + g[..., 2] * (fz - dz)
                weight = (ux if dx else 1 - ux) * (uy if dy else 1 - uy) * (uz if dz else 1 - uz)
                noise += weight * dot
    return noise


def perlin3(shape, cfg=PerlinConfig()) -> ScalarVolume:
    """
    Classic 3D gradient noise, summed over octaves.

    Octave o uses frequency base_frequency * 2**o, weight persistence**o and its own seed derived from
    cfg.seed. The sum is divided by the total weight, so values stay within [-1, 1].

    :param shape:   grid shape
    :param cfg:     PerlinConfig
    :return:        float32 ScalarVolume
    """
    shape = as_shape(shape)
    total = np.zeros(tuple(shape), dtype=np.float64)
    amplitude = 1.0
    norm = 0.0
    for octave in range(cfg.octaves):
        frequency = cfg.base_frequency * 2 ** octave
        total += amplitude * _gradient_noise(shape, frequency, derive_seed(cfg.seed, octave))
        norm += amplitude
        amplitude *= cfg.persistence
    return ScalarVolume((total / norm).astype(np.float32))


def argmax_labels(channels) -> LabelVolume:
    """Collapse channels of shape (C, nx, ny, nz) into a label map; ties go to the lowest channel."""
    channels = np.asarray(channels)
    return LabelVolume(np.argmax(channels, axis=0), label_count=channels.shape[0])


def multi_channel_labels(shape, channel_count: int, seed: int, frequency=dv.default_perlin_frequency,
                         octaves=dv.default_perlin_octaves) -> LabelVolume:
    """
    Random shapes: the argmax over channel_count independent noise channels.

    Channel c uses the seed derived from (seed, c).
    """
    if channel_count < 2:
        raise ValueError("Expected at least 2 channels, got {}".format(channel_count))
    channels = [perlin3(shape, PerlinConfig(frequency, octaves, seed=derive_seed(seed, c))).data
                for c in range(channel_count)]
    labels = argmax_labels(np.stack(channels))
    present = np.unique(labels.data).size
    if present < channel_count:
        logger.debug("%i of %i labels are empty for seed %i", channel_count - present, channel_count, seed)
    return labels


def assign_intensities(labels: LabelVolume, seed: int) -> ScalarVolume:
    """Give every label a constant intensity drawn uniformly from [0, 1). No noise or bias field is added."""
    rng = np.random.default_rng(seed)
    intensities = rng.random(labels.label_count).astype(np.float32)
    return ScalarVolume(intensities[labels.data])


@dataclass(frozen=True)
class PairConfig:
    """
    Settings of random registration pairs.

    intensity_seed_policy "shared" deforms one image twice; "independent" draws new intensities for the
    moving image from the same shapes.
    """
    shape: tuple = dv.default_shape
    channels: int = dv.default_label_channels
    svf_amplitude: float = dv.default_svf_amplitude
    svf_frequency: int = dv.default_svf_frequency
    ss_steps: int = dv.default_ss_steps
    intensity_seed_policy: str = "shared"
    emit_labels: bool = True
    label_frequency: int = dv.default_perlin_frequency
    label_octaves: int = dv.default_perlin_octaves

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(as_shape(self.shape)))
        if self.channels < 2:
            raise ValueError("Expected at least 2 channels, got {}".format(self.channels))
        if self.svf_amplitude < 0:
            raise ValueError("Expected svf_amplitude >= 0, got {}".format(self.svf_amplitude))
        if self.ss_steps < 0:
            raise ValueError("Expected ss_steps >= 0, got {}".format(self.ss_steps))
        if self.svf_frequency < 1:
            raise ValueError("Expected svf_frequency >= 1, got {}".format(self.svf_frequency))
        if self.intensity_seed_policy not in INTENSITY_POLICIES:
            raise ValueError("Expected intensity_seed_policy in {}, got {}".format(
                INTENSITY_POLICIES, self.intensity_seed_policy))


@dataclass
class TrainingPair:
    """
    A fixed and a moving image made from the same source, with their label maps and true deformations.

    Labels are None when the pair was generated with emit_labels=False.
    """
    fixed: ScalarVolume
    moving: ScalarVolume
    fixed_labels: Optional[LabelVolume]
    moving_labels: Optional[LabelVolume]
    phi_to_fixed: VectorField
    phi_to_moving: VectorField
    seed: int = 0
    extra: dict = field(default_factory=dict)


def random_svf(shape, cfg=PairConfig(), seed=0) -> VectorField:
    """
    Random smooth velocity field from three independent noise realizations.

    The field is scaled so that its largest absolute component equals cfg.svf_amplitude voxels.
    """
    shape = as_shape(shape)
    components = [perlin3(shape, PerlinConfig(cfg.svf_frequency, 1, seed=derive_seed(seed, axis))).data
                  for axis in range(3)]
    velocity = np.stack(components).astype(np.float64)
    peak = np.abs(velocity).max()
    if cfg.svf_amplitude == 0 or peak == 0:
        velocity = np.zeros_like(velocity)
    else:
        velocity *= cfg.svf_amplitude / peak
    return VectorField(velocity.astype(np.float32), kind="velocity")


def make_pair(cfg=PairConfig(), seed=0) -> TrainingPair:
    """
    Generate one registration pair.

    A random shape image is deformed by two independent diffeomorphisms (scaling-and-squaring of random
    velocity fields) to give the fixed and the moving image. Label maps follow with nearest-neighbour warping.
    """
    shape = as_shape(cfg.shape)
    labels = multi_channel_labels(shape, cfg.channels, derive_seed(seed, 0), cfg.label_frequency,
                                  cfg.label_octaves)
    image = assign_intensities(labels, derive_seed(seed, 1))
    ss = SsConfig(cfg.ss_steps)
    phi_fixed = scaling_and_squaring(random_svf(shape, cfg, derive_seed(seed, 2)), ss)
    phi_moving = scaling_and_squaring(random_svf(shape, cfg, derive_seed(seed, 3)), ss)
    if cfg.intensity_seed_policy == "shared":
        moving_source = image
    else:
        moving_source = assign_intensities(labels, derive_seed(seed, 4))
    return TrainingPair(
        fixed=warp_scalar(image, phi_fixed),
        moving=warp_scalar(moving_source, phi_moving),
        fixed_labels=warp_labels(labels, phi_fixed) if cfg.emit_labels else None,
        moving_labels=warp_labels(labels, phi_moving) if cfg.emit_labels else None,
        phi_to_fixed=phi_fixed,
        phi_to_moving=phi_moving,
        seed=seed,
    )


def pair_stream(cfg=PairConfig(), base_seed=0, start=0, stop=None):
    """
    Endless (or bounded) iterator of pairs; pair i uses the seed derived from (base_seed, i).

    :param start:   index of the first pair, to restart a stream where it stopped
    :param stop:    index after the last pair, None for an endless stream
    """
    indices = itertools.count(start) if stop is None else range(start, stop)
    for index in indices:
        yield make_pair(cfg, derive_seed(base_seed, index))


class PairProducer:
    """
    Generate pairs in a background thread and hand them out through a bounded queue.

    The content of pair i only depends on (cfg, base_seed, i), so the order and values are the same as
    pair_stream regardless of thread scheduling.
    """

    _done = object()

    def __init__(self, make, count: int, maxsize=4):
        """
        :param make:    callable taking an index and returning an item
        :param count:   number of items to produce
        :param maxsize: queue bound
        """
        self._queue = queue.Queue(maxsize=maxsize)
        self._stop = threading.Event()
        self._count = count
        self._make = make
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()

    def _run(self):
        try:
            for index in range(self._count):
                if self._stop.is_set():
                    return
                self._put(self._make(index))
        except Exception as error:    # handed to the consumer
            self._put(error)
        self._put(self._done)

    def _put(self, item):
        while not self._stop.is_set():
            try:
                self._queue.put(item, timeout=0.1)
                return
            except queue.Full:
                continue

    def __iter__(self):
        while True:
            item = self._queue.get()
            if item is self._done:
                return
            if isinstance(item, Exception):
                raise item
            yield item

    def close(self):
        self._stop.set()
        self._thread.join(timeout=5)

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass(frozen=True)
class DownstreamConfig:
    """
    Settings of the downstream synthetic family.

    One anatomy (label map) is generated from the family seed; every subject is that anatomy deformed by its
    own random velocity field, with smooth per-region intensity gradients and additive Gaussian noise.
    """
    shape: tuple = dv.default_shape
    labels: int = dv.default_downstream_labels
    frequency: int = dv.default_downstream_frequency
    svf_amplitude: float = dv.default_downstream_svf_amplitude
    svf_frequency: int = dv.default_downstream_frequency
    ss_steps: int = dv.default_ss_steps
    noise: float = dv.default_downstream_noise
    gradient_strength: float = 0.15
    split: tuple = dv.default_downstream_split
    seed: int = 1

    def __post_init__(self):
        object.__setattr__(self, "shape", tuple(as_shape(self.shape)))
        object.__setattr__(self, "split", tuple(int(n) for n in self.split))
        if len(self.split) != 3 or min(self.split) < 0 or self.split[0] < 1:
            raise ValueError("Expected (train, validation, test) counts with train >= 1, got {}".format(self.split))
        if self.labels < 2:
            raise ValueError("Expected at least 2 labels, got {}".format(self.labels))
        if self.noise < 0 or self.svf_amplitude < 0:
            raise ValueError("Noise and amplitude should be non-negative")


class DownstreamDataset:
    """
    Atlas and subjects of the downstream family, split into train, validation and test volumes.

    ATTRIBUTES
    :ivar atlas:            ScalarVolume, the moving image of every pair
    :ivar atlas_labels:     LabelVolume of the atlas
    :ivar subjects:         dict "train"/"val"/"test" -> list of (ScalarVolume, LabelVolume)

    METHODS
    pairs       list of (fixed, fixed_labels, moving, moving_labels) for atlas-to-subject registration: the
                subject image and labels, then the atlas image and labels
    """

    def __init__(self, atlas, atlas_labels, subjects: dict):
        self.atlas = atlas
        self.atlas_labels = atlas_labels
        self.subjects = subjects

    def __len__(self):
        return sum(len(s) for s in self.subjects.values())

    def pairs(self, split: str, indices=None) -> list:
        if split not in self.subjects:
            raise ValueError("Expected split 'train', 'val' or 'test', got {}".format(split))
        subjects = self.subjects[split]
        if indices is not None:
            subjects = [subjects[i] for i in indices]
        return [(image, labels, self.atlas, self.atlas_labels) for image, labels in subjects]


def _downstream_anatomy(cfg: DownstreamConfig) -> LabelVolume:
    return multi_channel_labels(cfg.shape, cfg.labels, derive_seed(cfg.seed, 0), cfg.frequency)


def _downstream_subject(cfg: DownstreamConfig, anatomy: LabelVolume, seed: int):
    """One subject: deformed anatomy, smooth per-region intensities, noise. Returns (image, labels, phi)."""
    shape = as_shape(cfg.shape)
    rng = np.random.default_rng(derive_seed(seed, 0))
    base = np.random.default_rng(derive_seed(cfg.seed, 1)).uniform(0.1, 0.9, size=cfg.labels)
    slopes = rng.uniform(-cfg.gradient_strength, cfg.gradient_strength, size=(cfg.labels, 3))
    grid = identity_grid(shape, dtype=np.float64).data
    centred = [grid[axis] / (shape[axis] - 1) - 0.5 for axis in range(3)]
    region = anatomy.data
    intensity = base[region] + sum(slopes[region, axis] * centred[axis] for axis in range(3))
    svf_cfg = PairConfig(shape=shape, svf_amplitude=cfg.svf_amplitude, svf_frequency=cfg.svf_frequency)
    phi = scaling_and_squaring(random_svf(shape, svf_cfg, derive_seed(seed, 1)), SsConfig(cfg.ss_steps))
    warped = warp_scalar(ScalarVolume(intensity.astype(np.float32)), phi).data.astype(np.float64)
    warped += rng.normal(scale=cfg.noise, size=warped.shape)
    return ScalarVolume(warped.astype(np.float32)), warp_labels(anatomy, phi), phi


def make_downstream_dataset(cfg=DownstreamConfig()) -> DownstreamDataset:
    """
    Generate the atlas (subject 0) and the train, validation and test subjects of the downstream family.
    """
    anatomy = _downstream_anatomy(cfg)
    atlas, atlas_labels, _ = _downstream_subject(cfg, anatomy, derive_seed(cfg.seed, 2, 0))
    subjects = {}
    index = 1
    for split, count in zip(("train", "val", "test"), cfg.split):
        subjects[split] = []
        for _ in range(count):
            image, labels, _ = _downstream_subject(cfg, anatomy, derive_seed(cfg.seed, 2, index))
            subjects[split].append((image, labels))
            index += 1
    logger.info("Generated downstream family: %i train, %i validation, %i test subjects", *cfg.split)
    return DownstreamDataset(atlas, atlas_labels, subjects)


def downstream_pair_stream(cfg=DownstreamConfig(), base_seed=0, start=0, stop=None):
    """
    In-domain pretraining pairs: two fresh subjects of the downstream family per pair.

    Subjects are drawn from seeds derived from base_seed, disjoint from the seeds of make_downstream_dataset.
    """
    anatomy = _downstream_anatomy(cfg)
    indices = itertools.count(start) if stop is None else range(start, stop)
    for index in indices:
        seed = derive_seed(base_seed, index)
        fixed, fixed_labels, phi_fixed = _downstream_subject(cfg, anatomy, derive_seed(seed, 0, 1))
        moving, moving_labels, phi_moving = _downstream_subject(cfg, anatomy, derive_seed(seed, 1, 1))
        yield TrainingPair(fixed, moving, fixed_labels, moving_labels, phi_fixed, phi_moving, seed=seed)
