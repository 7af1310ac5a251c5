"""
NAME
metrics

DESCRIPTION
Evaluation of registrations: per-label Dice overlap, the percentage of non-diffeomorphic volume of a
deformation and the target registration error between landmarks.

CLASSES
DiceReport
LandmarkSet
TreReport

FUNCTIONS
dice
ndv_percent
tre
"""

import logging
import itertools
from dataclasses import dataclass
import numpy as np
from .ptools import ShapeMismatchError
from .volume import LabelVolume, VectorField, TrilinearSampler, jacobian_matrices, determinant3, _check_kind

logger = logging.getLogger(__name__)

NDV_WEIGHTINGS = ("fractional", "voxel")
CORNER_SCHEMES = tuple(itertools.product((1, -1), repeat=3))


@dataclass
class DiceReport:
    """
    Dice overlap per label.

    :ivar per_label:    dict label -> Dice in [0, 1], only for labels present in at least one input
    :ivar mean:         mean over per_label (nan when no label is present)
    :ivar labels:       tuple of evaluated labels
    """
    per_label: dict
    mean: float
    labels: tuple


def dice(a: LabelVolume, b: LabelVolume, labels=None) -> DiceReport:
    """
    Dice of every label: 2 |a=L and b=L| / (|a=L| + |b=L|).

    Labels absent from both volumes are excluded from the report and the mean.

    :param a:       label map, for example the warped moving labels
    :param b:       label map of the same shape
    :param labels:  labels to evaluate; all labels found in a or b when None
    """
    if a.shape != b.shape:
        raise ShapeMismatchError("Expected label maps of one shape, got {} and {}".format(a.shape, b.shape))
    if labels is None:
        labels = np.union1d(np.unique(a.data), np.unique(b.data))
    per_label = {}
    for label in labels:
        in_a = a.data == label
        in_b = b.data == label
        total = int(in_a.sum()) + int(in_b.sum())
        if total == 0:
            continue
        per_label[int(label)] = 2.0 * int(np.sum(in_a & in_b)) / total
    mean = float(np.mean(list(per_label.values()))) if per_label else float("nan")
    return DiceReport(per_label, mean, tuple(per_label))


def ndv_percent(phi: VectorField, scheme="corners", weighting="fractional") -> float:
    """
    Percentage of non-diffeomorphic volume of a deformation, over the interior voxels.

    With the default scheme the Jacobian determinant is evaluated under the eight one-sided difference
    combinations (forward or backward per axis). Fractional weighting counts 1/8 of a voxel for every
    combination with a non-positive determinant; voxel weighting counts the whole voxel when any combination
    is non-positive. scheme="central" counts voxels with a non-positive central-difference determinant.

    :param phi:         deformation field
    :param scheme:      "corners" or "central"
    :param weighting:   "fractional" or "voxel", for the corner scheme
    :return:            percentage in [0, 100]
    """
    _check_kind(phi, "deformation")
    if weighting not in NDV_WEIGHTINGS:
        raise ValueError("Expected weighting in {}, got {}".format(NDV_WEIGHTINGS, weighting))
    interior = (slice(1, -1),) * 3
    if scheme == "central":
        folded = determinant3(jacobian_matrices(phi, "central"))[interior] <= 0
        return 100.0 * float(folded.mean())
    if scheme != "corners":
        raise ValueError("Expected scheme 'corners' or 'central', got {}".format(scheme))
    counts = np.zeros(tuple(n - 2 for n in phi.shape), dtype=np.int64)
    for directions in CORNER_SCHEMES:
        counts += determinant3(jacobian_matrices(phi, directions))[interior] <= 0
    if weighting == "fractional":
        volume = counts.sum() / len(CORNER_SCHEMES)
    else:
        volume = np.count_nonzero(counts)
    return 100.0 * float(volume) / counts.size


class LandmarkSet:
    """
    Corresponding points of one image.

    ATTRIBUTES
    :ivar points:   float64 array of shape (P, 3) in voxel coordinates
    :ivar spacing:  tuple of three floats, mm per voxel
    """

    def __init__(self, points, spacing=(1.0, 1.0, 1.0), shape=None):
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(points)):
            raise ValueError("Landmarks contain non-finite coordinates")
        self.points = points
        self.spacing = tuple(float(s) for s in spacing)
        if len(self.spacing) != 3 or min(self.spacing) <= 0:
            raise ValueError("Expected three positive spacings, got {}".format(spacing))
        if shape is not None:
            self.check_bounds(shape)

    def __len__(self):
        return len(self.points)

    def check_bounds(self, shape):
        upper = np.asarray(shape, dtype=np.float64) - 1
        if np.any(self.points < 0) or np.any(self.points > upper):
            raise ValueError("Landmarks outside the grid of shape {}".format(tuple(shape)))


@dataclass
class TreReport:
    """Per-landmark distances in mm, with their mean and standard deviation."""
    distances: np.ndarray
    mean: float
    std: float


def tre(moving_lms: LandmarkSet, fixed_lms: LandmarkSet, phi: VectorField) -> TreReport:
    """
    Target registration error: map every fixed landmark x through phi (trilinear sampling of the field) and
    measure the distance to the corresponding moving landmark, in mm using the fixed landmark spacing.
    """
    _check_kind(phi, "deformation")
    if len(moving_lms) != len(fixed_lms):
        raise ValueError("Expected equal landmark counts, got {} and {}".format(len(moving_lms), len(fixed_lms)))
    fixed_lms.check_bounds(phi.shape)
    mapped = TrilinearSampler(phi.shape, fixed_lms.points.T).sample(phi.data).T
    offsets = (mapped - moving_lms.points) * np.asarray(fixed_lms.spacing)
    distances = np.linalg.norm(offsets, axis=1)
    if distances.size == 0:
        return TreReport(distances, float("nan"), float("nan"))
    return TreReport(distances, float(distances.mean()), float(distances.std()))
