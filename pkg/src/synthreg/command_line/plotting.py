"""
NAME
plotting

DESCRIPTION
Figures of training runs: training loss per step and validation Dice per epoch, raw and smoothed with a
trailing moving average, saved as a standalone SVG with the plotted numbers in a sibling CSV.

FUNCTIONS
write_curves_svg
"""

import os
import logging
from matplotlib.figure import Figure
from ..regtools import defaultvalues as dv
from ..regtools.ptools import moving_average, columns_to_csv

logger = logging.getLogger(__name__)


def write_curves_svg(log, path: str, window=dv.default_smoothing_window, title=None):
    """
    Plot the curves of a CurveLog and save them as SVG; the numbers go to a csv file next to it.

    :param log:     CurveLog with at least one training loss
    :param path:    SVG file to write; the csv gets the same name with the extension .csv
    :param window:  moving average window of the smoothed curves
    :return:        path of the csv file
    """
    if len(log) == 0:
        raise ValueError("Can not plot an empty curve log")
    smoothed_loss = moving_average(log.losses, window)
    smoothed_dice = moving_average(log.val_dice, window)

    fig = Figure(figsize=(10, 4))
    loss_ax = fig.add_subplot(121)
    loss_ax.plot(log.steps, log.losses, color="lightgray", label="training loss")
    loss_ax.plot(log.steps, smoothed_loss, color="tab:blue", label="smoothed (window {})".format(window))
    loss_ax.set_xlabel("step")
    loss_ax.set_ylabel("loss")
    loss_ax.legend()
    dice_ax = fig.add_subplot(122)
    if log.val_dice:
        dice_ax.plot(log.epochs, log.val_dice, "o", color="lightgray", label="validation Dice")
        dice_ax.plot(log.epochs, smoothed_dice, color="tab:orange", label="smoothed (window {})".format(window))
        dice_ax.legend()
    dice_ax.set_xlabel("epoch")
    dice_ax.set_ylabel("Dice")
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    folder = os.path.dirname(os.path.abspath(path))
    os.makedirs(folder, exist_ok=True)
    fig.savefig(path, format="svg")

    csv_path = os.path.splitext(path)[0] + ".csv"
    columns_to_csv(["step", "loss", "smoothed_loss", "epoch", "val_dice", "smoothed_val_dice"],
                   [log.steps, log.losses, list(smoothed_loss), log.epochs, log.val_dice, list(smoothed_dice)],
                   csv_path)
    logger.info("Curves written to %s", path)
    return csv_path
