"""
Plot-ready CSV tables for the experiment figures
"""
import logging

import pandas as pd

from microbench.data_loader import TRAJECTORY_COLUMNS, trajectory_frame, write_csv
from microbench.errors import SchemaError
from microbench.geometry import Trajectory
from microbench.locomotion.mbrl import FIG4_COLUMNS
from microbench.odometry import ratio_table

logger = logging.getLogger(__name__)

RATIO_COLUMNS = ["noise", "ratio_mse", "ratio_mee", "n_seeds"]
SCHEMAS = {
    "fig4": FIG4_COLUMNS,
    "fig5": RATIO_COLUMNS,
    "fig6": RATIO_COLUMNS,
    "traj": TRAJECTORY_COLUMNS,
}


def noise_level(label):
    """Numeric level of a noise label such as 'static:40' or 'walk:30'"""
    return 0.0 if label == "none" else float(label.partition(":")[2])


def summarize_ratios(rows, detector="fast"):
    """
    Collapse sweep rows into one ratio row per noise level

    Args:
        rows (pd.DataFrame): noise_sweep output
        detector (str): detector family to summarize

    Returns:
        pd.DataFrame: noise,ratio_mse,ratio_mee,n_seeds sorted by noise

    Raises:
        SchemaError: the rows hold no runs of that detector
    """
    ratios = ratio_table(rows)
    ratios = ratios[ratios["detector"] == detector]
    if ratios.empty:
        found = sorted(rows["detector"].unique())
        raise SchemaError(f"no {detector!r} runs to summarize, sweep holds {found}")
    summary = [
        {
            "noise": noise_level(noise),
            "ratio_mse": float(group["ratio_mse"].mean()),
            "ratio_mee": float(group["ratio_mee"].mean()),
            "n_seeds": int(len(group)),
        }
        for noise, group in ratios.groupby("noise", sort=False)
    ]
    frame = pd.DataFrame(summary, columns=RATIO_COLUMNS)
    return frame.sort_values("noise", kind="stable").reset_index(drop=True)


def emit_figure_data(results, kind, path, seed=None, detector="fast"):
    """
    Write the CSV behind one figure

    Args:
        results: fig4_sweep table (fig4), noise_sweep rows or a ratio summary
            (fig5, fig6), or a Trajectory / trajectory table (traj)
        kind (str): fig4, fig5, fig6 or traj
        path (str): output file
        seed (int, optional): master seed for the header comment
        detector (str): detector family summarized from raw sweep rows
    """
    if kind not in SCHEMAS:
        raise SchemaError(f"unknown figure kind {kind!r}")
    if kind == "traj" and isinstance(results, Trajectory):
        results = trajectory_frame(results)
    elif kind in ("fig5", "fig6") and "dynamic" in getattr(results, "columns", ()):
        results = summarize_ratios(results, detector)
    if not isinstance(results, pd.DataFrame):
        raise SchemaError(f"{kind} data must be a table, got {type(results).__name__}")
    write_csv(results, path, seed, SCHEMAS[kind])
    logger.info("Wrote %s data (%d rows) to %s", kind, len(results), path)
