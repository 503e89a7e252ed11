"""
CSV input and output for datasets, trajectories and result tables
"""
import logging
import os

import numpy as np
import pandas as pd

from microbench.errors import SchemaError
from microbench.geometry import Trajectory
from microbench.locomotion.env import TRANSITION_COLUMNS, TransitionDataset
from microbench.scenes import poses_trajectory, read_poses

logger = logging.getLogger(__name__)

TRAJECTORY_COLUMNS = ["frame", "x", "y", "z"]


def write_csv(frame, path, seed=None, columns=None):
    """
    Write a table, preceded by a `# seed=<n>` line when seed is given

    Args:
        frame (pd.DataFrame): rows to write
        path (str): destination
        seed (int, optional): master seed recorded in the header comment
        columns (list, optional): required column order
    """
    if columns is not None:
        if list(frame.columns) != list(columns):
            raise SchemaError(f"expected columns {columns}, got {list(frame.columns)}")
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as f:
        if seed is not None:
            f.write(f"# seed={seed}\n")
        frame.to_csv(f, index=False, float_format="%.17g", lineterminator="\n")
    logger.debug("Wrote %d rows to %s", len(frame), path)


def read_csv(path, columns=None):
    """Read a table written by write_csv, skipping comment lines"""
    if not os.path.exists(path):
        raise FileNotFoundError(f"file not found: {path}")
    frame = pd.read_csv(path, comment="#")
    if columns is not None:
        missing = [c for c in columns if c not in frame.columns]
        if missing:
            raise SchemaError(f"{path}: missing columns {missing}")
    return frame


def read_seed(path):
    """Seed recorded in a `# seed=<n>` header line, or None"""
    with open(path, "r", encoding="utf-8") as f:
        for line in f:
            if not line.startswith("#"):
                break
            key, _, value = line[1:].strip().partition("=")
            if key.strip() == "seed":
                return int(value)
    return None


def save_transitions(dataset, path, seed=None):
    write_csv(dataset.to_frame(), path, seed, TRANSITION_COLUMNS)


def load_transitions(path):
    return TransitionDataset.from_frame(read_csv(path, TRANSITION_COLUMNS))


def trajectory_frame(trajectory):
    pos = trajectory.positions
    return pd.DataFrame({"frame": np.arange(len(pos)), "x": pos[:, 0], "y": pos[:, 1], "z": pos[:, 2]},
                        columns=TRAJECTORY_COLUMNS)


def save_trajectory(trajectory, path, seed=None):
    write_csv(trajectory_frame(trajectory), path, seed, TRAJECTORY_COLUMNS)


def load_trajectory(path):
    """
    Trajectory from a frame,x,y,z CSV or from a KITTI poses file

    Files whose first data line is not the CSV header are read as KITTI poses.
    """
    with open(path, "r", encoding="utf-8") as f:
        first = next((ln for ln in f if ln.strip() and not ln.startswith("#")), "")
    if first.strip().split(",")[0] == "frame":
        frame = read_csv(path, TRAJECTORY_COLUMNS).sort_values("frame")
        return Trajectory(frame[["x", "y", "z"]].to_numpy(dtype=np.float64))
    return poses_trajectory(read_poses(path))
