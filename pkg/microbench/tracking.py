"""
Pyramidal Lucas-Kanade point tracking with a forward-backward check
"""
import logging
from typing import NamedTuple

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from microbench.errors import DomainError
from microbench.features import keypoints_to_array

logger = logging.getLogger(__name__)


class KltConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    levels: int = Field(3, ge=1)
    window: int = Field(21, ge=3)
    max_iterations: int = Field(30, ge=1)
    epsilon: float = Field(0.01, gt=0.0)
    fb_tolerance: float = Field(1.0, gt=0.0)

    def lk_params(self):
        return dict(
            winSize=(self.window, self.window),
            maxLevel=self.levels - 1,
            criteria=(cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, self.max_iterations, self.epsilon),
        )


class TrackResult(NamedTuple):
    """Per-input-point tracking outcome; rows with tracked=False were dropped"""

    prev_pts: np.ndarray
    next_pts: np.ndarray
    tracked: np.ndarray

    def pairs(self):
        """(prev, next) pixel arrays of the surviving matches"""
        return self.prev_pts[self.tracked], self.next_pts[self.tracked]


def _inside(pts, width, height):
    return (pts[:, 0] >= 0) & (pts[:, 0] <= width - 1) & (pts[:, 1] >= 0) & (pts[:, 1] <= height - 1)


def klt_track(prev, next_img, points, cfg=None):
    """
    Track keypoints from prev into next_img

    A point is dropped when the tracker loses it, when it lands outside the
    image, or when tracking it back from next_img misses the start by more
    than fb_tolerance pixels.

    Args:
        prev (GreyImage): source frame
        next_img (GreyImage): target frame, same size as prev
        points (list[Keypoint] | np.ndarray): points in prev
        cfg (KltConfig): tracker parameters

    Returns:
        TrackResult: one row per input point
    """
    cfg = cfg or KltConfig()
    if prev.data.shape != next_img.data.shape:
        raise DomainError(f"frame sizes differ: {prev.data.shape} vs {next_img.data.shape}")
    if isinstance(points, np.ndarray):
        p0 = points.astype(np.float32).reshape(-1, 2)
    else:
        p0 = keypoints_to_array(points)
    if len(p0) == 0:
        empty = np.empty((0, 2), dtype=np.float32)
        return TrackResult(empty, empty, np.zeros(0, dtype=bool))

    params = cfg.lk_params()
    p1, status, _ = cv2.calcOpticalFlowPyrLK(prev.data, next_img.data, p0.reshape(-1, 1, 2), None, **params)
    p0r, status_back, _ = cv2.calcOpticalFlowPyrLK(next_img.data, prev.data, p1, None, **params)
    p1 = p1.reshape(-1, 2)
    p0r = p0r.reshape(-1, 2)

    fb_error = np.linalg.norm(p0 - p0r, axis=1)
    tracked = (
        (status.ravel() == 1)
        & (status_back.ravel() == 1)
        & np.all(np.isfinite(p1), axis=1)
        & _inside(p1, prev.width, prev.height)
        & (fb_error <= cfg.fb_tolerance)
    )
    logger.debug("KLT kept %d of %d points", int(tracked.sum()), len(p0))
    return TrackResult(p0, p1, tracked)
