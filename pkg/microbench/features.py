"""
FAST corner detection, non-maximum suppression and Dynamic Thresholding
"""
import logging
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from microbench.errors import DomainError

logger = logging.getLogger(__name__)

BORDER = 3
MIN_IMAGE_SIZE = 7
MAX_REDETECT = 10

# Bresenham circle of radius 3 as (dx, dy), clockwise from the top
CIRCLE = np.array([
    (0, -3), (1, -3), (2, -2), (3, -1),
    (3, 0), (3, 1), (2, 2), (1, 3),
    (0, 3), (-1, 3), (-2, 2), (-3, 1),
    (-3, 0), (-3, -1), (-2, -2), (-1, -3),
])
COMPASS = [0, 4, 8, 12]


class Keypoint(NamedTuple):
    x: int
    y: int
    score: float


class FastConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    threshold: float = Field(50.0, ge=1.0, le=255.0)
    arc_length: int = Field(9, ge=9, le=12)
    nms_radius: int = Field(3, ge=0)


class DynThreshState(BaseModel):
    """Feedback-regulated detector threshold"""

    model_config = ConfigDict(frozen=True)

    threshold: float = 50.0
    up_rate: float = Field(1.1, gt=1.0)
    down_rate: float = Field(0.9, gt=0.0, lt=1.0)
    min_count: int = Field(1000, ge=0)
    max_count: int = Field(2000, ge=1)
    lower: float = Field(1.0, gt=0.0)
    upper: float = 255.0

    @model_validator(mode="after")
    def _check_ranges(self):
        if self.min_count >= self.max_count:
            raise ValueError(f"min_count {self.min_count} must be below max_count {self.max_count}")
        if self.lower >= self.upper:
            raise ValueError("clamp bounds are inverted")
        if not self.lower <= self.threshold <= self.upper:
            raise ValueError(f"threshold {self.threshold} outside [{self.lower}, {self.upper}]")
        return self

    @classmethod
    def for_noise(cls, sigma=0.0, aggressive=False, **overrides):
        """
        Preset for an expected noise level

        Gross corruption (sigma above 60) shifts the accepted count range up to
        1500-2500; aggressive=True uses 1.25/0.8 update rates.
        """
        values = {}
        if sigma > 60:
            values.update(min_count=1500, max_count=2500)
        if aggressive:
            values.update(up_rate=1.25, down_rate=0.8)
        values.update(overrides)
        return cls(**values)

    @classmethod
    def for_slipd(cls, tau=2.0, **overrides):
        return cls(threshold=tau, lower=0.1, upper=10.0, **overrides)

    def in_range(self, count):
        return self.min_count <= count <= self.max_count


def dyn_thresh_update(state, observed_count):
    """Scale the threshold up (too many points) or down (too few), then clamp"""
    threshold = state.threshold
    if observed_count > state.max_count:
        threshold *= state.up_rate
    elif observed_count < state.min_count:
        threshold *= state.down_rate
    threshold = min(max(threshold, state.lower), state.upper)
    return state.model_copy(update={"threshold": threshold})


def _check_size(img):
    if img.width < MIN_IMAGE_SIZE or img.height < MIN_IMAGE_SIZE:
        raise DomainError(f"image must be at least {MIN_IMAGE_SIZE}x{MIN_IMAGE_SIZE}, got {img.width}x{img.height}")


def _arc_score(mask, excess, arc_length):
    """
    Score of the contiguous circular run of True entries along axis 0

    Returns the summed excess over the run when it is at least arc_length long
    and 0 elsewhere. A second qualifying run cannot exist for arc_length >= 9.
    """
    n = mask.shape[0]
    full = mask.all(axis=0)
    run = np.zeros(mask.shape[1:], dtype=np.int32)
    acc = np.zeros(mask.shape[1:], dtype=np.float64)
    best = np.zeros(mask.shape[1:], dtype=np.float64)
    for i in range(2 * n):
        m = mask[i % n]
        run = np.where(m, run + 1, 0)
        acc = np.where(m, acc + excess[i % n], 0.0)
        best = np.where(run >= arc_length, np.maximum(best, acc), best)
    return np.where(full, np.where(mask, excess, 0.0).sum(axis=0), best)


def _segment_scores(center, circle, threshold, arc_length):
    diff = circle - center[None]
    excess = np.abs(diff) - threshold
    bright = _arc_score(diff > threshold, excess, arc_length)
    dark = _arc_score(diff < -threshold, excess, arc_length)
    return np.maximum(bright, dark)


def _circle_stack(values, y0, y1, x0, x1):
    return np.stack([values[y0 + dy:y1 + dy, x0 + dx:x1 + dx] for dx, dy in CIRCLE])


def fast_segment_test(img, x, y, cfg):
    """
    Segment test at one pixel

    Args:
        img (GreyImage): input image
        x, y (int): pixel at least 3 pixels from every border
        cfg (FastConfig): threshold and arc length

    Returns:
        tuple: (is_corner, score)
    """
    if not (BORDER <= x < img.width - BORDER and BORDER <= y < img.height - BORDER):
        raise DomainError(f"pixel ({x}, {y}) is within {BORDER} pixels of the border")
    values = img.data.astype(np.float64)
    center = values[y:y + 1, x:x + 1]
    circle = _circle_stack(values, y, y + 1, x, x + 1)
    score = float(_segment_scores(center, circle, cfg.threshold, cfg.arc_length)[0, 0])
    return score > 0, score


def _candidates(center, circle, threshold):
    """
    Pixels passing the compass pre-test

    Any run of 9 or more circle pixels covers at least two of the four compass
    pixels, so a corner needs two compass pixels on the same side of the band.
    """
    compass = circle[COMPASS] - center[None]
    bright = (compass > threshold).sum(axis=0)
    dark = (compass < -threshold).sum(axis=0)
    return (bright >= 2) | (dark >= 2)


def fast_score_map(img, cfg):
    """Full-size map holding the segment-test score of every corner (0 elsewhere)"""
    _check_size(img)
    values = img.data.astype(np.float64)
    h, w = values.shape
    center = values[BORDER:h - BORDER, BORDER:w - BORDER]
    circle = _circle_stack(values, BORDER, h - BORDER, BORDER, w - BORDER)
    keep = _candidates(center, circle, cfg.threshold)
    inner = np.zeros_like(center)
    inner[keep] = _segment_scores(center[keep], circle[:, keep], cfg.threshold, cfg.arc_length)
    scores = np.zeros_like(values)
    scores[BORDER:h - BORDER, BORDER:w - BORDER] = inner
    return scores


def non_max_suppression(scores, radius):
    """
    Keep positive entries that dominate their (2r+1)^2 window

    Equal scores are resolved in favour of the entry earliest in (y, x) order.

    Returns:
        list[Keypoint]: survivors sorted by (y, x)
    """
    h, w = scores.shape
    keep = scores > 0
    if radius > 0 and keep.any():
        padded = np.pad(scores, radius)
        for oy in range(-radius, radius + 1):
            for ox in range(-radius, radius + 1):
                if oy == 0 and ox == 0:
                    continue
                neighbour = padded[radius + oy:radius + oy + h, radius + ox:radius + ox + w]
                later = oy > 0 or (oy == 0 and ox > 0)
                keep &= (scores >= neighbour) if later else (scores > neighbour)
    ys, xs = np.nonzero(keep)
    return [Keypoint(int(x), int(y), float(scores[y, x])) for y, x in zip(ys, xs)]


def fast_detect(img, cfg):
    """FAST corners with score-based non-maximum suppression, sorted by (y, x)"""
    keypoints = non_max_suppression(fast_score_map(img, cfg), cfg.nms_radius)
    logger.debug("FAST t=%.2f found %d keypoints", cfg.threshold, len(keypoints))
    return keypoints


def detect_regulated(detect, img, state, redetect=False):
    """
    Run a thresholded detector under Dynamic Thresholding

    Args:
        detect: callable (img, threshold) -> list of keypoints
        img (GreyImage): frame
        state (DynThreshState): current threshold state
        redetect (bool): retry the same frame (at most 10 times) until the count
            is in range; otherwise the update only affects the next frame

    Returns:
        tuple: (keypoints, next state)
    """
    keypoints = detect(img, state.threshold)
    state = dyn_thresh_update(state, len(keypoints))
    if redetect:
        for _ in range(MAX_REDETECT - 1):
            if state.in_range(len(keypoints)):
                break
            keypoints = detect(img, state.threshold)
            state = dyn_thresh_update(state, len(keypoints))
    return keypoints, state


def keypoints_to_array(keypoints):
    """(N, 2) float32 pixel coordinates"""
    if not keypoints:
        return np.empty((0, 2), dtype=np.float32)
    return np.array([(k.x, k.y) for k in keypoints], dtype=np.float32)
