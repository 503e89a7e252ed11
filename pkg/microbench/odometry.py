"""
Monocular visual odometry with optional Dynamic Thresholding, trajectory
error metrics, and the fixed-versus-dynamic noise sweeps
"""
import logging
from typing import Literal, NamedTuple, Optional

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from microbench.errors import DomainError, InsufficientDataError
from microbench.features import DynThreshState, FastConfig, detect_regulated, fast_detect
from microbench.geometry import (
    PoseSE3,
    RansacConfig,
    Trajectory,
    decompose_essential,
    estimate_essential_ransac,
)
from microbench.imaging import NoiseWalkState, add_gaussian_noise, advance_noise_walk
from microbench.slipd import SlipdModel, slipd_detect
from microbench.tracking import KltConfig, klt_track

logger = logging.getLogger(__name__)

SWEEP_COLUMNS = ["sequence", "detector", "dynamic", "noise", "seed", "mse", "mee", "degenerate_frames"]
FORWARD = PoseSE3(np.eye(3), np.array([0.0, 0.0, -1.0]))


class NoiseSpec(BaseModel):
    """Per-frame sensor noise: none, static sigma, or a random walk capped at level"""

    model_config = ConfigDict(frozen=True)

    kind: Literal["none", "static", "walk"] = "none"
    level: float = Field(0.0, ge=0.0)

    @classmethod
    def parse(cls, text):
        """'none', 'static:40' or 'walk:30'"""
        kind, _, level = text.partition(":")
        return cls(kind=kind, level=float(level or 0.0))

    def label(self):
        return "none" if self.kind == "none" else f"{self.kind}:{self.level:g}"


class VoConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    detector: Literal["fast", "slipd"] = "fast"
    dynamic: bool = False
    redetect: bool = False
    noise: NoiseSpec = NoiseSpec()
    fast: FastConfig = FastConfig(nms_radius=1)
    thresholds: DynThreshState = DynThreshState()
    slipd: Optional[SlipdModel] = None
    klt: KltConfig = KltConfig()
    ransac: RansacConfig = RansacConfig()

    def base_threshold(self):
        if self.detector == "slipd":
            return self.slipd.score_threshold
        return self.fast.threshold

    def threshold_state(self):
        if self.detector == "slipd":
            return DynThreshState.for_slipd(
                self.slipd.score_threshold,
                min_count=self.thresholds.min_count,
                max_count=self.thresholds.max_count,
                up_rate=self.thresholds.up_rate,
                down_rate=self.thresholds.down_rate,
            )
        return self.thresholds.model_copy(update={"threshold": self.fast.threshold})


class VoResult(NamedTuple):
    trajectory: Trajectory
    degenerate_frames: int
    keypoint_counts: list
    thresholds: list
    sigmas: list


def trajectory_error(est, gt, metric="mse"):
    """
    Per-frame Euclidean error e_k = |est_k - gt_k|

    Returns:
        float: mean(e_k^2) for 'mse', mean(e_k) for 'mee'
    """
    a = est.positions if isinstance(est, Trajectory) else np.asarray(est, dtype=np.float64)
    b = gt.positions if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    if a.shape != b.shape:
        raise DomainError(f"trajectory lengths differ: {len(a)} vs {len(b)}")
    err = np.linalg.norm(a - b, axis=1)
    if metric == "mse":
        return float(np.mean(err ** 2))
    if metric == "mee":
        return float(np.mean(err))
    raise DomainError(f"unknown metric {metric!r}")


def noisy_frames(frames, noise, rng):
    """
    Lazily corrupt frames in order, re-sampling noise for every frame

    Yields:
        tuple: (noisy frame, sigma used)
    """
    noise_rng, walk_rng = rng.spawn(2)
    walk = NoiseWalkState(limit=noise.level, rng=walk_rng) if noise.kind == "walk" else None
    for frame in frames:
        if noise.kind == "static":
            sigma = noise.level
        elif walk is not None:
            sigma = walk.sigma
            walk = advance_noise_walk(walk)
        else:
            sigma = 0.0
        yield add_gaussian_noise(frame, sigma, noise_rng), sigma


def make_detector(cfg):
    if cfg.detector == "slipd":
        if cfg.slipd is None:
            raise DomainError("the slipd detector needs a trained model")
        return lambda img, threshold: slipd_detect(cfg.slipd, img, threshold)
    return lambda img, threshold: fast_detect(img, cfg.fast.model_copy(update={"threshold": threshold}))


def run_vo(frames, cfg, gt, K, rng, progress=False):
    """
    Estimate the camera trajectory of a frame sequence

    Per frame: inject noise, detect (threshold regulated when cfg.dynamic),
    track into the next frame, estimate and decompose E, scale the unit
    translation by the ground-truth step length and chain the motion.
    Degenerate or cheirality-failed frames reuse the previous motion.

    Args:
        frames (list[GreyImage]): the sequence
        cfg (VoConfig): detector, noise and estimator settings
        gt (Trajectory): ground truth, used only for per-step scale
        K (CameraIntrinsics): camera intrinsics
        rng (np.random.Generator): noise and RANSAC randomness

    Returns:
        VoResult: estimated trajectory and per-frame diagnostics
    """
    if len(frames) < 2:
        raise InsufficientDataError(f"visual odometry needs at least 2 frames, got {len(frames)}")
    if len(gt) != len(frames):
        raise DomainError(f"{len(gt)} ground-truth positions for {len(frames)} frames")
    noise_rng, ransac_rng = rng.spawn(2)
    detect = make_detector(cfg)
    state = cfg.threshold_state()
    steps = gt.step_lengths()

    stream = noisy_frames(frames, cfg.noise, noise_rng)
    current, sigma = next(stream)
    pose = PoseSE3.identity()
    positions = [pose.t]
    motion = FORWARD
    degenerate = 0
    counts, thresholds, sigmas = [], [], [sigma]

    for k in tqdm(range(len(frames) - 1), desc="vo", disable=not progress):
        nxt, sigma = next(stream)
        sigmas.append(sigma)
        thresholds.append(state.threshold)
        if cfg.dynamic:
            keypoints, state = detect_regulated(detect, current, state, redetect=cfg.redetect)
        else:
            keypoints = detect(current, state.threshold)
        counts.append(len(keypoints))

        if steps[k] > 0:
            step_motion = None
            prev_pts, next_pts = klt_track(current, nxt, keypoints, cfg.klt).pairs()
            if len(prev_pts) >= 8:
                est = estimate_essential_ransac(prev_pts, next_pts, K, ransac_rng, cfg.ransac)
                if not est.degenerate:
                    result = decompose_essential(est.essential, prev_pts, next_pts, K, est.inliers, cfg.ransac)
                    if not result.cheirality_failed:
                        step_motion = result.pose
            if step_motion is None:
                degenerate += 1
                step_motion = motion
            motion = step_motion
            # camera k+1 to camera k, with the unit translation scaled to ground truth
            scaled = PoseSE3(motion.R, motion.t * steps[k])
            pose = pose.compose(scaled.inverse())
        positions.append(pose.t)
        current = nxt

    logger.info("VO %s dynamic=%s noise=%s: %d degenerate of %d steps",
                cfg.detector, cfg.dynamic, cfg.noise.label(), degenerate, len(frames) - 1)
    return VoResult(Trajectory(np.array(positions)), degenerate, counts, thresholds, sigmas)


def _run_cell(key, frames, gt, K, cfg, entropy, sequence):
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))
    result = run_vo(frames, cfg, gt, K, rng)
    return key, {
        "sequence": sequence,
        "detector": cfg.detector,
        "dynamic": int(cfg.dynamic),
        "noise": cfg.noise.label(),
        "seed": key[1],
        "mse": trajectory_error(result.trajectory, gt, "mse"),
        "mee": trajectory_error(result.trajectory, gt, "mee"),
        "degenerate_frames": result.degenerate_frames,
    }


def noise_sweep(frames, gt, K, noises, detectors=("fast",), seeds=10, master_seed=0,
                slipd_model=None, sequence="bundled", jobs=1, base=None, progress=False):
    """
    Run every (noise level, seed, detector, fixed/dynamic) cell

    Fixed and dynamic runs at the same (noise level, seed) see identical noise.
    Results are ordered by cell key, so any jobs value yields the same table.

    Args:
        frames, gt, K: the sequence, its ground truth and intrinsics
        noises (list[NoiseSpec]): noise grid
        detectors (tuple[str]): 'fast' and/or 'slipd'
        seeds (int): seeds per level
        master_seed (int): root of all per-cell generators
        slipd_model (SlipdModel): required when 'slipd' is swept
        jobs (int): parallel workers
        base (VoConfig): template for the other settings

    Returns:
        pd.DataFrame: one row per cell with the sweep CSV columns
    """
    base = base or VoConfig()
    cells = []
    for li, noise in enumerate(noises):
        for seed in range(seeds):
            for di, detector in enumerate(detectors):
                for dynamic in (False, True):
                    cfg = base.model_copy(update={
                        "detector": detector, "dynamic": dynamic, "noise": noise, "slipd": slipd_model})
                    key = (li, seed, di, int(dynamic))
                    cells.append((key, cfg, [master_seed, li, seed]))
    logger.info("Sweeping %d cells with %d jobs", len(cells), jobs)
    results = Parallel(n_jobs=jobs)(
        delayed(_run_cell)(key, frames, gt, K, cfg, entropy, sequence)
        for key, cfg, entropy in tqdm(cells, desc="sweep", disable=not progress)
    )
    rows = [row for _, row in sorted(results, key=lambda r: r[0])]
    return pd.DataFrame(rows, columns=SWEEP_COLUMNS)


def _safe_ratio(num, den):
    if den > 0:
        return num / den
    return 1.0 if num == 0 else float("inf")


def ratio_table(rows):
    """
    Fixed-threshold error over the seed-averaged dynamic error

    Returns:
        pd.DataFrame: one row per (sequence, detector, noise, seed) with
        ratio_mse and ratio_mee
    """
    out = []
    for (sequence, detector, noise), group in rows.groupby(["sequence", "detector", "noise"], sort=True):
        dyn = group[group["dynamic"] == 1]
        fixed = group[group["dynamic"] == 0].sort_values("seed")
        dyn_mse, dyn_mee = dyn["mse"].mean(), dyn["mee"].mean()
        for _, r in fixed.iterrows():
            out.append({
                "sequence": sequence, "detector": detector, "noise": noise, "seed": int(r["seed"]),
                "ratio_mse": _safe_ratio(r["mse"], dyn_mse), "ratio_mee": _safe_ratio(r["mee"], dyn_mee),
            })
    return pd.DataFrame(out, columns=["sequence", "detector", "noise", "seed", "ratio_mse", "ratio_mee"])

