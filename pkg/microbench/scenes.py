"""
Synthetic scenes with exact ground truth, correspondence mining, and the
KITTI odometry directory layout (PGM frames, poses.txt, calib.txt)
"""
import glob
import logging
import math
import os
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.ndimage import gaussian_filter
from scipy.spatial.transform import Rotation

from microbench.config import get_settings, make_rng
from microbench.errors import KittiParseError, ValidationError
from microbench.features import FastConfig, fast_detect
from microbench.geometry import CameraIntrinsics, PoseSE3, Trajectory
from microbench.imaging import GreyImage, load_pgm, save_pgm
from microbench.slipd import CorrespondencePair
from microbench.tracking import klt_track

logger = logging.getLogger(__name__)

BUNDLED_SEED = 2020
NEAR_PLANE = 0.1
KITTI_ORTHO_TOLERANCE = 1e-4
IMAGE_DIRS = ("image_0", "images", "frames")


class SceneSpec(BaseModel):
    """
    Random point cloud viewed along a piecewise straight camera path

    segments holds (length, turn_degrees) pairs: the camera yaws by
    turn_degrees at the start of a segment, then moves length units forward.
    look is the camera yaw relative to the direction of travel in degrees;
    90 gives a side-looking camera.
    """

    model_config = ConfigDict(frozen=True)

    n_points: int = Field(5000, gt=0)
    extent: tuple[tuple[float, float], tuple[float, float], tuple[float, float]] = (
        (-30.0, 30.0), (-30.0, 30.0), (4.0, 80.0))
    n_frames: int = Field(100, ge=1)
    segments: tuple[tuple[float, float], ...] = ((10.0, 0.0),)
    look: float = Field(0.0, ge=-180.0, le=180.0)
    blob_sigma: float = Field(1.0, gt=0.0)
    amplitude: tuple[float, float] = (60.0, 200.0)
    background: float = Field(30.0, ge=0.0, le=255.0)
    width: int = Field(256, ge=64)
    height: int = Field(256, ge=64)
    intrinsics: CameraIntrinsics = CameraIntrinsics(fx=100.0, fy=100.0, cx=128.0, cy=128.0)

    @model_validator(mode="after")
    def _check(self):
        for lo, hi in self.extent:
            if lo > hi:
                raise ValueError(f"extent bounds inverted: {(lo, hi)}")
        if self.amplitude[0] > self.amplitude[1]:
            raise ValueError("amplitude range inverted")
        if any(length < 0 for length, _ in self.segments):
            raise ValueError("segment lengths must be non-negative")
        return self


# Side-looking camera over a textured band at depth 10-14; rows above and below
# the band are blob-free. Clean frames give 1000-2000 FAST-50 corners.
BUNDLED_SPEC = SceneSpec(
    n_points=6700,
    extent=((-26.0, 26.0), (-5.0, 5.0), (10.0, 14.0)),
    look=90.0,
    amplitude=(170.0, 205.0),
    background=50.0,
    width=384,
    height=288,
    intrinsics=CameraIntrinsics(fx=192.0, fy=192.0, cx=192.0, cy=144.0),
)


@dataclass(frozen=True)
class Scene:
    spec: SceneSpec
    frames: list
    poses: list
    gt: Trajectory
    points: np.ndarray
    correspondences: np.ndarray

    @property
    def intrinsics(self):
        return self.spec.intrinsics


def camera_path(spec):
    """Camera-to-world poses sampled at equal arc length along the path"""
    lengths = np.array([s[0] for s in spec.segments], dtype=np.float64)
    turns = np.cumsum([math.radians(s[1]) for s in spec.segments])
    starts = np.zeros((len(lengths), 3))
    for i in range(1, len(lengths)):
        yaw = turns[i - 1]
        starts[i] = starts[i - 1] + lengths[i - 1] * np.array([math.sin(yaw), 0.0, math.cos(yaw)])
    total = float(lengths.sum())
    stations = np.linspace(0.0, total, spec.n_frames) if spec.n_frames > 1 else np.zeros(1)
    bounds = np.concatenate([[0.0], np.cumsum(lengths)])
    poses = []
    for s in stations:
        i = int(np.searchsorted(bounds, s, side="right") - 1)
        i = min(max(i, 0), len(lengths) - 1)
        yaw = turns[i]
        heading = np.array([math.sin(yaw), 0.0, math.cos(yaw)])
        R = Rotation.from_euler("y", yaw + math.radians(spec.look)).as_matrix()
        poses.append(PoseSE3(R, starts[i] + (s - bounds[i]) * heading))
    # the first pose is the world frame
    first = poses[0].inverse()
    return [first.compose(p) for p in poses]


def project_points(points, pose, K):
    """
    Pixel positions of world points seen from a camera-to-world pose

    Returns:
        tuple: (pixels (N, 2), depth (N,))
    """
    cam = pose.inverse().apply(points)
    depth = cam[:, 2]
    safe = np.where(depth > NEAR_PLANE, depth, 1.0)
    pix = K.project(np.column_stack([cam[:, 0], cam[:, 1], safe]))
    return pix, depth


def render_frame(spec, pixels, amplitudes):
    """Bilinear splat of point amplitudes blurred into Gaussian blobs"""
    canvas = np.zeros((spec.height, spec.width), dtype=np.float64)
    if len(pixels):
        x0 = np.floor(pixels[:, 0]).astype(np.int64)
        y0 = np.floor(pixels[:, 1]).astype(np.int64)
        fx = pixels[:, 0] - x0
        fy = pixels[:, 1] - y0
        for dx, dy, wgt in ((0, 0, (1 - fx) * (1 - fy)), (1, 0, fx * (1 - fy)),
                            (0, 1, (1 - fx) * fy), (1, 1, fx * fy)):
            xs, ys = x0 + dx, y0 + dy
            ok = (xs >= 0) & (xs < spec.width) & (ys >= 0) & (ys < spec.height)
            np.add.at(canvas, (ys[ok], xs[ok]), amplitudes[ok] * wgt[ok])
        # unit-peak blobs: undo the kernel normalization
        canvas = gaussian_filter(canvas, spec.blob_sigma, mode="constant") * (2.0 * math.pi * spec.blob_sigma ** 2)
    img = np.clip(np.rint(canvas + spec.background), 0, 255).astype(np.uint8)
    return GreyImage(img)


def generate_scene(spec, rng, jobs=1):
    """
    Render a synthetic sequence with exact ground truth

    Args:
        spec (SceneSpec): scene description
        rng (np.random.Generator): point placement and amplitudes
        jobs (int): frames rendered in parallel

    Returns:
        Scene: frames, camera-to-world poses, ground-truth trajectory, world
        points and per-frame pixel positions (NaN when not visible)
    """
    lo = np.array([e[0] for e in spec.extent])
    hi = np.array([e[1] for e in spec.extent])
    points = rng.uniform(lo, hi, size=(spec.n_points, 3))
    amplitudes = rng.uniform(spec.amplitude[0], spec.amplitude[1], size=spec.n_points)
    poses = camera_path(spec)
    K = spec.intrinsics

    correspondences = np.full((len(poses), spec.n_points, 2), np.nan)
    visible_sets = []
    for k, pose in enumerate(poses):
        pix, depth = project_points(points, pose, K)
        visible = (depth > NEAR_PLANE) & (pix[:, 0] > -1) & (pix[:, 0] < spec.width) \
            & (pix[:, 1] > -1) & (pix[:, 1] < spec.height)
        if not visible.any():
            logger.warning("frame %d has no visible points", k)
        correspondences[k, visible] = pix[visible]
        visible_sets.append(visible)

    frames = Parallel(n_jobs=jobs)(
        delayed(render_frame)(spec, correspondences[k, vis], amplitudes[vis])
        for k, vis in enumerate(visible_sets)
    )
    gt = Trajectory(np.array([p.t for p in poses]))
    logger.info("Generated %d frames, %.2f units of path", len(frames), gt.path_length())
    return Scene(spec, list(frames), poses, gt, points, correspondences)


@lru_cache(maxsize=2)
def bundled_scene(frames=None, points=None):
    """The fixed synthetic sequence used for sweeps and acceptance runs"""
    settings = get_settings()
    spec = SceneSpec.model_validate({
        **BUNDLED_SPEC.model_dump(),
        "n_frames": frames or settings.bundled_frames,
        "n_points": points or settings.bundled_points,
    })
    return generate_scene(spec, make_rng(BUNDLED_SEED))


def _in_block(pts, half, width, height):
    with np.errstate(invalid="ignore"):
        return (
            np.all(np.isfinite(pts), axis=1)
            & (pts[:, 0] >= half) & (pts[:, 0] < width - half)
            & (pts[:, 1] >= half) & (pts[:, 1] < height - half)
        )


def _cut_pairs(frames, candidates, block, max_pairs, rng):
    """Patches for (k, ax, ay, bx, by) candidates, subsampled to max_pairs"""
    half = block // 2
    if len(candidates) > max_pairs:
        keep = np.sort(rng.choice(len(candidates), max_pairs, replace=False))
        candidates = [candidates[i] for i in keep]
    normalized = {}
    pairs = []
    for k, ax, ay, bx, by in candidates:
        for i in (k, k + 1):
            if i not in normalized:
                normalized[i] = frames[i].normalized()
        x1 = normalized[k][ay - half:ay + half + 1, ax - half:ax + half + 1].ravel()
        x2 = normalized[k + 1][by - half:by + half + 1, bx - half:bx + half + 1].ravel()
        pairs.append(CorrespondencePair(x1.copy(), x2.copy()))
    logger.debug("Cut %d pairs", len(pairs))
    return pairs


def mine_pairs(correspondences, frames, block, max_pairs, rng):
    """
    Sample patches of the same point in consecutive frames

    Args:
        correspondences (np.ndarray): (F, P, 2) pixel positions, NaN if unseen
        frames (list[GreyImage]): the F frames
        block (int): odd patch size n
        max_pairs (int): upper bound on returned pairs
        rng (np.random.Generator): subsampling

    Returns:
        list[CorrespondencePair]: n*n patches normalized to [0, 1]
    """
    if len(frames) < 2:
        raise ValidationError("mining pairs needs at least two frames")
    half = block // 2
    h, w = frames[0].data.shape
    candidates = []
    for k in range(len(frames) - 1):
        a = np.rint(correspondences[k])
        b = np.rint(correspondences[k + 1])
        ok = _in_block(a, half, w, h) & _in_block(b, half, w, h)
        for p in np.nonzero(ok)[0]:
            candidates.append((k, int(a[p, 0]), int(a[p, 1]), int(b[p, 0]), int(b[p, 1])))
    return _cut_pairs(frames, candidates, block, max_pairs, rng)


def tracked_pairs(frames, block, max_pairs, rng, fast=None, klt=None):
    """
    Training pairs for sequences without exact correspondences

    FAST keypoints of each frame are tracked into the next one with KLT; every
    surviving track contributes one pair.
    """
    if len(frames) < 2:
        raise ValidationError("mining pairs needs at least two frames")
    fast = fast or FastConfig()
    half = block // 2
    h, w = frames[0].data.shape
    candidates = []
    for k in range(len(frames) - 1):
        prev_pts, next_pts = klt_track(frames[k], frames[k + 1], fast_detect(frames[k], fast), klt).pairs()
        a, b = np.rint(prev_pts), np.rint(next_pts)
        ok = _in_block(a, half, w, h) & _in_block(b, half, w, h)
        for p in np.nonzero(ok)[0]:
            candidates.append((k, int(a[p, 0]), int(a[p, 1]), int(b[p, 0]), int(b[p, 1])))
    logger.info("Tracked %d candidate pairs over %d frames", len(candidates), len(frames))
    return _cut_pairs(frames, candidates, block, max_pairs, rng)


def poses_trajectory(poses):
    """Camera positions expressed in the frame of the first pose"""
    if not poses:
        return Trajectory(np.empty((0, 3)))
    first = poses[0].inverse()
    return Trajectory(np.array([first.compose(p).t for p in poses]))


@dataclass(frozen=True)
class KittiSequence:
    frame_paths: list
    poses: list
    intrinsics: CameraIntrinsics

    def __len__(self):
        return len(self.frame_paths)

    def trajectory(self):
        return poses_trajectory(self.poses)

    def frames(self):
        return [load_pgm(p) for p in self.frame_paths]


def _parse_numbers(line, path, lineno, expected):
    try:
        values = [float(v) for v in line.split()]
    except ValueError as e:
        raise KittiParseError(f"non-numeric value: {e}", path, lineno) from e
    if len(values) != expected:
        raise KittiParseError(f"expected {expected} numbers, found {len(values)}", path, lineno)
    return values


def read_poses(path):
    """Parse a KITTI poses file into camera-to-world poses"""
    poses = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            values = _parse_numbers(line, path, lineno, 12)
            try:
                poses.append(PoseSE3.from_matrix(np.array(values).reshape(3, 4), tolerance=KITTI_ORTHO_TOLERANCE))
            except ValidationError as e:
                raise ValidationError(f"{path}:{lineno}: {e}") from e
    return poses


def read_calib(path):
    """Intrinsics from the first projection line (P0 if present) of calib.txt"""
    with open(path, "r", encoding="utf-8") as f:
        lines = [(n, ln) for n, ln in enumerate(f, start=1) if ln.strip()]
    if not lines:
        raise KittiParseError("no projection line", path, 0)
    chosen = next(((n, ln) for n, ln in lines if ln.startswith("P0:")), lines[0])
    lineno, line = chosen
    _, _, rest = line.partition(":") if ":" in line else ("", "", line)
    P = np.array(_parse_numbers(rest, path, lineno, 12)).reshape(3, 4)
    return CameraIntrinsics(fx=P[0, 0], fy=P[1, 1], cx=P[0, 2], cy=P[1, 2])


def load_kitti(directory):
    """
    Load a KITTI-style odometry directory

    Args:
        directory (str): holds an image subdirectory of PGM frames (read in
            lexicographic order), poses.txt and calib.txt

    Returns:
        KittiSequence: validated sequence
    """
    if not os.path.isdir(directory):
        raise FileNotFoundError(f"sequence directory not found: {directory}")
    frame_paths = []
    for name in IMAGE_DIRS:
        frame_paths = sorted(glob.glob(os.path.join(directory, name, "*.pgm")))
        if frame_paths:
            break
    poses = read_poses(os.path.join(directory, "poses.txt"))
    intrinsics = read_calib(os.path.join(directory, "calib.txt"))
    if len(poses) != len(frame_paths):
        raise ValidationError(f"{directory}: {len(poses)} poses for {len(frame_paths)} frames")
    logger.info("Loaded KITTI sequence %s with %d frames", directory, len(frame_paths))
    return KittiSequence(frame_paths, poses, intrinsics)


def format_pose(pose):
    return " ".join(f"{v:.17g}" for v in pose.matrix().ravel())


def write_poses(poses, path):
    with open(path, "w", encoding="utf-8") as f:
        for pose in poses:
            f.write(format_pose(pose) + "\n")


def export_kitti(scene, directory):
    """Write frames, poses.txt and calib.txt in the layout load_kitti reads"""
    image_dir = os.path.join(directory, IMAGE_DIRS[0])
    os.makedirs(image_dir, exist_ok=True)
    for k, frame in enumerate(scene.frames):
        save_pgm(frame, os.path.join(image_dir, f"{k:06d}.pgm"))
    write_poses(scene.poses, os.path.join(directory, "poses.txt"))
    K = scene.intrinsics
    P = np.hstack([K.K, np.zeros((3, 1))])
    with open(os.path.join(directory, "calib.txt"), "w", encoding="utf-8") as f:
        f.write("P0: " + " ".join(f"{v:.17g}" for v in P.ravel()) + "\n")
    logger.info("Exported %d frames to %s", len(scene.frames), directory)
