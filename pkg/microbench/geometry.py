"""
Two-view geometry for calibrated cameras: poses, essential matrices, RANSAC
and cheirality-based decomposition

Conventions: a correspondence (x1, x2) satisfies x2^T E x1 = 0 with
E = [t]x R, where a point X in camera-1 coordinates maps to R X + t in
camera-2 coordinates.
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from microbench.errors import DomainError, InsufficientDataError, ValidationError

logger = logging.getLogger(__name__)

ORTHO_TOLERANCE = 1e-9
MIN_PAIRS = 8
W = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]])


class CameraIntrinsics(BaseModel):
    model_config = ConfigDict(frozen=True)

    fx: float = Field(gt=0.0)
    fy: float = Field(gt=0.0)
    cx: float
    cy: float

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def normalize(self, pts):
        """Pixel coordinates (N, 2) to normalized image coordinates"""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        return np.column_stack([(pts[:, 0] - self.cx) / self.fx, (pts[:, 1] - self.cy) / self.fy])

    def project(self, points_cam):
        """Pinhole projection of camera-frame points (N, 3) to pixels"""
        points_cam = np.asarray(points_cam, dtype=np.float64).reshape(-1, 3)
        z = points_cam[:, 2]
        return np.column_stack([self.fx * points_cam[:, 0] / z + self.cx, self.fy * points_cam[:, 1] / z + self.cy])


def skew(v):
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def orthonormalize(R):
    """Closest rotation matrix in the Frobenius sense"""
    U, _, Vt = np.linalg.svd(R)
    Rn = U @ Vt
    if np.linalg.det(Rn) < 0:
        U[:, -1] *= -1
        Rn = U @ Vt
    return Rn


def rotation_error(R):
    return max(float(np.abs(R.T @ R - np.eye(3)).max()), abs(float(np.linalg.det(R)) - 1.0))


@dataclass(frozen=True)
class PoseSE3:
    """Rigid transform x -> R x + t"""

    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.R, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.t, dtype=np.float64).reshape(3)
        if rotation_error(R) > ORTHO_TOLERANCE:
            raise ValidationError(f"rotation is not orthonormal (error {rotation_error(R):.3g})")
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "t", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @classmethod
    def from_matrix(cls, M, tolerance=ORTHO_TOLERANCE):
        """Build from a 3x4 [R | t]; rotations within tolerance are re-orthonormalized"""
        M = np.asarray(M, dtype=np.float64).reshape(3, 4)
        R = M[:, :3]
        err = rotation_error(R)
        if err > tolerance:
            raise ValidationError(f"rotation is not orthonormal (error {err:.3g})")
        return cls(orthonormalize(R) if err > ORTHO_TOLERANCE else R, M[:, 3])

    def matrix(self):
        return np.column_stack([self.R, self.t])

    def inverse(self):
        return PoseSE3(self.R.T, -self.R.T @ self.t)

    def compose(self, other):
        """self after other: x -> self(other(x))"""
        R = self.R @ other.R
        if rotation_error(R) > ORTHO_TOLERANCE:
            R = orthonormalize(R)
        return PoseSE3(R, self.R @ other.t + self.t)

    def apply(self, points):
        return np.asarray(points, dtype=np.float64) @ self.R.T + self.t


@dataclass(frozen=True)
class EssentialMatrix:
    E: np.ndarray

    @classmethod
    def enforced(cls, E):
        """Project onto the essential manifold: singular values (1, 1, 0)"""
        U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
        return cls(U @ np.diag([1.0, 1.0, 0.0]) @ Vt)


def essential_from_pose(R, t):
    return skew(np.asarray(t, dtype=np.float64)) @ np.asarray(R, dtype=np.float64)


class RansacConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    iterations: int = Field(500, ge=1)
    threshold: float = Field(1e-3, gt=0.0)
    min_inlier_ratio: float = Field(0.3, ge=0.0, le=1.0)
    min_support: float = Field(0.5, ge=0.0, le=1.0)
    min_parallax: float = Field(1e-4, ge=0.0)


class EssentialResult(NamedTuple):
    essential: EssentialMatrix
    inliers: np.ndarray
    degenerate: bool


class PoseResult(NamedTuple):
    pose: PoseSE3
    cheirality_failed: bool
    support: float
    parallax: float


def hartley_normalization(pts):
    """Similarity taking pts to zero mean and mean distance sqrt(2)"""
    centroid = pts.mean(axis=0)
    dist = np.linalg.norm(pts - centroid, axis=1).mean()
    s = np.sqrt(2.0) / dist if dist > 0 else 1.0
    T = np.array([[s, 0.0, -s * centroid[0]], [0.0, s, -s * centroid[1]], [0.0, 0.0, 1.0]])
    return T


def _homogeneous(pts):
    return np.column_stack([pts, np.ones(len(pts))])


def _design_matrix(h1, h2):
    """Rows of the linear epipolar constraint; works on (..., N, 3) arrays"""
    return np.stack([
        h2[..., 0] * h1[..., 0], h2[..., 0] * h1[..., 1], h2[..., 0],
        h2[..., 1] * h1[..., 0], h2[..., 1] * h1[..., 1], h2[..., 1],
        h1[..., 0], h1[..., 1], np.ones(h1.shape[:-1]),
    ], axis=-1)


def _rank2(E):
    U, S, Vt = np.linalg.svd(E)
    S = S.copy()
    S[..., 2] = 0.0
    S[..., 0] = S[..., 1] = 0.5 * (S[..., 0] + S[..., 1])
    return U @ (S[..., :, None] * Vt)


def eight_point(x1, x2):
    """
    Hartley-normalized eight-point estimate from normalized coordinates

    Args:
        x1, x2 (np.ndarray): (N, 2) normalized image coordinates, N >= 8

    Returns:
        EssentialMatrix: with singular values (1, 1, 0)
    """
    if len(x1) < MIN_PAIRS:
        raise InsufficientDataError(f"eight-point needs at least {MIN_PAIRS} pairs, got {len(x1)}")
    T1 = hartley_normalization(x1)
    T2 = hartley_normalization(x2)
    h1 = _homogeneous(x1) @ T1.T
    h2 = _homogeneous(x2) @ T2.T
    _, _, Vt = np.linalg.svd(_design_matrix(h1, h2))
    En = _rank2(Vt[-1].reshape(3, 3))
    return EssentialMatrix.enforced(T2.T @ En @ T1)


def sampson_distance(E, x1, x2):
    """Squared first-order geometric error; E may be (3, 3) or a (M, 3, 3) stack"""
    h1 = _homogeneous(x1)
    h2 = _homogeneous(x2)
    Ex1 = h1 @ np.swapaxes(E, -1, -2)
    Etx2 = h2 @ E
    num = np.sum(h2 * Ex1, axis=-1) ** 2
    den = Ex1[..., 0] ** 2 + Ex1[..., 1] ** 2 + Etx2[..., 0] ** 2 + Etx2[..., 1] ** 2
    return num / np.maximum(den, 1e-300)


def estimate_essential_ransac(pts1, pts2, K, rng, cfg=None):
    """
    Robust essential matrix from pixel correspondences

    Fixed-iteration RANSAC over minimal eight-point samples (no adaptive
    stopping), then a refit on all inliers of the best sample.

    Args:
        pts1, pts2 (np.ndarray): (N, 2) pixel positions in frames 1 and 2
        K (CameraIntrinsics): intrinsics of both frames
        rng (np.random.Generator): sample selection
        cfg (RansacConfig): iterations and Sampson threshold

    Returns:
        EssentialResult: (essential, inlier mask, degenerate flag)
    """
    cfg = cfg or RansacConfig()
    n = len(pts1)
    if n < MIN_PAIRS:
        raise InsufficientDataError(f"need at least {MIN_PAIRS} pairs, got {n}")
    if len(pts2) != n:
        raise DomainError("correspondence arrays differ in length")
    x1 = K.normalize(pts1)
    x2 = K.normalize(pts2)

    T1 = hartley_normalization(x1)
    T2 = hartley_normalization(x2)
    h1 = _homogeneous(x1) @ T1.T
    h2 = _homogeneous(x2) @ T2.T
    samples = np.stack([rng.choice(n, MIN_PAIRS, replace=False) for _ in range(cfg.iterations)])
    A = _design_matrix(h1[samples], h2[samples])
    _, _, Vt = np.linalg.svd(A)
    candidates = T2.T @ _rank2(Vt[:, -1].reshape(-1, 3, 3)) @ T1
    dist = sampson_distance(candidates, x1, x2)
    counts = (dist < cfg.threshold).sum(axis=1)
    best = int(np.argmax(counts))
    inliers = dist[best] < cfg.threshold
    essential = EssentialMatrix.enforced(candidates[best])

    if inliers.sum() >= MIN_PAIRS:
        refit = eight_point(x1[inliers], x2[inliers])
        refit_inliers = sampson_distance(refit.E, x1, x2) < cfg.threshold
        if refit_inliers.sum() >= MIN_PAIRS:
            essential, inliers = refit, refit_inliers

    ratio = inliers.sum() / n
    degenerate = bool(ratio < cfg.min_inlier_ratio)
    if degenerate:
        logger.debug("RANSAC inlier ratio %.2f below %.2f", ratio, cfg.min_inlier_ratio)
    return EssentialResult(essential, inliers, degenerate)


def triangulate(R, t, x1, x2):
    """
    Linear (DLT) triangulation in camera-1 coordinates

    Returns:
        np.ndarray: (N, 4) homogeneous points
    """
    P1 = np.hstack([np.eye(3), np.zeros((3, 1))])
    P2 = np.hstack([R, np.reshape(t, (3, 1))])
    A = np.stack([
        x1[:, 0:1] * P1[2] - P1[0],
        x1[:, 1:2] * P1[2] - P1[1],
        x2[:, 0:1] * P2[2] - P2[0],
        x2[:, 1:2] * P2[2] - P2[1],
    ], axis=1)
    _, _, Vt = np.linalg.svd(A)
    return Vt[:, -1, :]


def _positive_depth(R, t, x1, x2):
    X = triangulate(R, t, x1, x2)
    w = X[:, 3]
    finite = np.abs(w) > 1e-12
    Xe = X[:, :3] / np.where(finite, w, 1.0)[:, None]
    z1 = Xe[:, 2]
    z2 = Xe @ R[2] + t[2]
    return finite & (z1 > 0) & (z2 > 0)


def median_parallax(R, x1, x2):
    """Median angle between matched bearings after removing the rotation"""
    b1 = _homogeneous(x1)
    b2 = _homogeneous(x2) @ R
    b1 /= np.linalg.norm(b1, axis=1, keepdims=True)
    b2 /= np.linalg.norm(b2, axis=1, keepdims=True)
    cos = np.clip(np.sum(b1 * b2, axis=1), -1.0, 1.0)
    return float(np.median(np.arccos(cos)))


def pose_candidates(E):
    U, _, Vt = np.linalg.svd(np.asarray(E, dtype=np.float64))
    if np.linalg.det(U) < 0:
        U = -U
    if np.linalg.det(Vt) < 0:
        Vt = -Vt
    R1 = U @ W @ Vt
    R2 = U @ W.T @ Vt
    t = U[:, 2]
    return [(R1, t), (R1, -t), (R2, t), (R2, -t)]


def decompose_essential(essential, pts1, pts2, K, inliers=None, cfg=None):
    """
    Pick the (R, t) decomposition with most points in front of both cameras

    Args:
        essential (EssentialMatrix): estimate from estimate_essential_ransac
        pts1, pts2 (np.ndarray): (N, 2) pixel correspondences
        K (CameraIntrinsics): intrinsics
        inliers (np.ndarray, optional): mask selecting the pairs to use
        cfg (RansacConfig): support and parallax limits

    Returns:
        PoseResult: pose with unit-norm t and the cheirality-failure flag, set
        when under min_support of the pairs agree or the median parallax is
        below min_parallax (no usable translation)
    """
    cfg = cfg or RansacConfig()
    x1 = K.normalize(pts1)
    x2 = K.normalize(pts2)
    if inliers is not None:
        x1, x2 = x1[inliers], x2[inliers]
    if len(x1) < 1:
        raise InsufficientDataError("decomposition needs at least one inlier pair")

    best_count, best = -1, None
    for R, t in pose_candidates(essential.E):
        count = int(_positive_depth(R, t, x1, x2).sum())
        if count > best_count:
            best_count, best = count, (R, t)
    R, t = best
    R = orthonormalize(R)
    t = t / np.linalg.norm(t)
    support = best_count / len(x1)
    parallax = median_parallax(R, x1, x2)
    failed = support < cfg.min_support or parallax < cfg.min_parallax
    if failed:
        logger.debug("cheirality failure: support %.2f, parallax %.2e", support, parallax)
    return PoseResult(PoseSE3(R, t), bool(failed), float(support), parallax)


@dataclass(frozen=True)
class Trajectory:
    """Camera positions, one per frame, starting at the origin"""

    positions: np.ndarray

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(pos) and np.abs(pos[0]).max() > 1e-9:
            raise ValidationError(f"trajectory must start at the origin, got {pos[0]}")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)

    def __len__(self):
        return len(self.positions)

    def step_lengths(self):
        return np.linalg.norm(np.diff(self.positions, axis=0), axis=1)

    def path_length(self):
        return float(self.step_lengths().sum())
