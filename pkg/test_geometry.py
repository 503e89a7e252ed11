"""
Tests for two-view geometry and poses
"""
import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from microbench.errors import InsufficientDataError, ValidationError
from microbench.geometry import (
    CameraIntrinsics,
    EssentialMatrix,
    PoseSE3,
    RansacConfig,
    Trajectory,
    decompose_essential,
    eight_point,
    essential_from_pose,
    estimate_essential_ransac,
    hartley_normalization,
)

K = CameraIntrinsics(fx=100.0, fy=100.0, cx=128.0, cy=128.0)


def two_views(rng, n=100, rotvec=(0.02, -0.05, 0.01), t=(0.3, -0.1, 1.0)):
    """Pixel correspondences of random points seen before and after x -> R x + t"""
    R = Rotation.from_rotvec(rotvec).as_matrix()
    t = np.asarray(t, dtype=np.float64)
    X1 = np.column_stack([rng.uniform(-3, 3, n), rng.uniform(-3, 3, n), rng.uniform(5, 12, n)])
    X2 = X1 @ R.T + t
    return K.project(X1), K.project(X2), R, t


def unit(E):
    return E / np.linalg.norm(E)


def test_eight_point_recovers_known_essential():
    pts1, pts2, R, t = two_views(np.random.default_rng(0))
    E = eight_point(K.normalize(pts1), K.normalize(pts2)).E
    expected = unit(essential_from_pose(R, t))
    assert min(np.linalg.norm(unit(E) - expected), np.linalg.norm(unit(E) + expected)) < 1e-6


def test_estimate_has_essential_singular_values():
    pts1, pts2, _, _ = two_views(np.random.default_rng(1))
    s = np.linalg.svd(eight_point(K.normalize(pts1), K.normalize(pts2)).E, compute_uv=False)
    np.testing.assert_allclose(s, (1.0, 1.0, 0.0), atol=1e-9)


def test_hartley_normalization_centers_and_scales():
    pts = np.random.default_rng(2).uniform(-5, 9, size=(40, 2))
    T = hartley_normalization(pts)
    h = np.column_stack([pts, np.ones(40)]) @ T.T
    np.testing.assert_allclose(h[:, :2].mean(axis=0), 0.0, atol=1e-12)
    assert np.linalg.norm(h[:, :2], axis=1).mean() == pytest.approx(np.sqrt(2))


def test_seven_pairs_are_not_enough():
    pts1, pts2, _, _ = two_views(np.random.default_rng(3), n=7)
    with pytest.raises(InsufficientDataError):
        estimate_essential_ransac(pts1, pts2, K, np.random.default_rng(0))
    with pytest.raises(InsufficientDataError):
        eight_point(K.normalize(pts1), K.normalize(pts2))


def test_ransac_recovers_inliers_under_heavy_outliers():
    rng = np.random.default_rng(4)
    pts1, pts2, _, _ = two_views(rng, n=200)
    outliers = rng.permutation(200)[:120]
    pts2 = pts2.copy()
    pts2[outliers] = rng.uniform(0, 256, size=(120, 2))
    truth = np.ones(200, dtype=bool)
    truth[outliers] = False
    result = estimate_essential_ransac(pts1, pts2, K, np.random.default_rng(5), RansacConfig(iterations=20000))
    assert not result.degenerate
    assert (result.inliers & truth).sum() >= 0.95 * truth.sum()


def test_decomposition_recovers_pose():
    pts1, pts2, R, t = two_views(np.random.default_rng(6))
    E = EssentialMatrix.enforced(essential_from_pose(R, t))
    result = decompose_essential(E, pts1, pts2, K)
    assert not result.cheirality_failed
    angle = Rotation.from_matrix(result.pose.R @ R.T).magnitude()
    assert angle < 1e-6
    cos = np.clip(result.pose.t @ (t / np.linalg.norm(t)), -1.0, 1.0)
    assert np.arccos(cos) < 1e-6
    assert np.linalg.norm(result.pose.t) == pytest.approx(1.0)


def test_pure_rotation_fails_cheirality():
    rng = np.random.default_rng(7)
    pts1, pts2, _, _ = two_views(rng, rotvec=(0.0, 0.05, 0.0), t=(0.0, 0.0, 0.0))
    pts2 = pts2 + rng.normal(scale=1e-4, size=pts2.shape)
    E = eight_point(K.normalize(pts1), K.normalize(pts2))
    assert decompose_essential(E, pts1, pts2, K).cheirality_failed


def test_pose_inverse_and_compose():
    pose = PoseSE3(Rotation.from_rotvec((0.1, 0.2, -0.3)).as_matrix(), np.array([1.0, -2.0, 0.5]))
    ident = pose.compose(pose.inverse())
    np.testing.assert_allclose(ident.R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(ident.t, 0.0, atol=1e-12)
    pts = np.random.default_rng(8).normal(size=(5, 3))
    np.testing.assert_allclose(pose.inverse().apply(pose.apply(pts)), pts, atol=1e-12)


def test_non_orthonormal_rotation_is_rejected():
    with pytest.raises(ValidationError):
        PoseSE3(np.diag([1.0, 1.0, 1.1]), np.zeros(3))
    with pytest.raises(ValidationError):
        PoseSE3.from_matrix(np.column_stack([np.diag([1.0, 1.0, 1.01]), np.zeros(3)]), tolerance=1e-4)


def test_trajectory_starts_at_origin():
    with pytest.raises(ValidationError):
        Trajectory(np.array([[1.0, 0.0, 0.0], [2.0, 0.0, 0.0]]))
    traj = Trajectory(np.array([[0.0, 0.0, 0.0], [3.0, 4.0, 0.0], [3.0, 4.0, 1.0]]))
    np.testing.assert_allclose(traj.step_lengths(), (5.0, 1.0))
    assert traj.path_length() == pytest.approx(6.0)
