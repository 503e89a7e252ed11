"""
Tests for the visual odometry pipeline and noise sweeps
"""
import numpy as np
import pandas as pd
import pytest

from microbench.errors import DomainError, InsufficientDataError
from microbench.geometry import CameraIntrinsics, Trajectory
from microbench.imaging import GreyImage
from microbench.odometry import (
    SWEEP_COLUMNS,
    NoiseSpec,
    VoConfig,
    noise_sweep,
    noisy_frames,
    ratio_table,
    run_vo,
    trajectory_error,
)
from microbench.scenes import SceneSpec, bundled_scene, generate_scene
from microbench.slipd import SlipdModel

TINY = dict(n_frames=4, n_points=1500, width=128, height=128, segments=((0.3, 0.0),),
            intrinsics=CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0))


@pytest.fixture(scope="module")
def tiny_scene():
    return generate_scene(SceneSpec(**TINY), np.random.default_rng(0))


def test_error_of_identical_trajectories_is_zero():
    gt = Trajectory(np.array([[0.0, 0, 0], [1, 2, 3], [4, 5, 6]]))
    assert trajectory_error(gt, gt, "mse") == 0.0
    assert trajectory_error(gt, gt, "mee") == 0.0


def test_unit_offset():
    gt = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    est = gt + np.array([1.0, 0, 0])
    assert trajectory_error(est, gt, "mse") == pytest.approx(1.0)
    assert trajectory_error(est, gt, "mee") == pytest.approx(1.0)


def test_two_frame_hand_example():
    gt = np.zeros((2, 3))
    est = np.array([[0.0, 0, 0], [3, 4, 0]])
    assert trajectory_error(est, gt, "mse") == pytest.approx(12.5)
    assert trajectory_error(est, gt, "mee") == pytest.approx(2.5)


def test_length_mismatch():
    with pytest.raises(DomainError):
        trajectory_error(np.zeros((2, 3)), np.zeros((3, 3)))


def test_noise_spec_labels():
    assert NoiseSpec.parse("static:40") == NoiseSpec(kind="static", level=40.0)
    assert NoiseSpec(kind="walk", level=30).label() == "walk:30"
    assert NoiseSpec().label() == "none"


def test_walk_noise_starts_clean_and_stays_bounded():
    frames = [GreyImage.constant(16, 16, 128)] * 50
    sigmas = [s for _, s in noisy_frames(frames, NoiseSpec(kind="walk", level=3), np.random.default_rng(1))]
    assert sigmas[0] == 0.0
    assert all(0.0 <= s <= 3.0 for s in sigmas)
    assert all(abs(b - a) <= 1.0 for a, b in zip(sigmas, sigmas[1:]))


def test_static_noise_is_resampled_each_frame():
    frames = [GreyImage.constant(16, 16, 128)] * 2
    (a, _), (b, _) = noisy_frames(frames, NoiseSpec(kind="static", level=20), np.random.default_rng(2))
    assert a != b


def test_single_frame_is_rejected():
    frame = GreyImage.constant(64, 64, 0)
    with pytest.raises(InsufficientDataError):
        run_vo([frame], VoConfig(), Trajectory(np.zeros((1, 3))), TINY["intrinsics"], np.random.default_rng(0))


def test_stationary_sequence_stays_at_origin():
    scene = generate_scene(SceneSpec(**{**TINY, "segments": ((0.0, 0.0),)}), np.random.default_rng(3))
    result = run_vo(scene.frames, VoConfig(), scene.gt, scene.intrinsics, np.random.default_rng(4))
    np.testing.assert_array_equal(result.trajectory.positions, np.zeros((len(scene.frames), 3)))
    assert result.degenerate_frames == 0


def test_slipd_without_model_is_rejected(tiny_scene):
    with pytest.raises(DomainError):
        run_vo(tiny_scene.frames, VoConfig(detector="slipd"), tiny_scene.gt, tiny_scene.intrinsics,
               np.random.default_rng(0))


def test_slipd_threshold_state_uses_narrow_clamp():
    model = SlipdModel(score_threshold=2.5)
    state = VoConfig(detector="slipd", slipd=model).threshold_state()
    assert (state.threshold, state.lower, state.upper) == (2.5, 0.1, 10.0)


def test_run_is_deterministic_per_seed(tiny_scene):
    cfg = VoConfig(dynamic=True, noise=NoiseSpec(kind="static", level=10))
    runs = [run_vo(tiny_scene.frames, cfg, tiny_scene.gt, tiny_scene.intrinsics, np.random.default_rng(5))
            for _ in range(2)]
    np.testing.assert_array_equal(runs[0].trajectory.positions, runs[1].trajectory.positions)
    assert runs[0].keypoint_counts == runs[1].keypoint_counts
    assert len(runs[0].trajectory) == len(tiny_scene.frames)


def test_sweep_shape_and_job_independence(tiny_scene):
    noises = [NoiseSpec(kind="static", level=5), NoiseSpec(kind="static", level=20)]
    args = (tiny_scene.frames, tiny_scene.gt, tiny_scene.intrinsics, noises)
    serial = noise_sweep(*args, seeds=2, master_seed=9)
    parallel = noise_sweep(*args, seeds=2, master_seed=9, jobs=2)
    assert list(serial.columns) == SWEEP_COLUMNS
    assert len(serial) == 2 * 2 * 2
    pd.testing.assert_frame_equal(serial, parallel)


def test_ratio_table_divides_fixed_by_mean_dynamic():
    rows = pd.DataFrame([
        ("seq", "fast", 0, "static:40", 0, 4.0, 2.0, 0),
        ("seq", "fast", 0, "static:40", 1, 6.0, 3.0, 0),
        ("seq", "fast", 1, "static:40", 0, 1.0, 1.0, 0),
        ("seq", "fast", 1, "static:40", 1, 3.0, 1.0, 0),
    ], columns=SWEEP_COLUMNS)
    ratios = ratio_table(rows)
    assert ratios["ratio_mse"].tolist() == [2.0, 3.0]
    assert ratios["ratio_mee"].tolist() == [2.0, 3.0]


@pytest.mark.slow
def test_noiseless_bundled_run_tracks_ground_truth():
    scene = bundled_scene()
    result = run_vo(scene.frames, VoConfig(), scene.gt, scene.intrinsics, np.random.default_rng(0))
    assert trajectory_error(result.trajectory, scene.gt, "mee") < 0.01 * scene.gt.path_length()


def test_bundled_spec_looks_sideways():
    scene = bundled_scene(frames=3, points=200)
    travel = scene.gt.positions[-1] / np.linalg.norm(scene.gt.positions[-1])
    assert abs(travel[2]) < 1e-9
    assert scene.spec.look == 90.0


@pytest.fixture(scope="module")
def bundled_sweep():
    scene = bundled_scene()
    noises = [NoiseSpec(kind="static", level=5), NoiseSpec(kind="static", level=40)]
    rows = noise_sweep(scene.frames, scene.gt, scene.intrinsics, noises, seeds=10, master_seed=0, jobs=4)
    return ratio_table(rows).groupby("noise")[["ratio_mse", "ratio_mee"]].mean()


@pytest.mark.slow
def test_dynamic_threshold_wins_under_heavy_noise(bundled_sweep):
    heavy, light = bundled_sweep.loc["static:40"], bundled_sweep.loc["static:5"]
    assert heavy["ratio_mse"] > 1.0
    assert heavy["ratio_mee"] > 1.0
    assert light["ratio_mse"] >= 0.8
    assert light["ratio_mee"] >= 0.8
    assert heavy["ratio_mse"] > light["ratio_mse"]


@pytest.mark.slow
def test_dynamic_threshold_keeps_counts_in_range():
    scene = bundled_scene()
    noise = NoiseSpec(kind="static", level=40)
    fractions = {}
    for dynamic in (False, True):
        result = run_vo(scene.frames, VoConfig(dynamic=dynamic, noise=noise), scene.gt, scene.intrinsics,
                        np.random.default_rng(0))
        counts = np.array(result.keypoint_counts[10:])
        fractions[dynamic] = np.mean((counts >= 1000) & (counts <= 2000))
    assert fractions[True] >= 0.8
    assert fractions[False] < fractions[True]
