"""
Tests for the sparse linear detector
"""
import numpy as np
import pytest

from microbench.errors import DegenerateInputError, DomainError
from microbench.geometry import CameraIntrinsics
from microbench.imaging import GreyImage
from microbench.odometry import NoiseSpec, VoConfig, noise_sweep
from microbench.scenes import SceneSpec, bundled_scene, generate_scene, mine_pairs
from microbench.slipd import (
    CorrespondencePair,
    SlipdModel,
    leaky_relu,
    load_model,
    save_model,
    slipd_detect,
    slipd_loss,
    slipd_project,
    slipd_score_map,
    slipd_train,
)


def random_pairs(rng, n=64, block=5):
    return [CorrespondencePair(rng.uniform(0.05, 1.0, block * block), rng.uniform(0.05, 1.0, block * block))
            for _ in range(n)]


@pytest.fixture(scope="module")
def scene_pairs():
    spec = SceneSpec(n_frames=6, n_points=1500, width=128, height=128,
                     intrinsics=CameraIntrinsics(fx=100.0, fy=100.0, cx=64.0, cy=64.0))
    scene = generate_scene(spec, np.random.default_rng(11))
    return mine_pairs(scene.correspondences, scene.frames, 5, 3000, np.random.default_rng(12))


def test_zero_weights_score_nothing():
    rng = np.random.default_rng(0)
    img = GreyImage(rng.integers(0, 256, size=(32, 32), dtype=np.uint8))
    model = SlipdModel()
    assert not slipd_score_map(model, img).any()
    assert slipd_detect(model, img, 0.5) == []


def test_single_weight_uses_leaky_slope():
    img = GreyImage.constant(4, 4, 51)
    positive = SlipdModel(block=1, weights=(1.0,))
    negative = SlipdModel(block=1, weights=(-1.0,))
    assert slipd_score_map(positive, img)[1, 1] == pytest.approx(0.2)
    assert slipd_score_map(negative, img)[1, 1] == pytest.approx(-0.002)


def test_score_map_matches_patch_sums():
    rng = np.random.default_rng(1)
    values = rng.integers(0, 256, size=(20, 24), dtype=np.uint8)
    model = SlipdModel(block=5).with_weights(rng.normal(size=25))
    scores = slipd_score_map(model, GreyImage(values))
    norm = values / 255.0
    for y in range(2, 18):
        for x in range(2, 22):
            patch = norm[y - 2:y + 3, x - 2:x + 3].ravel()
            assert scores[y, x] == pytest.approx(leaky_relu(model.w * patch, 0.01).sum())
    assert not scores[:2].any() and not scores[:, -2:].any()


def test_detection_is_monotone_in_tau():
    rng = np.random.default_rng(2)
    img = GreyImage(rng.integers(0, 256, size=(48, 48), dtype=np.uint8))
    model = SlipdModel(block=5).with_weights(slipd_project(rng.normal(size=25), 8, unit=True))
    assert len(slipd_detect(model, img, 1e-4)) >= len(slipd_detect(model, img, 0.5)) >= len(slipd_detect(model, img, 5))


def test_detect_thresholds_magnitude_then_suppresses():
    rng = np.random.default_rng(13)
    img = GreyImage(rng.integers(0, 256, size=(40, 40), dtype=np.uint8))
    model = SlipdModel(block=5).with_weights(slipd_project(rng.normal(size=25), 8, unit=True))
    tau = 0.3
    scores = np.abs(slipd_score_map(model, img))
    candidates = np.zeros_like(scores)
    candidates[3:37, 3:37] = np.where(scores[3:37, 3:37] >= tau, scores[3:37, 3:37], 0.0)
    expected = []
    for y in range(40):
        for x in range(40):
            s = candidates[y, x]
            window = [(ny, nx) for ny in range(max(0, y - 3), min(40, y + 4))
                      for nx in range(max(0, x - 3), min(40, x + 4)) if (ny, nx) != (y, x)]
            if s > 0 and all(s > candidates[q] if q < (y, x) else s >= candidates[q] for q in window):
                expected.append((x, y))
    detected = slipd_detect(model, img, tau)
    assert [(k.x, k.y) for k in detected] == expected
    assert all(k.score >= tau for k in detected)


def test_detect_rejects_non_positive_tau():
    with pytest.raises(DomainError):
        slipd_detect(SlipdModel(), GreyImage.constant(16, 16, 0), 0.0)


def test_identical_observations_leave_only_the_l1_term():
    rng = np.random.default_rng(3)
    patch = rng.uniform(size=25)
    batch = [CorrespondencePair(patch, patch.copy()) for _ in range(4)]
    w = np.zeros(25)
    w[0], w[1] = 1.5, -0.5
    model = SlipdModel(lam=1e-3, kl_weight=0.0)
    assert slipd_loss(model, batch, w=w).loss == pytest.approx(2e-3)


def test_constant_scores_clamp_the_kl_term():
    batch = [CorrespondencePair(np.zeros(25), np.zeros(25)) for _ in range(4)]
    w = np.full(25, 0.2)
    result = slipd_loss(SlipdModel(), batch, w=w)
    assert result.kl_clamped
    assert np.isfinite(result.loss)


def test_gradient_matches_finite_differences():
    rng = np.random.default_rng(4)
    model = SlipdModel(lam=1e-3, kl_weight=0.1)
    eps = 1e-6
    for _ in range(20):
        batch = random_pairs(rng, n=32)
        w = rng.normal(size=25)
        analytic = slipd_loss(model, batch, w=w).grad
        numeric = np.zeros(25)
        for i in range(25):
            step = np.zeros(25)
            step[i] = eps
            numeric[i] = (slipd_loss(model, batch, w=w + step).loss - slipd_loss(model, batch, w=w - step).loss) / (2 * eps)
        rel = np.abs(analytic - numeric) / np.maximum(np.abs(analytic) + np.abs(numeric), 1e-6)
        assert rel.max() < 1e-4


def test_project_normalizes():
    w = np.zeros(25)
    w[:2] = (3.0, 4.0)
    out = slipd_project(w, 8, unit=True)
    np.testing.assert_allclose(out[:2], (0.6, 0.8))
    assert not out[2:].any()


def test_project_matches_sort_oracle():
    rng = np.random.default_rng(5)
    for _ in range(20):
        w = rng.normal(size=25)
        keep = sorted(range(25), key=lambda i: -abs(w[i]))[:8]
        expected = np.zeros(25)
        expected[keep] = w[keep]
        np.testing.assert_array_equal(slipd_project(w, 8, unit=False), expected)


def test_project_is_idempotent():
    w = slipd_project(np.random.default_rng(6).normal(size=25), 8, unit=True)
    np.testing.assert_allclose(slipd_project(w, 8, unit=True), w)


def test_project_rejects_zero_vector():
    with pytest.raises(DegenerateInputError):
        slipd_project(np.zeros(25), 8, unit=True)


def test_block_must_be_odd():
    with pytest.raises(ValueError):
        SlipdModel(block=4)


def test_training_reduces_loss(scene_pairs):
    cfg = SlipdModel(target_k=25)
    init = np.random.default_rng(7).normal(size=25)
    before = slipd_loss(cfg, scene_pairs, w=slipd_project(init, 25, unit=True)).loss
    model = slipd_train(scene_pairs, cfg, steps=300, rng=np.random.default_rng(8), init=init)
    after = slipd_loss(model, scene_pairs).loss
    assert after < before


def test_exported_model_is_sparse_and_unit(scene_pairs):
    model = slipd_train(scene_pairs, SlipdModel(), steps=50, rng=np.random.default_rng(9))
    assert np.count_nonzero(model.w) <= 8
    assert np.linalg.norm(model.w) == pytest.approx(1.0, abs=1e-6)
    assert len(model.train_losses) == 50


def test_model_file_keeps_weights_and_hyperparameters(tmp_path):
    w = slipd_project(np.random.default_rng(10).normal(size=25), 8, unit=True)
    model = SlipdModel(lam=2e-3, target_k=8, score_threshold=1.5).with_weights(w)
    path = tmp_path / "model.txt"
    save_model(model, path)
    loaded = load_model(path)
    np.testing.assert_array_equal(loaded.w, model.w)
    assert (loaded.lam, loaded.target_k, loaded.score_threshold) == (2e-3, 8, 1.5)


def test_training_needs_pairs():
    with pytest.raises(DomainError):
        slipd_train([], SlipdModel(), steps=10)


@pytest.mark.slow
def test_trained_detector_tracks_as_well_as_fast():
    scene = bundled_scene()
    pairs = mine_pairs(scene.correspondences, scene.frames, 5, 20000, np.random.default_rng(14))
    model = slipd_train(pairs, SlipdModel(), steps=1000, rng=np.random.default_rng(15))
    rows = noise_sweep(scene.frames, scene.gt, scene.intrinsics, [NoiseSpec()], detectors=("fast", "slipd"),
                       seeds=10, master_seed=0, slipd_model=model, jobs=4, base=VoConfig(redetect=True))
    dynamic = rows[rows["dynamic"] == 1].groupby("detector")["mee"].mean()
    assert dynamic["slipd"] <= 1.25 * dynamic["fast"]
