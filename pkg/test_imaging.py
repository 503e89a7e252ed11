"""
Tests for PGM I/O and the noise processes
"""
import numpy as np
import pytest

from microbench.errors import DomainError, PgmFormatError
from microbench.imaging import (
    GreyImage,
    NoiseWalkState,
    add_gaussian_noise,
    advance_noise_walk,
    encode_pgm,
    load_pgm,
    parse_pgm,
    save_pgm,
)


class FixedShift:
    """Generator stand-in whose choice() always returns one shift"""

    def __init__(self, shift):
        self.shift = shift

    def choice(self, values):
        return self.shift


def test_encode_writes_minimal_header():
    img = GreyImage(np.array([[0, 255], [128, 7]], dtype=np.uint8))
    assert encode_pgm(img) == b"P5\n2 2\n255\n" + bytes([0, 255, 128, 7])


def test_save_and_load(tmp_path):
    rng = np.random.default_rng(3)
    img = GreyImage(rng.integers(0, 256, size=(128, 128), dtype=np.uint8))
    path = tmp_path / "frame.pgm"
    save_pgm(img, path)
    assert load_pgm(path) == img


def test_single_pixel():
    img = parse_pgm(b"P5\n1 1\n255\n\x00")
    assert (img.width, img.height) == (1, 1)
    assert img.data[0, 0] == 0


def test_header_comments_are_skipped():
    img = parse_pgm(b"P5\n# made by hand\n2 1\n255\n\x01\x02")
    assert img.data.tolist() == [[1, 2]]


def test_ascii_pgm_is_rejected():
    with pytest.raises(PgmFormatError) as err:
        parse_pgm(b"P2\n1 1\n255\n0\n")
    assert err.value.offset == 0


def test_truncated_payload_reports_offset():
    with pytest.raises(PgmFormatError) as err:
        parse_pgm(b"P5\n2 2\n255\n\x00\x01")
    assert "truncated" in str(err.value)
    assert err.value.offset == len(b"P5\n2 2\n255\n") + 2


def test_maxval_other_than_255_is_rejected():
    with pytest.raises(PgmFormatError):
        parse_pgm(b"P5\n1 1\n65535\n\x00\x00")


def test_zero_sigma_is_identity():
    img = GreyImage.constant(16, 16, 90)
    assert add_gaussian_noise(img, 0.0, np.random.default_rng(0)) == img


def test_noise_std_at_mid_range():
    img = GreyImage.constant(128, 128, 128)
    out = add_gaussian_noise(img, 60.0, np.random.default_rng(1))
    residual = out.data.astype(np.float64) - 128
    assert 56 <= residual.std() <= 64


def test_noise_clamps_to_valid_range():
    out = add_gaussian_noise(GreyImage.constant(64, 64, 255), 80.0, np.random.default_rng(2))
    assert out.data.max() <= 255
    assert out.data.dtype == np.uint8


def test_negative_sigma_is_rejected():
    with pytest.raises(DomainError):
        add_gaussian_noise(GreyImage.constant(8, 8, 0), -1.0, np.random.default_rng(0))


def test_walk_clamps_at_zero():
    state = NoiseWalkState(limit=15.0, rng=FixedShift(-1))
    assert advance_noise_walk(state).sigma == 0.0


def test_walk_clamps_at_limit():
    state = NoiseWalkState(limit=15.0, rng=FixedShift(1), sigma=15.0)
    assert advance_noise_walk(state).sigma == 15.0


def test_walk_stays_in_bounds():
    state = NoiseWalkState(limit=5.0, rng=np.random.default_rng(4))
    for _ in range(500):
        state = advance_noise_walk(state)
        assert 0.0 <= state.sigma <= 5.0
