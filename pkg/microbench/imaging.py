"""
Greyscale images, binary PGM I/O and the two sensor-noise processes

KITTI frames are PNG; convert them offline to the native format, e.g.
``for f in *.png; do convert "$f" -colorspace Gray "${f%.png}.pgm"; done``.
"""
import logging
import os
from dataclasses import dataclass, replace

import numpy as np

from microbench.errors import DomainError, PgmFormatError

logger = logging.getLogger(__name__)

PGM_MAGIC = b"P5"
WALK_SHIFTS = np.array([-1, 0, 1])


@dataclass(frozen=True)
class GreyImage:
    """8-bit single-channel raster stored row-major as a (height, width) uint8 array"""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
            raise DomainError(f"image data must be a non-empty 2-D array, got shape {arr.shape}")
        if arr.dtype != np.uint8:
            if np.any(arr < 0) or np.any(arr > 255):
                raise DomainError("pixel values must lie in [0, 255]")
            arr = arr.astype(np.uint8)
        arr = np.ascontiguousarray(arr)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def height(self):
        return self.data.shape[0]

    @classmethod
    def constant(cls, width, height, value):
        return cls(np.full((height, width), value, dtype=np.uint8))

    def normalized(self):
        """Intensities as float64 in [0, 1]"""
        return self.data.astype(np.float64) / 255.0

    def __eq__(self, other):
        return isinstance(other, GreyImage) and np.array_equal(self.data, other.data)

    __hash__ = None


def _read_token(buf, pos):
    """Read one whitespace-delimited header token, skipping '#' comments"""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise PgmFormatError("unexpected end of header", start)
    return buf[start:pos], start, pos


def parse_pgm(buf):
    """
    Decode binary PGM bytes

    Args:
        buf (bytes): file contents

    Returns:
        GreyImage: decoded image
    """
    if buf[:2] != PGM_MAGIC:
        raise PgmFormatError(f"unsupported magic {buf[:2]!r}, expected b'P5'", 0)
    pos = 2
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PgmFormatError("missing whitespace after magic", pos)
    fields = []
    for name in ("width", "height", "maxval"):
        token, start, pos = _read_token(buf, pos)
        if not token.isdigit():
            raise PgmFormatError(f"{name} is not a positive integer: {token!r}", start)
        fields.append((int(token), start))
    (width, w_off), (height, h_off), (maxval, m_off) = fields
    if width < 1:
        raise PgmFormatError("width must be positive", w_off)
    if height < 1:
        raise PgmFormatError("height must be positive", h_off)
    if maxval != 255:
        raise PgmFormatError(f"maxval {maxval} unsupported, expected 255", m_off)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise PgmFormatError("missing whitespace before pixel data", pos)
    pos += 1
    expected = width * height
    payload = buf[pos:pos + expected]
    if len(payload) < expected:
        raise PgmFormatError(f"truncated payload: {len(payload)} of {expected} bytes", pos + len(payload))
    data = np.frombuffer(payload, dtype=np.uint8).reshape(height, width)
    return GreyImage(data.copy())


def load_pgm(path):
    """Load a binary (P5, maxval 255) PGM file"""
    with open(path, "rb") as f:
        buf = f.read()
    return parse_pgm(buf)


def encode_pgm(img):
    header = f"P5\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.data.tobytes()


def save_pgm(img, path):
    """Write img as P5 with a minimal header followed by width*height bytes"""
    try:
        with open(path, "wb") as f:
            f.write(encode_pgm(img))
    except OSError as e:
        raise OSError(f"could not write PGM to {path}: {e}") from e
    logger.debug("Wrote %dx%d PGM to %s", img.width, img.height, os.fspath(path))


def round_half_away(values):
    return np.sign(values) * np.floor(np.abs(values) + 0.5)


def add_gaussian_noise(img, sigma, rng):
    """
    Add i.i.d. N(0, sigma^2) noise to every pixel

    Args:
        img (GreyImage): input, left untouched
        sigma (float): standard deviation in intensity units
        rng (np.random.Generator): noise source

    Returns:
        GreyImage: clamp(round(p + n), 0, 255) per pixel
    """
    if not np.isfinite(sigma):
        raise DomainError(f"sigma must be finite, got {sigma}")
    if sigma < 0:
        raise DomainError(f"sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return img
    noise = rng.normal(0.0, sigma, size=img.data.shape)
    noisy = round_half_away(img.data.astype(np.float64) + noise)
    return GreyImage(np.clip(noisy, 0, 255).astype(np.uint8))


@dataclass(frozen=True)
class NoiseWalkState:
    """Random-walk noise level; sigma starts at 0 for a fresh sequence"""

    limit: float
    rng: np.random.Generator
    sigma: float = 0.0
    last_shift: int = 0

    def __post_init__(self):
        if not self.limit > 0:
            raise DomainError(f"walk limit must be positive, got {self.limit}")
        if not 0 <= self.sigma <= self.limit:
            raise DomainError(f"sigma {self.sigma} outside [0, {self.limit}]")


def advance_noise_walk(state):
    """Shift sigma by X uniform in {-1, 0, 1} and clamp to [0, limit]"""
    shift = int(state.rng.choice(WALK_SHIFTS))
    sigma = min(max(state.sigma + shift, 0.0), state.limit)
    return replace(state, sigma=sigma, last_shift=shift)
