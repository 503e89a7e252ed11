"""
Leaky Sparse Linear Interest Point Detector (Leaky-SLIPD)

A detector score is sum_i leakyrelu(w_i * x_i) over the n x n block around a
pixel. Weights are trained so that the two observations of one 3-D point score
the same, with an L1 penalty and a KL penalty pulling batch scores towards a
standard normal. The exported mask is sparse (target_k nonzeros) and unit norm.
"""
import logging
import math
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from tqdm import tqdm

from microbench.errors import DegenerateInputError, DomainError, TrainingDivergedError
from microbench.features import BORDER, non_max_suppression

logger = logging.getLogger(__name__)

VAR_EPSILON = 1e-12
NMS_RADIUS = 3


class SlipdModel(BaseModel):
    model_config = ConfigDict(frozen=True, populate_by_name=True)

    block: int = Field(5, ge=1)
    weights: tuple[float, ...] = ()
    leaky_slope: float = 0.01
    lam: float = Field(1e-3, ge=0.0, alias="lambda")
    kl_weight: float = Field(0.1, ge=0.0)
    target_k: int = Field(8, ge=1)
    score_threshold: float = Field(2.0, gt=0.0)
    learning_rate: float = Field(1e-2, gt=0.0)
    batch_size: int = Field(256, ge=1)
    train_losses: tuple[float, ...] = Field((), exclude=True)

    @field_validator("block")
    @classmethod
    def _odd_block(cls, v):
        if v % 2 != 1:
            raise ValueError(f"block size must be odd, got {v}")
        return v

    @model_validator(mode="before")
    @classmethod
    def _fill_weights(cls, data):
        if isinstance(data, dict) and not data.get("weights"):
            block = data.get("block", 5)
            data = {**data, "weights": (0.0,) * (block * block)}
        return data

    @model_validator(mode="after")
    def _check_weights(self):
        n2 = self.block * self.block
        if len(self.weights) != n2:
            raise ValueError(f"expected {n2} weights, got {len(self.weights)}")
        return self

    @property
    def w(self):
        return np.array(self.weights, dtype=np.float64)

    def with_weights(self, w):
        return self.model_copy(update={"weights": tuple(float(v) for v in w)})


class CorrespondencePair(NamedTuple):
    """Normalized n*n patches of one 3-D point seen in two images"""

    x1: np.ndarray
    x2: np.ndarray


class SlipdLoss(NamedTuple):
    loss: float
    grad: np.ndarray
    kl_clamped: bool


def leaky_relu(z, slope):
    return np.where(z >= 0, z, slope * z)


def leaky_relu_grad(z, slope):
    return np.where(z >= 0, 1.0, slope)


def patch_scores(w, patches, slope):
    """Scores and per-weight derivatives for a (N, n*n) patch matrix"""
    z = patches * w[None, :]
    return leaky_relu(z, slope).sum(axis=1), leaky_relu_grad(z, slope) * patches


def slipd_score_map(model, img):
    """
    Detector response at every interior pixel

    Returns:
        np.ndarray: (height, width) map; pixels closer than block//2 to the
        border hold 0
    """
    n = model.block
    half = n // 2
    if img.width <= n or img.height <= n:
        raise DomainError(f"image {img.width}x{img.height} is not larger than block {n}")
    values = img.normalized()
    h, w = values.shape
    out = np.zeros_like(values)
    interior = out[half:h - half, half:w - half]
    for i, wi in enumerate(model.w):
        if wi == 0.0:
            continue
        dy, dx = divmod(i, n)
        shifted = values[dy:h - n + 1 + dy, dx:w - n + 1 + dx]
        interior += leaky_relu(wi * shifted, model.leaky_slope)
    return out


def _stack(batch):
    x1 = np.stack([np.asarray(p.x1, dtype=np.float64).ravel() for p in batch])
    x2 = np.stack([np.asarray(p.x2, dtype=np.float64).ravel() for p in batch])
    return x1, x2


def slipd_loss(model, batch, w=None):
    """
    Training objective and its exact gradient in w

    loss = lam*|w|_1 + mean_i (f(w*x1_i) - f(w*x2_i))^2
           + beta * KL(N(mu, var) || N(0, 1))

    mu and var are the population moments of all 2N scores in the batch. When
    var drops below 1e-12 it is clamped (and treated as constant for the
    gradient) and kl_clamped is set.

    Args:
        model (SlipdModel): hyperparameters (and weights unless w is given)
        batch (list[CorrespondencePair]): non-empty batch
        w (np.ndarray, optional): weights overriding model.w

    Returns:
        SlipdLoss: (loss, grad, kl_clamped)
    """
    if not batch:
        raise DomainError("batch must not be empty")
    w = model.w if w is None else np.asarray(w, dtype=np.float64)
    x1, x2 = _stack(batch)
    if x1.shape[1] != w.size:
        raise DomainError(f"patches have {x1.shape[1]} entries, model expects {w.size}")
    n = x1.shape[0]
    s1, ds1 = patch_scores(w, x1, model.leaky_slope)
    s2, ds2 = patch_scores(w, x2, model.leaky_slope)

    diff = s1 - s2
    match = float(np.mean(diff ** 2))
    match_grad = (2.0 / n) * (diff[:, None] * (ds1 - ds2)).sum(axis=0)

    scores = np.concatenate([s1, s2])
    dscores = np.concatenate([ds1, ds2])
    mu = scores.mean()
    centered = scores - mu
    var = float(np.mean(centered ** 2))
    clamped = var < VAR_EPSILON
    dmu = dscores.mean(axis=0)
    if clamped:
        logger.warning("score variance %.3g below %.0e, clamping KL term", var, VAR_EPSILON)
        var = VAR_EPSILON
        dvar = np.zeros_like(w)
    else:
        dvar = (2.0 / scores.size) * (centered[:, None] * dscores).sum(axis=0)
    kl = 0.5 * (var + mu * mu - 1.0 - math.log(var))
    kl_grad = mu * dmu + 0.5 * (1.0 - 1.0 / var) * dvar

    l1 = model.lam * float(np.abs(w).sum())
    l1_grad = model.lam * np.sign(w)

    loss = l1 + match + model.kl_weight * kl
    grad = l1_grad + match_grad + model.kl_weight * kl_grad
    return SlipdLoss(float(loss), grad, clamped)


def slipd_project(w, k, unit):
    """
    Keep the k largest-magnitude weights and optionally rescale to unit norm

    Ties in magnitude keep the lower index.
    """
    if k < 1:
        raise DomainError(f"k must be at least 1, got {k}")
    w = np.asarray(w, dtype=np.float64)
    out = np.zeros_like(w)
    order = np.argsort(-np.abs(w), kind="stable")[:k]
    out[order] = w[order]
    if unit:
        norm = np.linalg.norm(out)
        if norm == 0.0:
            raise DegenerateInputError("cannot normalize an all-zero weight vector")
        out /= norm
    return out


def slipd_train(pairs, cfg=None, steps=1000, rng=None, init=None, progress=False):
    """
    Fit SLIPD weights with minibatch SGD

    The weights are renormalized to unit length after every step; the top-k
    projection is added during the final 10% of steps and at export.

    Args:
        pairs (list[CorrespondencePair]): training data
        cfg (SlipdModel): hyperparameters (weights ignored)
        steps (int): number of SGD steps
        rng (np.random.Generator): shuffling and initialization
        init (np.ndarray, optional): starting weights instead of a random draw
        progress (bool): show a progress bar

    Returns:
        SlipdModel: exported model with train_losses recorded per step
    """
    cfg = cfg or SlipdModel()
    rng = rng if rng is not None else np.random.default_rng(0)
    if steps < 1:
        raise DomainError(f"steps must be at least 1, got {steps}")
    if not pairs:
        raise DomainError("no training pairs")
    if len(pairs) < 1000:
        logger.warning("training SLIPD on only %d pairs", len(pairs))
    n2 = cfg.block * cfg.block
    w = rng.normal(size=n2) if init is None else np.asarray(init, dtype=np.float64).copy()
    w = slipd_project(w, n2, unit=True)

    sparse_from = steps - max(1, int(math.ceil(0.1 * steps)))
    batch_size = min(cfg.batch_size, len(pairs))
    order = rng.permutation(len(pairs))
    cursor = 0
    losses = []
    for step in tqdm(range(steps), desc="slipd", disable=not progress):
        if cursor + batch_size > len(order):
            order = rng.permutation(len(pairs))
            cursor = 0
        batch = [pairs[i] for i in order[cursor:cursor + batch_size]]
        cursor += batch_size
        loss, grad, _ = slipd_loss(cfg, batch, w=w)
        if not np.isfinite(loss) or not np.all(np.isfinite(grad)):
            raise TrainingDivergedError("non-finite SLIPD loss", step)
        losses.append(loss)
        w = w - cfg.learning_rate * grad
        k = cfg.target_k if step >= sparse_from else n2
        w = slipd_project(w, k, unit=True)
        if steps >= 10 and (step + 1) % (steps // 10) == 0:
            logger.info("slipd step %d/%d loss %.6f", step + 1, steps, loss)

    w = slipd_project(w, cfg.target_k, unit=True)
    return cfg.with_weights(w).model_copy(update={"train_losses": tuple(losses)})


def slipd_detect(model, img, tau=None):
    """
    Keypoints where |score| >= tau, thinned by the same NMS as FAST

    Keypoints respect the FAST border so both detectors are interchangeable.
    """
    tau = model.score_threshold if tau is None else tau
    if not tau > 0:
        raise DomainError(f"tau must be positive, got {tau}")
    scores = np.abs(slipd_score_map(model, img))
    margin = max(BORDER, model.block // 2)
    candidates = np.zeros_like(scores)
    h, w = scores.shape
    inner = scores[margin:h - margin, margin:w - margin]
    candidates[margin:h - margin, margin:w - margin] = np.where(inner >= tau, inner, 0.0)
    return non_max_suppression(candidates, NMS_RADIUS)


def save_model(model, path):
    """Write the model as a line-oriented text manifest"""
    n = model.block
    w = model.w.reshape(n, n)
    lines = [
        "# slipd model",
        f"block {n}",
        f"slope {model.leaky_slope:.17g}",
        f"lambda {model.lam:.17g}",
        f"kl_weight {model.kl_weight:.17g}",
        f"target_k {model.target_k}",
        f"tau {model.score_threshold:.17g}",
        "weights",
    ]
    lines += [" ".join(f"{v:.17g}" for v in row) for row in w]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")


def load_model(path):
    """Read a manifest written by save_model"""
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.strip() for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    header = {}
    idx = 0
    while idx < len(lines) and lines[idx] != "weights":
        key, _, value = lines[idx].partition(" ")
        header[key] = value.strip()
        idx += 1
    if idx == len(lines) or "block" not in header:
        raise DomainError(f"{path}: missing block or weights section")
    n = int(header["block"])
    rows = lines[idx + 1:idx + 1 + n]
    weights = [float(v) for row in rows for v in row.split()]
    if len(weights) != n * n:
        raise DomainError(f"{path}: expected {n * n} weights, found {len(weights)}")
    return SlipdModel(
        block=n,
        weights=tuple(weights),
        leaky_slope=float(header.get("slope", 0.01)),
        lam=float(header.get("lambda", 1e-3)),
        kl_weight=float(header.get("kl_weight", 0.1)),
        target_k=int(header.get("target_k", 8)),
        score_threshold=float(header.get("tau", 2.0)),
    )
