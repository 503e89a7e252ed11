"""
MLP dynamics model predicting normalized state deltas, trained with
momentum SGD on mean-squared error
"""
import logging
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from microbench.errors import DomainError, InsufficientDataError, TrainingDivergedError
from microbench.locomotion.env import ACTION_DIM, STATE_DIM

logger = logging.getLogger(__name__)

MIN_TRAINING_POINTS = 32


class TrainConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    hidden: tuple[int, ...] = (64, 64)
    epochs: int = Field(100, ge=1)
    batch_size: int = Field(32, ge=1)
    learning_rate: float = Field(1e-2, gt=0.0)
    momentum: float = Field(0.9, ge=0.0, lt=1.0)


class Layer(NamedTuple):
    W: np.ndarray
    b: np.ndarray


def init_params(sizes, rng):
    """Glorot-uniform weights and zero biases for consecutive layer sizes"""
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(Layer(rng.uniform(-limit, limit, size=(fan_in, fan_out)), np.zeros(fan_out)))
    return params


def mlp_forward(params, X):
    """
    tanh hidden layers, linear output

    Returns:
        tuple: (outputs, activations per layer input) for backprop
    """
    activations = [X]
    h = X
    for i, layer in enumerate(params):
        z = h @ layer.W + layer.b
        h = z if i == len(params) - 1 else np.tanh(z)
        activations.append(h)
    return h, activations


def mlp_loss_and_grad(params, X, Y):
    """
    Mean-squared error over all outputs and its exact gradient

    Returns:
        tuple: (loss, list of Layer gradients)
    """
    out, activations = mlp_forward(params, X)
    err = out - Y
    loss = float(np.mean(err ** 2))
    delta = 2.0 * err / err.size
    grads = [None] * len(params)
    for i in range(len(params) - 1, -1, -1):
        h_in = activations[i]
        grads[i] = Layer(h_in.T @ delta, delta.sum(axis=0))
        if i > 0:
            delta = (delta @ params[i].W.T) * (1.0 - activations[i] ** 2)
    return loss, grads


def flatten(params):
    return np.concatenate([np.concatenate([layer.W.ravel(), layer.b]) for layer in params])


def unflatten(vector, like):
    out, offset = [], 0
    for layer in like:
        nw, nb = layer.W.size, layer.b.size
        W = vector[offset:offset + nw].reshape(layer.W.shape)
        b = vector[offset + nw:offset + nw + nb]
        out.append(Layer(W, b))
        offset += nw + nb
    return out


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    """Trained MLP plus the normalization it was trained under"""

    params: list
    input_mean: np.ndarray
    input_std: np.ndarray
    target_mean: np.ndarray
    target_std: np.ndarray
    seed: int

    @property
    def sizes(self):
        return [self.params[0].W.shape[0]] + [layer.W.shape[1] for layer in self.params]

    def predict_delta(self, states, actions):
        x = np.concatenate([np.asarray(states, dtype=np.float64), np.asarray(actions, dtype=np.float64)], axis=-1)
        lead = x.shape[:-1]
        xn = (x.reshape(-1, STATE_DIM + ACTION_DIM) - self.input_mean) / self.input_std
        out, _ = mlp_forward(self.params, xn)
        return (out * self.target_std + self.target_mean).reshape(*lead, STATE_DIM)

    def predict(self, states, actions):
        """Next states for (..., 6) states and (..., 4) actions"""
        return np.asarray(states, dtype=np.float64) + self.predict_delta(states, actions)


def normalized_mse(model, dataset, scale=None):
    """
    Prediction error of state deltas in normalized units

    Args:
        scale (np.ndarray, optional): per-dimension std used for normalizing;
            defaults to the dataset's own target std
    """
    scale = dataset.target_std if scale is None else scale
    pred = model.predict_delta(dataset.states, dataset.actions)
    return float(np.mean(((pred - dataset.deltas) / scale) ** 2))


def fit_mlp(X, Y, cfg, rng, progress=False):
    """
    Minibatch SGD with momentum on already normalized arrays

    Returns:
        tuple: (parameters, mean training loss of the final epoch)
    """
    params = init_params([X.shape[1], *cfg.hidden, Y.shape[1]], rng)
    velocity = [Layer(np.zeros_like(p.W), np.zeros_like(p.b)) for p in params]
    batch = min(cfg.batch_size, len(X))
    epoch_loss = float("nan")
    for epoch in tqdm(range(cfg.epochs), desc="dynamics", disable=not progress):
        order = rng.permutation(len(X))
        total = 0.0
        for start in range(0, len(X), batch):
            idx = order[start:start + batch]
            loss, grads = mlp_loss_and_grad(params, X[idx], Y[idx])
            if not np.isfinite(loss):
                raise TrainingDivergedError("non-finite dynamics loss", epoch)
            velocity = [Layer(cfg.momentum * v.W - cfg.learning_rate * g.W,
                              cfg.momentum * v.b - cfg.learning_rate * g.b)
                        for v, g in zip(velocity, grads)]
            params = [Layer(p.W + v.W, p.b + v.b) for p, v in zip(params, velocity)]
            total += loss * len(idx)
        epoch_loss = total / len(X)
        if cfg.epochs >= 10 and (epoch + 1) % (cfg.epochs // 10) == 0:
            logger.debug("epoch %d/%d train mse %.6f", epoch + 1, cfg.epochs, epoch_loss)
    return params, epoch_loss


def train_dynamics(dataset, val, seed=0, cfg=None, progress=False):
    """
    Fit a dynamics model on a transition dataset

    Inputs and targets are standardized with the training set's statistics;
    minibatch SGD with momentum runs for a fixed number of epochs.

    Args:
        dataset (TransitionDataset): at least 32 transitions
        val (TransitionDataset): held-out set; its own target std defines the
            units of the returned error so runs on different data compare
        seed (int): initialization and shuffling
        cfg (TrainConfig): optimizer settings

    Returns:
        tuple: (DynamicsModel, validation MSE)
    """
    cfg = cfg or TrainConfig()
    if len(dataset) < MIN_TRAINING_POINTS:
        raise InsufficientDataError(f"need at least {MIN_TRAINING_POINTS} transitions, got {len(dataset)}")
    if len(val) == 0:
        raise DomainError("validation set is empty")
    rng = np.random.Generator(np.random.PCG64(seed))
    X = (dataset.inputs - dataset.input_mean) / dataset.input_std
    Y = (dataset.deltas - dataset.target_mean) / dataset.target_std
    params, _ = fit_mlp(X, Y, cfg, rng, progress)
    model = DynamicsModel(params, dataset.input_mean, dataset.input_std,
                          dataset.target_mean, dataset.target_std, seed)
    val_mse = normalized_mse(model, val, val.target_std)
    logger.info("Trained dynamics on %d transitions: val mse %.6f", len(dataset), val_mse)
    return model, val_mse
