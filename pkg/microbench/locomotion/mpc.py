"""
Random-shooting model-predictive control
"""
import logging
from typing import NamedTuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from microbench.locomotion.env import ACTION_DIM, attitude_reward

logger = logging.getLogger(__name__)


class MpcConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    horizon: int = Field(10, ge=1)
    samples: int = Field(500, ge=1)
    discount: float = Field(1.0, gt=0.0, le=1.0)


class MpcPlan(NamedTuple):
    action: np.ndarray
    value: float
    returns: np.ndarray
    sequences: np.ndarray


def default_reward(states, actions):
    return attitude_reward(states)


def plan(model, s, cfg, rng, reward_fn=default_reward):
    """
    Score K uniformly sampled action sequences through the model

    Each sequence earns sum_t discount^t * reward_fn(predicted s_{t+1}, a_t).

    Args:
        model: object with predict(states (K, 6), actions (K, 4)) -> (K, 6)
        s (np.ndarray): current state
        cfg (MpcConfig): horizon, samples, discount
        rng (np.random.Generator): sequence sampling
        reward_fn: callable (next states, actions) -> (K,) rewards

    Returns:
        MpcPlan: best first action (ties go to the lowest sample index), its
        return, and every sampled return and sequence
    """
    sequences = rng.uniform(0.0, 1.0, size=(cfg.samples, cfg.horizon, ACTION_DIM))
    states = np.repeat(np.asarray(s, dtype=np.float64)[None, :], cfg.samples, axis=0)
    returns = np.zeros(cfg.samples)
    weight = 1.0
    for t in range(cfg.horizon):
        actions = sequences[:, t]
        states = model.predict(states, actions)
        returns += weight * reward_fn(states, actions)
        weight *= cfg.discount
    best = int(np.argmax(returns))
    return MpcPlan(sequences[best, 0].copy(), float(returns[best]), returns, sequences)


def mpc_action(model, s, cfg, rng, reward_fn=default_reward):
    """First action of the best sampled sequence"""
    return plan(model, s, cfg, rng, reward_fn).action


def mpc_policy(model, cfg):
    """Wrap a model as a (state, rng) -> action policy"""
    def policy(s, rng):
        return mpc_action(model, s, cfg, rng)
    return policy
