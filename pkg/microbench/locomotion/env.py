"""
Simulated quadrotor attitude dynamics and transition datasets

State (6): roll, pitch [rad], roll rate, pitch rate, yaw rate [rad/s], and a
vertical-acceleration proxy [g]. Action (4): motor commands in [0, 1] ordered
left-front, left-rear, right-rear, right-front (X layout).
"""
import logging
import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
import pandas as pd

from microbench.errors import DomainError, ValidationError

logger = logging.getLogger(__name__)

STATE_DIM = 6
ACTION_DIM = 4
DT = 0.01
OBS_NOISE_STD = 0.01
TERMINATION_ANGLE = math.radians(30.0)
STD_FLOOR = 1e-6

# rows: roll, pitch and yaw torque, collective thrust; columns: motors
MIXING = np.array([
    [1.0, 1.0, -1.0, -1.0],
    [1.0, -1.0, -1.0, 1.0],
    [1.0, -1.0, 1.0, -1.0],
    [0.25, 0.25, 0.25, 0.25],
])
ROLL_PITCH_GAIN = 20.0
YAW_GAIN = 5.0
RATE_DAMPING = 2.0
THRUST_GAIN = 2.0
# per-step cost charged for every step an episode loses to termination
TERMINATION_COST = 2.0 * TERMINATION_ANGLE ** 2
INITIAL_ATTITUDE = math.radians(5.0)

STATE_COLUMNS = [f"s{i}" for i in range(STATE_DIM)]
ACTION_COLUMNS = [f"a{i}" for i in range(ACTION_DIM)]
NEXT_COLUMNS = [f"sn{i}" for i in range(STATE_DIM)]
TRANSITION_COLUMNS = STATE_COLUMNS + ACTION_COLUMNS + NEXT_COLUMNS


class StepResult(NamedTuple):
    s_next: np.ndarray
    reward: float
    done: bool


def attitude_reward(states):
    """-(roll^2 + pitch^2) for one state or a batch"""
    states = np.asarray(states)
    return -(states[..., 0] ** 2 + states[..., 1] ** 2)


def terminated(states):
    states = np.asarray(states)
    return (np.abs(states[..., 0]) > TERMINATION_ANGLE) | (np.abs(states[..., 1]) > TERMINATION_ANGLE)


def dynamics(states, actions):
    """Noise-free Euler step of the attitude model; batched over leading axes"""
    s = np.asarray(states, dtype=np.float64)
    a = np.asarray(actions, dtype=np.float64)
    torque = a @ MIXING.T
    roll, pitch, p, q, r = s[..., 0], s[..., 1], s[..., 2], s[..., 3], s[..., 4]
    p_next = p + DT * (ROLL_PITCH_GAIN * torque[..., 0] - RATE_DAMPING * p)
    q_next = q + DT * (ROLL_PITCH_GAIN * torque[..., 1] - RATE_DAMPING * q)
    r_next = r + DT * (YAW_GAIN * torque[..., 2] - RATE_DAMPING * r)
    roll_next = roll + DT * p_next
    pitch_next = pitch + DT * q_next
    accel = THRUST_GAIN * torque[..., 3] * np.cos(roll_next) * np.cos(pitch_next) - 1.0
    return np.stack([roll_next, pitch_next, p_next, q_next, r_next, accel], axis=-1)


def env_step(s, a, rng):
    """
    Advance the simulator one step

    Args:
        s (np.ndarray): state (6,)
        a (np.ndarray): motor commands (4,) in [0, 1]
        rng (np.random.Generator): observation noise

    Returns:
        StepResult: noisy next state, reward of that state, termination flag
    """
    a = np.asarray(a, dtype=np.float64)
    if a.shape != (ACTION_DIM,) or np.any(a < 0.0) or np.any(a > 1.0):
        raise DomainError(f"action must be 4 values in [0, 1], got {a}")
    s_next = dynamics(s, a) + rng.normal(0.0, OBS_NOISE_STD, size=STATE_DIM)
    return StepResult(s_next, float(attitude_reward(s_next)), bool(terminated(s_next)))


def reset_state(rng):
    """Small random attitude at rest"""
    s = np.zeros(STATE_DIM)
    s[:2] = rng.uniform(-INITIAL_ATTITUDE, INITIAL_ATTITUDE, size=2)
    return s


def random_policy(s, rng):
    return rng.uniform(0.0, 1.0, size=ACTION_DIM)


def _stats(x):
    return x.mean(axis=0), np.maximum(x.std(axis=0), STD_FLOOR)


@dataclass(frozen=True, eq=False)
class TransitionDataset:
    """
    Immutable transition arrays with their normalization statistics

    Inputs are (s, a) rows, targets the state deltas s_next - s. Operations
    that change the contents return a new dataset with fresh statistics.
    """

    states: np.ndarray
    actions: np.ndarray
    next_states: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.states, dtype=np.float64).reshape(-1, STATE_DIM)
        a = np.asarray(self.actions, dtype=np.float64).reshape(-1, ACTION_DIM)
        sn = np.asarray(self.next_states, dtype=np.float64).reshape(-1, STATE_DIM)
        if not len(s) == len(a) == len(sn):
            raise ValidationError(f"row counts differ: {len(s)}, {len(a)}, {len(sn)}")
        if not (np.all(np.isfinite(s)) and np.all(np.isfinite(a)) and np.all(np.isfinite(sn))):
            raise ValidationError("transitions must be finite")
        if np.any(a < 0.0) or np.any(a > 1.0):
            raise ValidationError("actions must lie in [0, 1]")
        for name, arr in (("states", s), ("actions", a), ("next_states", sn)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if len(s):
            in_mean, in_std = _stats(self.inputs)
            out_mean, out_std = _stats(self.deltas)
        else:
            in_mean, in_std = np.zeros(STATE_DIM + ACTION_DIM), np.ones(STATE_DIM + ACTION_DIM)
            out_mean, out_std = np.zeros(STATE_DIM), np.ones(STATE_DIM)
        object.__setattr__(self, "input_mean", in_mean)
        object.__setattr__(self, "input_std", in_std)
        object.__setattr__(self, "target_mean", out_mean)
        object.__setattr__(self, "target_std", out_std)

    @classmethod
    def empty(cls):
        return cls(np.empty((0, STATE_DIM)), np.empty((0, ACTION_DIM)), np.empty((0, STATE_DIM)))

    def __len__(self):
        return len(self.states)

    @property
    def inputs(self):
        return np.hstack([self.states, self.actions])

    @property
    def deltas(self):
        return self.next_states - self.states

    def features(self):
        """Per-dimension standardized (s, a) rows"""
        return (self.inputs - self.input_mean) / self.input_std

    def subset(self, indices):
        idx = np.asarray(indices, dtype=np.int64)
        return TransitionDataset(self.states[idx], self.actions[idx], self.next_states[idx])

    def union(self, other):
        return TransitionDataset(
            np.vstack([self.states, other.states]),
            np.vstack([self.actions, other.actions]),
            np.vstack([self.next_states, other.next_states]),
        )

    def to_frame(self):
        return pd.DataFrame(np.hstack([self.states, self.actions, self.next_states]), columns=TRANSITION_COLUMNS)

    @classmethod
    def from_frame(cls, frame):
        return cls(frame[STATE_COLUMNS].to_numpy(), frame[ACTION_COLUMNS].to_numpy(), frame[NEXT_COLUMNS].to_numpy())


def collect_rollout(policy, steps, rng, episode_length=None):
    """
    Run a policy in the simulator, restarting after every termination

    Args:
        policy: callable (state, rng) -> action
        steps (int): transitions to record
        rng (np.random.Generator): resets, noise and policy randomness
        episode_length (int, optional): also restart after this many steps

    Returns:
        TransitionDataset: exactly `steps` transitions
    """
    if steps < 1:
        raise DomainError(f"steps must be at least 1, got {steps}")
    states, actions, nexts = [], [], []
    s = reset_state(rng)
    age = restarts = 0
    for _ in range(steps):
        a = np.clip(np.asarray(policy(s, rng), dtype=np.float64), 0.0, 1.0)
        result = env_step(s, a, rng)
        states.append(s)
        actions.append(a)
        nexts.append(result.s_next)
        age += 1
        if result.done or (episode_length and age >= episode_length):
            s = reset_state(rng)
            age = 0
            restarts += int(result.done)
        else:
            s = result.s_next
    logger.debug("Collected %d transitions, %d terminations", steps, restarts)
    return TransitionDataset(np.array(states), np.array(actions), np.array(nexts))


def run_episode(policy, length, rng):
    """
    Total reward of one episode

    An episode that terminates early is charged TERMINATION_COST for each
    step it did not complete.
    """
    s = reset_state(rng)
    total = 0.0
    for t in range(length):
        a = np.clip(np.asarray(policy(s, rng), dtype=np.float64), 0.0, 1.0)
        result = env_step(s, a, rng)
        total += result.reward
        if result.done:
            total -= TERMINATION_COST * (length - t - 1)
            break
        s = result.s_next
    return total
