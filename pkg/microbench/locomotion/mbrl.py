"""
The on-device MBRL loop: train a model, act with MPC, aggregate, filter
"""
import logging
from typing import NamedTuple

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from pydantic import BaseModel, ConfigDict, Field
from tqdm import tqdm

from microbench.errors import DomainError
from microbench.locomotion.dynamics import TrainConfig, train_dynamics
from microbench.locomotion.env import collect_rollout, random_policy, run_episode
from microbench.locomotion.filtering import kmeans_filter
from microbench.locomotion.mpc import MpcConfig, mpc_policy

logger = logging.getLogger(__name__)

FIG4_COLUMNS = ["size", "condition", "mean_val_mse", "std_val_mse", "models"]
CONDITIONS = ("kmeans", "random", "full")


class MbrlConfig(BaseModel):
    model_config = ConfigDict(frozen=True)

    initial_steps: int = Field(1000, ge=1)
    rollout_steps: int = Field(500, ge=1)
    validation_steps: int = Field(800, ge=1)
    episode_length: int = Field(100, ge=1)
    eval_episodes: int = Field(10, ge=1)
    train: TrainConfig = TrainConfig()
    mpc: MpcConfig = MpcConfig()


class MbrlRun(NamedTuple):
    metrics: list
    dataset: object
    model: object
    random_reward: float


def _child_seed(*entropy):
    return int(np.random.SeedSequence(list(entropy)).generate_state(1)[0])


def evaluate_policy(policy, episodes, length, rng):
    """Mean total reward over independent episodes"""
    if episodes < 1:
        raise DomainError(f"episodes must be at least 1, got {episodes}")
    return float(np.mean([run_episode(policy, length, rng) for _ in range(episodes)]))


def mbrl_iteration(dataset, k_filter, cfg, rng, val):
    """
    One pass of the loop

    Trains on the current dataset, collects rollout_steps transitions with the
    MPC policy, evaluates that policy, aggregates both datasets and filters the
    union down to k_filter transitions.

    Returns:
        tuple: (next dataset, model, metrics dict)
    """
    if len(dataset) == 0:
        raise DomainError("dataset is empty")
    model, val_mse = train_dynamics(dataset, val, seed=int(rng.integers(2 ** 31 - 1)), cfg=cfg.train)
    policy = mpc_policy(model, cfg.mpc)
    collected = collect_rollout(policy, cfg.rollout_steps, rng, episode_length=cfg.episode_length)
    reward = evaluate_policy(policy, cfg.eval_episodes, cfg.episode_length, rng)
    merged = dataset.union(collected)
    trace, iterations = [], 0
    if len(merged) > k_filter:
        result = kmeans_filter(merged, k_filter, rng, full=True)
        next_dataset = result.dataset
        trace, iterations = list(result.kmeans.objective_trace), result.kmeans.iterations
    else:
        next_dataset = merged
    metrics = {
        "val_mse": val_mse,
        "mean_reward": reward,
        "size_before": len(merged),
        "size_after": len(next_dataset),
        "reduction": 1.0 - len(next_dataset) / len(merged),
        "kmeans_iterations": iterations,
        "objective_trace": trace,
    }
    logger.info("MBRL iteration: val mse %.5f, reward %.3f, %d -> %d transitions",
                val_mse, reward, len(merged), len(next_dataset))
    return next_dataset, model, metrics


def run_mbrl(iterations, k_filter, cfg=None, seed=0, progress=False):
    """
    Seed the loop with random-policy data and run it for a fixed number of passes

    Returns:
        MbrlRun: per-iteration metrics, final dataset and model, and the
        random policy's mean reward under the same evaluation protocol
    """
    cfg = cfg or MbrlConfig()
    data_rng, val_rng, eval_rng, loop_rng = [
        np.random.Generator(np.random.PCG64(s)) for s in np.random.SeedSequence(seed).spawn(4)]
    dataset = collect_rollout(random_policy, cfg.initial_steps, data_rng, episode_length=cfg.episode_length)
    val = collect_rollout(random_policy, cfg.validation_steps, val_rng, episode_length=cfg.episode_length)
    random_reward = evaluate_policy(random_policy, cfg.eval_episodes, cfg.episode_length, eval_rng)
    logger.info("Random policy mean reward %.3f", random_reward)

    metrics, model = [], None
    for i in tqdm(range(iterations), desc="mbrl", disable=not progress):
        dataset, model, m = mbrl_iteration(dataset, k_filter, cfg, loop_rng, val)
        metrics.append({"iteration": i, **m})
    return MbrlRun(metrics, dataset, model, random_reward)


def _train_cell(key, dataset, val, seed, cfg):
    _, val_mse = train_dynamics(dataset, val, seed=seed, cfg=cfg)
    return key, val_mse


def fig4_sweep(master, val, sizes, models=25, seed=0, jobs=1, cfg=None, progress=False):
    """
    Validation error of models trained on filtered, random and full data

    For each size, `models` models are trained on (a) the k-means-filtered
    subset, (b) a fresh uniform random subset per model, and (c) the full
    master dataset; (c) is trained once and repeated for every size.

    Returns:
        pd.DataFrame: size,condition,mean_val_mse,std_val_mse,models rows,
        three per size
    """
    cfg = cfg or TrainConfig()
    sizes = [int(s) for s in sizes]
    if not sizes:
        raise DomainError("no dataset sizes given")
    if max(sizes) > len(master):
        raise DomainError(f"size {max(sizes)} exceeds the master dataset ({len(master)})")

    cells = []
    for m in range(models):
        cells.append((("full", 0, m), master, _child_seed(seed, 2, m)))
    for si, size in enumerate(sizes):
        filter_rng = np.random.Generator(np.random.PCG64(_child_seed(seed, 0, si)))
        filtered = kmeans_filter(master, size, filter_rng)
        for m in range(models):
            subset_rng = np.random.Generator(np.random.PCG64(_child_seed(seed, 1, si, m)))
            uniform = master.subset(np.sort(subset_rng.choice(len(master), size, replace=False)))
            cells.append((("kmeans", si, m), filtered, _child_seed(seed, 0, si, m)))
            cells.append((("random", si, m), uniform, _child_seed(seed, 1, si, m, 1)))

    logger.info("Training %d models over %d sizes with %d jobs", len(cells), len(sizes), jobs)
    results = Parallel(n_jobs=jobs)(
        delayed(_train_cell)(key, data, val, s, cfg)
        for key, data, s in tqdm(cells, desc="fig4", disable=not progress)
    )
    errors = {}
    for key, val_mse in sorted(results, key=lambda r: r[0]):
        errors.setdefault(key[:2], []).append(val_mse)

    rows = []
    for si, size in enumerate(sizes):
        for condition in CONDITIONS:
            values = np.array(errors[(condition, 0 if condition == "full" else si)])
            rows.append({
                "size": size,
                "condition": condition,
                "mean_val_mse": float(values.mean()),
                "std_val_mse": float(values.std()),
                "models": len(values),
            })
    return pd.DataFrame(rows, columns=FIG4_COLUMNS)
