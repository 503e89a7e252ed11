"""
k-means dataset filtering: keep one real transition per cluster
"""
import logging
from typing import NamedTuple

import numpy as np
import pandas as pd
from sklearn.cluster import kmeans_plusplus

from microbench.errors import DomainError
from microbench.vector_store import PointIndex

logger = logging.getLogger(__name__)

MAX_ITERATIONS = 100
SHIFT_TOLERANCE = 1e-6


class KMeansResult(NamedTuple):
    centroids: np.ndarray
    labels: np.ndarray
    objective_trace: list
    iterations: int


class FilterResult(NamedTuple):
    dataset: object
    indices: np.ndarray
    kmeans: KMeansResult


def _assign(X, centroids):
    d2 = (X * X).sum(axis=1)[:, None] - 2.0 * X @ centroids.T + (centroids * centroids).sum(axis=1)[None, :]
    labels = np.argmin(d2, axis=1)
    objective = float(((X - centroids[labels]) ** 2).sum())
    return labels, objective


def kmeans(X, k, rng, max_iterations=MAX_ITERATIONS, tolerance=SHIFT_TOLERANCE):
    """
    Lloyd iterations from a k-means++ start

    Stops when no centroid moves more than tolerance or after max_iterations.
    Empty clusters keep their previous centroid.

    Returns:
        KMeansResult: centroids, labels and the objective after every assignment
    """
    X = np.asarray(X, dtype=np.float64)
    if not 1 <= k <= len(X):
        raise DomainError(f"k must be in [1, {len(X)}], got {k}")
    centroids, _ = kmeans_plusplus(X, k, random_state=int(rng.integers(2 ** 31 - 1)))
    trace = []
    labels, objective = _assign(X, centroids)
    trace.append(objective)
    iterations = 0
    for iterations in range(1, max_iterations + 1):
        sums = np.zeros_like(centroids)
        np.add.at(sums, labels, X)
        counts = np.bincount(labels, minlength=k)
        updated = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], centroids)
        shift = float(np.sqrt(((updated - centroids) ** 2).sum(axis=1)).max())
        centroids = updated
        labels, objective = _assign(X, centroids)
        trace.append(objective)
        if shift <= tolerance:
            break
    logger.debug("k-means k=%d converged after %d iterations, objective %.6g", k, iterations, trace[-1])
    return KMeansResult(centroids, labels, trace, iterations)


def kmeans_filter(dataset, k, rng, full=False):
    """
    Reduce a dataset to the k members nearest the k-means centroids

    Clustering runs on per-dimension standardized (s, a) vectors; every
    centroid claims the closest member not taken by an earlier centroid.

    Args:
        dataset (TransitionDataset): source data
        k (int): 1 <= k <= len(dataset)
        rng (np.random.Generator): seeding
        full (bool): return a FilterResult instead of the dataset alone

    Returns:
        TransitionDataset | FilterResult: k original transitions in source order
    """
    if not 1 <= k <= len(dataset):
        raise DomainError(f"k must be in [1, {len(dataset)}], got {k}")
    X = dataset.features()
    result = kmeans(X, k, rng)
    index = PointIndex(X.shape[1])
    index.add(X)
    indices = np.sort(index.nearest_unique(result.centroids))
    filtered = dataset.subset(indices)
    logger.info("Filtered %d transitions down to %d", len(dataset), len(filtered))
    return FilterResult(filtered, indices, result) if full else filtered


def distribution_summary(dataset):
    """
    Spread of a dataset's (s, a) inputs

    Returns:
        pd.DataFrame: per input dimension min, max and std, plus the mean
        nearest-neighbour distance in standardized space (same for all rows)
    """
    inputs = dataset.inputs
    X = dataset.features()
    nn = float("nan")
    if len(X) > 1:
        index = PointIndex(X.shape[1])
        index.add(X)
        distances, _ = index.search(X, 2)
        nn = float(np.sqrt(np.maximum(distances[:, 1], 0.0)).mean())
    names = [f"s{i}" for i in range(dataset.states.shape[1])] + [f"a{i}" for i in range(dataset.actions.shape[1])]
    return pd.DataFrame({
        "dimension": names,
        "min": inputs.min(axis=0),
        "max": inputs.max(axis=0),
        "std": inputs.std(axis=0),
        "mean_nn_distance": nn,
    })
