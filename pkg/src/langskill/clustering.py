"""
Lloyd's k-means with k-means++ seeding, and the language-state features it clusters.
"""

import logging
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from langskill.world.grid import HEIGHT, NUM_CARRY_CATEGORIES, NUM_CELL_CATEGORIES, OBS_LENGTH, WIDTH

STATE_FEATURES = WIDTH * HEIGHT * NUM_CELL_CATEGORIES + 4 + NUM_CARRY_CATEGORIES

log = logging.getLogger(__name__)


def feature_dim(language_dim: int) -> int:
    return language_dim + STATE_FEATURES


def state_one_hot(state: Sequence[int]) -> np.ndarray:
    state = np.asarray(state, dtype=np.int64)
    if state.shape != (OBS_LENGTH,):
        raise ValueError(f"observation must hold {OBS_LENGTH} entries but {state.shape} given")
    cells = WIDTH * HEIGHT
    features = np.zeros(STATE_FEATURES)
    features[np.arange(cells) * NUM_CELL_CATEGORIES + state[:cells]] = 1.0
    features[cells * NUM_CELL_CATEGORIES + state[cells]] = 1.0
    features[cells * NUM_CELL_CATEGORIES + 4 + state[cells + 1]] = 1.0
    return features


def segment_feature(language: np.ndarray, state: Sequence[int]) -> np.ndarray:
    """Pooled language embedding concatenated with the one-hot segment-start state."""
    language = np.asarray(language, dtype=np.float64)
    if language.ndim != 1:
        raise ValueError(f"language feature must be a vector but shape {language.shape} given")
    return np.concatenate([language, state_one_hot(state)])


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    iterations: int


def _squared_distances(points: np.ndarray, centers: np.ndarray) -> np.ndarray:
    return (
        np.sum(points**2, axis=1, keepdims=True) - 2.0 * points @ centers.T + np.sum(centers**2, axis=1)[None, :]
    ).clip(min=0.0)


def kmeans_plus_plus(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    centers = [points[int(rng.integers(len(points)))]]
    for _ in range(1, k):
        d2 = _squared_distances(points, np.stack(centers)).min(axis=1)
        total = d2.sum()
        index = int(rng.integers(len(points))) if total <= 0 else int(rng.choice(len(points), p=d2 / total))
        centers.append(points[index])
    return np.stack(centers).astype(np.float64)


def kmeans(
    points: np.ndarray, k: int, iterations: int = 50, seed: int = 0, tol: float = 0.0
) -> KMeansResult:
    """
    Cluster ``points`` into ``k`` groups.

    An empty cluster is reseeded at the point farthest from its current center.

    :param points: Array of shape (N, F)
    :type points: np.ndarray
    :param k: Number of clusters
    :type k: int
    :param iterations: Maximum Lloyd iterations
    :type iterations: int, optional
    :param seed: Seed for the k-means++ draw
    :type seed: int, optional
    :param tol: Stop once no center moves more than this
    :type tol: float, optional
    :return: Centers, labels, inertia and iterations run
    :rtype: KMeansResult
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or len(points) == 0:
        raise ValueError(f"k-means needs a non-empty (N, F) array but {points.shape} given")
    if not 1 <= k <= len(points):
        raise ValueError(f"k must lie in [1, {len(points)}] but {k} given")
    rng = np.random.default_rng(seed)
    centers = kmeans_plus_plus(points, k, rng)
    labels = np.zeros(len(points), dtype=np.int64)
    run = 0
    for run in range(1, iterations + 1):
        distances = _squared_distances(points, centers)
        labels = np.argmin(distances, axis=1)
        new_centers = centers.copy()
        for cluster in range(k):
            members = points[labels == cluster]
            if len(members):
                new_centers[cluster] = members.mean(axis=0)
            else:
                farthest = int(np.argmax(distances[np.arange(len(points)), labels]))
                log.debug(f"cluster {cluster} empty, reseeding from point {farthest}")
                new_centers[cluster] = points[farthest]
                labels[farthest] = cluster
        shift = float(np.max(np.abs(new_centers - centers)))
        centers = new_centers
        if shift <= tol:
            break
    distances = _squared_distances(points, centers)
    labels = np.argmin(distances, axis=1)
    inertia = float(distances[np.arange(len(points)), labels].sum())
    return KMeansResult(centers=centers, labels=labels, inertia=inertia, iterations=run)


def assign(centers: np.ndarray, feature: np.ndarray) -> int:
    """Nearest center, lowest index on ties."""
    return int(np.argmin(np.sum((centers - feature) ** 2, axis=1)))


def fit_segment_clusters(
    records,
    k: int,
    horizon: int,
    language_feature: Callable[[Sequence[int]], np.ndarray],
    iterations: int = 50,
    seed: int = 0,
) -> Optional[KMeansResult]:
    """
    Cluster the language-state features at every segment start of every record.

    :param language_feature: Maps instruction token ids to a pooled language embedding
    :type language_feature: Callable
    :return: Clusters, or None when there are no segments
    :rtype: KMeansResult, optional
    """
    features = []
    for record in records:
        language = language_feature(record.token_ids)
        starts = range(0, len(record.actions), horizon)
        features.extend(segment_feature(language, record.states[start]) for start in starts)
    if not features:
        return None
    log.info(f"clustering {len(features)} segment features into {k} groups")
    return kmeans(np.stack(features), k, iterations=iterations, seed=seed)
