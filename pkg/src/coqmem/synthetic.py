"""Isotropic Gaussian cluster data for desk-scale experiments."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataio import FeatureDataset


@dataclass
class Splits:
    train: FeatureDataset
    query: FeatureDataset
    database: FeatureDataset
    centers: np.ndarray


def make_clusters(n_clusters: int = 10, dim: int = 64, n_train: int = 5000,
                  n_query: int = 1000, n_database: int = 5000, std: float = 1.0,
                  separation: float = 10.0, seed: int = 0) -> Splits:
    """Sample labelled train/query/database splits from shared cluster centers.

    Centers are drawn so that every pair is at least ``separation * std``
    apart; labels are the cluster ids.
    """
    rng = np.random.default_rng(seed)
    centers = rng.standard_normal((n_clusters, dim)) * 1.5 * std
    dist = np.linalg.norm(centers[:, None] - centers[None], axis=-1)
    closest = dist[~np.eye(n_clusters, dtype=bool)].min()
    if closest < separation * std:
        centers *= separation * std / closest

    def draw(n):
        labels = rng.integers(0, n_clusters, n)
        x = centers[labels] + std * rng.standard_normal((n, dim))
        return FeatureDataset(x.astype(np.float32), labels.astype(np.int64))

    return Splits(draw(n_train), draw(n_query), draw(n_database), centers)
