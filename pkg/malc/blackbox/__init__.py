"""
Stand-in black-boxes so that the whole pipeline runs without an external ML stack

* brute-force k-nearest-neighbor classifier with euclidean distance
* seeded noisy oracle that flips true labels to a uniformly drawn other class
"""
import logging
from dataclasses import dataclass

import numpy as np
from pydantic import BaseModel, Field

from malc.data import BlackboxPredictions, Dataset
from malc.errors import DataError, ShapeError

log = logging.getLogger(__name__)

__all__ = ['KnnModel', 'NoisyOracleConfig', 'knn_fit', 'knn_predict', 'knn_predict_batch', 'noisy_oracle']

# upper bound for the number of floats in one block of pairwise differences
BLOCK_FLOATS = 1 << 22


@dataclass(frozen=True)
class KnnModel:
    features: np.ndarray
    labels: np.ndarray
    k: int
    num_classes: int


class NoisyOracleConfig(BaseModel):
    error_rate: float = Field(default=0.1, ge=0.0, le=1.0)
    seed: int = 0


def knn_fit(ds: Dataset, k: int) -> KnnModel:
    """
    store the training data, 1 <= k <= n
    """
    if not 1 <= k <= ds.n:
        raise DataError(f'k must be in 1..{ds.n}, got {k}')
    return KnnModel(features=ds.features.copy(), labels=ds.labels.copy(), k=k, num_classes=ds.num_classes)


def knn_predict_batch(model: KnnModel, x: np.ndarray) -> np.ndarray:
    """
    Majority label among the k nearest training rows. Equal distances go to the lower row index, tied votes to
    the smaller class

    :return: 0-based labels
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = model.features.shape
    if x.shape[1] != d:
        raise ShapeError(f'{x.shape[1]} features, knn model has {d}')
    block = max(1, BLOCK_FLOATS // (n * d))
    result = np.empty(x.shape[0], dtype=np.int64)
    for start in range(0, x.shape[0], block):
        queries = x[start:start + block]
        distances = ((queries[:, None, :] - model.features[None, :, :]) ** 2).sum(axis=2)
        nearest = np.argsort(distances, axis=1, kind='stable')[:, :model.k]
        votes = np.zeros((queries.shape[0], model.num_classes), dtype=np.int64)
        np.add.at(votes, (np.repeat(np.arange(queries.shape[0]), model.k), model.labels[nearest].ravel()), 1)
        result[start:start + queries.shape[0]] = votes.argmax(axis=1)
    return result


def knn_predict(model: KnnModel, x: np.ndarray) -> int:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError('knn_predict takes a single feature vector')
    return int(knn_predict_batch(model, x[None, :])[0])


def noisy_oracle(labels: np.ndarray, cfg: NoisyOracleConfig, *, num_classes: int) -> BlackboxPredictions:
    """
    Flip every label independently with probability error_rate to a uniformly drawn different class

    :param labels: 0-based true labels
    :param cfg: error rate and seed
    :param num_classes: K >= 2
    """
    if num_classes < 2:
        raise DataError(f'noisy oracle needs at least two classes, got {num_classes}')
    labels = np.asarray(labels, dtype=np.int64)
    rng = np.random.default_rng(cfg.seed)
    flip = rng.random(labels.shape[0]) < cfg.error_rate
    offset = rng.integers(1, num_classes, size=labels.shape[0])
    preds = np.where(flip, (labels + offset) % num_classes, labels)
    log.debug(f'noisy_oracle: flipped {int(flip.sum())} of {labels.shape[0]} labels')
    return BlackboxPredictions(preds=preds, provenance=f'noisy_oracle(error_rate={cfg.error_rate}, seed={cfg.seed})')
