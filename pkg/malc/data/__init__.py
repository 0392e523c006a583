"""
Datasets, black-box predictions and the class/correctness index partition

Class labels are 1-based in every file and 0-based in memory. The readers and writers in this module are the only
place where labels are converted.
"""
import csv
import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple, Union

import numpy as np

from malc.errors import DataError, ShapeError

log = logging.getLogger(__name__)

__all__ = ['Dataset', 'BlackboxPredictions', 'ClassPartition', 'ScalingParams', 'Split', 'BIAS_NAME',
           'load_dataset', 'load_blackbox_predictions', 'write_dataset_csv', 'write_blackbox_predictions',
           'reconcile_classes', 'partition_indices', 'holdout_split', 'minmax_scale', 'apply_scale', 'add_bias',
           'make_blobs', 'file_digest']

BIAS_NAME = 'bias'


@dataclass(frozen=True)
class Dataset:
    """
    Feature matrix and 0-based labels
    """
    features: np.ndarray
    labels: np.ndarray
    feature_names: List[str]
    num_classes: int
    #: last column is a constant 1 appended by add_bias()
    has_bias: bool = field(default=False)

    def __post_init__(self):
        features = np.asarray(self.features, dtype=float)
        labels = np.asarray(self.labels, dtype=np.int64)
        if features.ndim != 2:
            raise ShapeError(f'features must be a matrix, got {features.ndim} dimensions')
        n, d = features.shape
        if n < 1 or d < 1:
            raise ShapeError(f'dataset needs at least one row and one column, got {n}x{d}')
        if labels.shape != (n,):
            raise ShapeError(f'{labels.shape[0] if labels.ndim else 0} labels for {n} rows')
        if len(self.feature_names) != d:
            raise ShapeError(f'{len(self.feature_names)} feature names for {d} columns')
        if self.num_classes < 2:
            raise DataError(f'need at least two classes, got {self.num_classes}')
        if labels.min() < 0 or labels.max() >= self.num_classes:
            raise DataError(f'labels must be in 1..{self.num_classes}')
        object.__setattr__(self, 'features', features)
        object.__setattr__(self, 'labels', labels)
        object.__setattr__(self, 'feature_names', list(self.feature_names))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def take(self, rows: np.ndarray) -> 'Dataset':
        """
        Subset of rows in the given order
        """
        return replace(self, features=self.features[rows], labels=self.labels[rows])


@dataclass(frozen=True)
class BlackboxPredictions:
    """
    0-based class predictions of an arbitrary black-box, row-aligned with a dataset
    """
    preds: np.ndarray
    #: where the predictions came from (file digest, generator, ...)
    provenance: str = field(default='')

    def __post_init__(self):
        preds = np.asarray(self.preds, dtype=np.int64)
        if preds.ndim != 1:
            raise ShapeError('black-box predictions must be a vector')
        if preds.size and preds.min() < 0:
            raise DataError('black-box predictions must be positive class ids')
        object.__setattr__(self, 'preds', preds)

    def __len__(self):
        return self.preds.shape[0]

    @property
    def max_class(self) -> int:
        """
        number of classes needed to hold all predictions
        """
        return int(self.preds.max()) + 1 if len(self) else 0

    def take(self, rows: np.ndarray) -> 'BlackboxPredictions':
        return replace(self, preds=self.preds[rows])


@dataclass(frozen=True)
class ClassPartition:
    """
    pos[k]: rows of class k the black-box gets right, neg[k]: rows of class k the black-box gets wrong
    """
    pos: List[np.ndarray]
    neg: List[np.ndarray]
    n: int

    @property
    def num_classes(self) -> int:
        return len(self.pos)

    def positive_mask(self) -> np.ndarray:
        """
        boolean row mask: True for rows in any pos[k]
        """
        mask = np.zeros(self.n, dtype=bool)
        for rows in self.pos:
            mask[rows] = True
        return mask


@dataclass(frozen=True)
class ScalingParams:
    """
    per-feature min and max of the training data (bias column excluded)
    """
    minimum: np.ndarray
    maximum: np.ndarray

    def __post_init__(self):
        minimum = np.asarray(self.minimum, dtype=float)
        maximum = np.asarray(self.maximum, dtype=float)
        if minimum.shape != maximum.shape or minimum.ndim != 1:
            raise ShapeError('scaling min and max must be vectors of equal length')
        if np.any(maximum < minimum):
            raise DataError('scaling max must not be smaller than min')
        object.__setattr__(self, 'minimum', minimum)
        object.__setattr__(self, 'maximum', maximum)


# (dataset, black-box predictions) travelling together
Split = Tuple[Dataset, BlackboxPredictions]


def _parse_label(text: str, path: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError:
        raise DataError(f'label "{text}" is not a number', path=path, line=line)
    if not value.is_integer() or value < 1:
        raise DataError(f'label "{text}" is not a positive integer (labels start at 1)', path=path, line=line)
    return int(value)


def _parse_float(text: str, path: str, line: int, what: str) -> float:
    try:
        return float(text)
    except ValueError:
        raise DataError(f'non-numeric {what}: "{text}"', path=path, line=line)


def _load_csv(path: str, label_column: Union[str, int]) -> Tuple[List[List[float]], List[int], List[str]]:
    with open(path, newline='', encoding='utf-8') as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError('empty file', path=path)
        if isinstance(label_column, int):
            if not -len(header) <= label_column < len(header):
                raise DataError(f'label column index {label_column} out of range', path=path, line=1)
            label_idx = label_column % len(header)
        else:
            try:
                label_idx = header.index(label_column)
            except ValueError:
                raise DataError(f'no column named "{label_column}" in header', path=path, line=1)
        names = [name.strip() for i, name in enumerate(header) if i != label_idx]
        rows, labels = [], []
        for row in reader:
            line = reader.line_num
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != len(header):
                raise DataError(f'malformed row: {len(row)} fields, header has {len(header)}', path=path, line=line)
            labels.append(_parse_label(row[label_idx].strip(), path, line))
            rows.append([_parse_float(cell.strip(), path, line, f'value in column "{header[i]}"')
                         for i, cell in enumerate(row) if i != label_idx])
    return rows, labels, names


def _load_svmlight(path: str, num_features: Optional[int]) -> Tuple[List[List[float]], List[int], List[str]]:
    entries: List[List[Tuple[int, float]]] = []
    labels = []
    max_index = 0
    with open(path, encoding='utf-8') as f:
        for line_no, line in enumerate(f, start=1):
            line = line.split('#', 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            labels.append(_parse_label(tokens[0], path, line_no))
            row = []
            for token in tokens[1:]:
                idx, sep, value = token.partition(':')
                if not sep:
                    raise DataError(f'malformed feature "{token}", expected <index>:<value>', path=path, line=line_no)
                try:
                    idx = int(idx)
                except ValueError:
                    raise DataError(f'non-integer feature index "{idx}"', path=path, line=line_no)
                if idx < 1:
                    raise DataError(f'feature indices start at 1, got {idx}', path=path, line=line_no)
                row.append((idx - 1, _parse_float(value, path, line_no, f'value for feature {idx}')))
                max_index = max(max_index, idx)
            entries.append(row)
    if not entries:
        raise DataError('empty file', path=path)
    d = max_index
    if num_features is not None:
        if num_features < max_index:
            raise DataError(f'feature index {max_index} exceeds declared dimension {num_features}', path=path)
        d = num_features
    d = max(d, 1)
    rows = []
    for row_entries in entries:
        row = [0.0] * d
        for idx, value in row_entries:
            row[idx] = value
        rows.append(row)
    return rows, labels, [f'f{i + 1}' for i in range(d)]


def load_dataset(path: str, *, fmt: str = 'csv', label_column: Union[str, int] = 'label',
                 num_features: Optional[int] = None) -> Dataset:
    """
    Read a dataset file. Row order is preserved, K is the largest label seen (at least 2)

    :param path: file to read
    :param fmt: 'csv' (header row, one label column) or 'svmlight' ("<label> <idx>:<val> ..." with 1-based indices)
    :param label_column: name or index of the label column in a CSV file
    :param num_features: svmlight only: declared dimension, default is the largest index seen
    :return: dataset with 0-based labels
    """
    if fmt == 'csv':
        rows, labels, names = _load_csv(path, label_column)
    elif fmt == 'svmlight':
        rows, labels, names = _load_svmlight(path, num_features)
    else:
        raise DataError(f'unknown dataset format "{fmt}", expected csv or svmlight')
    if not rows:
        raise DataError('no data rows', path=path)
    if not names:
        raise DataError('no feature columns', path=path)
    labels = np.asarray(labels, dtype=np.int64) - 1
    num_classes = max(2, int(labels.max()) + 1)
    log.debug(f'load_dataset({path}): {len(rows)} rows, {len(names)} features, {num_classes} classes')
    return Dataset(features=np.asarray(rows, dtype=float), labels=labels, feature_names=names,
                   num_classes=num_classes)


def load_blackbox_predictions(path: str, n: int) -> BlackboxPredictions:
    """
    Read a black-box prediction file: one positive integer label per line, row-aligned with the dataset

    :param path: prediction file
    :param n: number of rows in the dataset
    :return: 0-based predictions
    """
    with open(path, encoding='utf-8') as f:
        lines = f.read().splitlines()
    while lines and not lines[-1].strip():
        lines.pop()
    if len(lines) != n:
        raise DataError(f'{len(lines)} predictions for {n} dataset rows', path=path)
    preds = [_parse_label(line.strip(), path, line_no) for line_no, line in enumerate(lines, start=1)]
    return BlackboxPredictions(preds=np.asarray(preds, dtype=np.int64) - 1,
                               provenance=f'{path}#sha256={file_digest(path)}')


def write_dataset_csv(ds: Dataset, path: str, label_name: str = 'label'):
    """
    Write features (bias column excluded) and 1-based labels as CSV with full float precision
    """
    features, names = ds.features, ds.feature_names
    if ds.has_bias:
        features, names = features[:, :-1], names[:-1]
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(names + [label_name])
        for row, label in zip(features, ds.labels):
            writer.writerow([repr(float(v)) for v in row] + [int(label) + 1])


def write_blackbox_predictions(path: str, bb: BlackboxPredictions):
    with open(path, 'w', encoding='utf-8') as f:
        f.writelines(f'{int(p) + 1}\n' for p in bb.preds)


def file_digest(path: str) -> str:
    """
    sha256 of a file's content
    """
    digest = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(1 << 16), b''):
            digest.update(chunk)
    return digest.hexdigest()


def reconcile_classes(ds: Dataset, bb: BlackboxPredictions) -> Dataset:
    """
    Raise K to cover every class the black-box predicts. A black-box may predict a class absent from a small sample

    :return: dataset with num_classes = max(K, largest prediction)
    """
    if len(bb) != ds.n:
        raise ShapeError(f'{len(bb)} black-box predictions for {ds.n} rows')
    if bb.max_class > ds.num_classes:
        log.debug(f'black-box predicts class {bb.max_class}: raising K from {ds.num_classes}')
        return replace(ds, num_classes=bb.max_class)
    return ds


def partition_indices(labels: np.ndarray, bb: BlackboxPredictions, num_classes: Optional[int] = None) -> ClassPartition:
    """
    Split row indices by true class and by black-box correctness

    :param labels: 0-based labels
    :param bb: black-box predictions, same length
    :param num_classes: K, default is the largest class in labels or predictions
    """
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape != bb.preds.shape:
        raise ShapeError(f'{labels.shape[0]} labels but {len(bb)} black-box predictions')
    if num_classes is None:
        num_classes = max(int(labels.max(initial=-1)) + 1, bb.max_class)
    correct = labels == bb.preds
    rows = np.arange(labels.shape[0])
    pos = [rows[(labels == k) & correct] for k in range(num_classes)]
    neg = [rows[(labels == k) & ~correct] for k in range(num_classes)]
    return ClassPartition(pos=pos, neg=neg, n=labels.shape[0])


def holdout_split(ds: Dataset, bb: BlackboxPredictions, fraction: float, seed: int,
                  stratified: bool = False) -> Tuple[Split, Split]:
    """
    Seeded holdout split. Black-box predictions travel with their rows

    :param ds: dataset
    :param bb: black-box predictions for ds
    :param fraction: share of rows held out for validation, round(fraction * n) rows
    :param seed: seed for the shuffle
    :param stratified: hold out round(fraction * n_k) rows of every class k instead of shuffling all rows
    :return: (train dataset, train predictions), (validation dataset, validation predictions)
    """
    if len(bb) != ds.n:
        raise ShapeError(f'{len(bb)} black-box predictions for {ds.n} rows')
    n = ds.n
    if not 0 < fraction < 1 or fraction * n < 1 or (1 - fraction) * n < 1:
        raise DataError(f'holdout fraction {fraction} leaves an empty side for {n} rows')
    rng = np.random.default_rng(seed)
    if stratified:
        held = []
        for k in range(ds.num_classes):
            members = np.flatnonzero(ds.labels == k)
            take = int(np.floor(fraction * members.size + 0.5))
            held.append(rng.permutation(members)[:take])
        validation = np.concatenate(held)
        if validation.size == 0 or validation.size == n:
            raise DataError(f'stratified holdout fraction {fraction} leaves an empty side for {n} rows')
    else:
        size = min(max(int(np.floor(fraction * n + 0.5)), 1), n - 1)
        validation = rng.permutation(n)[:size]
    validation = np.sort(validation)
    train = np.setdiff1d(np.arange(n), validation)
    log.debug(f'holdout_split: {train.size} train rows, {validation.size} validation rows')
    return (ds.take(train), bb.take(train)), (ds.take(validation), bb.take(validation))


def _feature_block(ds: Dataset) -> np.ndarray:
    return ds.features[:, :-1] if ds.has_bias else ds.features


def _with_feature_block(ds: Dataset, block: np.ndarray) -> Dataset:
    if ds.has_bias:
        block = np.hstack([block, ds.features[:, -1:]])
    return replace(ds, features=block)


def minmax_scale(ds: Dataset) -> Tuple[Dataset, ScalingParams]:
    """
    Map every feature to [0, 1] with (x - min) / (max - min); constant features map to 0
    """
    block = _feature_block(ds)
    params = ScalingParams(minimum=block.min(axis=0), maximum=block.max(axis=0))
    return apply_scale(ds, params), params


def apply_scale(ds: Dataset, params: ScalingParams) -> Dataset:
    """
    Scale with parameters from the training data. Values outside the training range map outside [0, 1]
    """
    block = _feature_block(ds)
    if block.shape[1] != params.minimum.shape[0]:
        raise ShapeError(f'scaling has {params.minimum.shape[0]} features, data has {block.shape[1]}')
    span = params.maximum - params.minimum
    constant = span == 0
    scaled = (block - params.minimum) / np.where(constant, 1.0, span)
    scaled[:, constant] = 0.0
    return _with_feature_block(ds, scaled)


def add_bias(ds: Dataset) -> Dataset:
    """
    Append a constant-1 column named 'bias'
    """
    if ds.has_bias:
        return ds
    features = np.hstack([ds.features, np.ones((ds.n, 1))])
    return replace(ds, features=features, feature_names=ds.feature_names + [BIAS_NAME], has_bias=True)


def _simplex(vertices: int) -> np.ndarray:
    """
    vertices of a regular simplex with unit edge length in vertices - 1 dimensions
    """
    centered = np.eye(vertices) - 1.0 / vertices
    # rows of centered span a (vertices - 1)-dimensional subspace; express them in an orthonormal basis of it
    _, _, vt = np.linalg.svd(centered)
    coords = centered @ vt[:vertices - 1].T
    return coords / np.sqrt(2.0)


def make_blobs(*, blobs: int, n: int, d: int, separation: float, seed: int) -> Dataset:
    """
    Gaussian blobs with unit variance whose centers are at pairwise distance separation

    :param blobs: number of classes, the centers form a regular simplex so d >= blobs - 1 is required
    :param n: number of rows, classes differ in size by at most one
    :param d: dimension
    :param separation: distance between any two centers
    :param seed: seed
    """
    if blobs < 2:
        raise DataError(f'need at least two blobs, got {blobs}')
    if n < blobs:
        raise DataError(f'{n} rows cannot hold {blobs} blobs')
    if d < max(1, blobs - 1):
        raise DataError(f'{blobs} equidistant blobs need at least {blobs - 1} dimensions, got {d}')
    if separation < 0:
        raise DataError(f'separation must be non-negative, got {separation}')
    centers = np.zeros((blobs, d))
    centers[:, :blobs - 1] = _simplex(blobs) * separation
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % blobs)
    features = centers[labels] + rng.standard_normal((n, d))
    return Dataset(features=features, labels=labels, feature_names=[f'x{i + 1}' for i in range(d)],
                   num_classes=blobs)
