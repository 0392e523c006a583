"""
The hybrid predictor: K linear agents claim a row when their margin over every competitor reaches their threshold,
all other rows are deferred to the black-box

Also: accuracy/transparency metrics and the schema-versioned JSON model file
"""
import json
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel as PydanticBase, ConfigDict, Field, ValidationError, model_validator

from malc.data import BlackboxPredictions, Dataset, ScalingParams, add_bias, apply_scale
from malc.errors import DataError, ModelFileError, ShapeError
from malc.loss import ModelParams, PhiKind

log = logging.getLogger(__name__)

__all__ = ['TieBreak', 'ModelMetadata', 'HybridModel', 'PredictionOutcome', 'BatchPrediction', 'Metrics',
           'AgentSummary', 'ModelFile', 'SCHEMA_VERSION', 'ZERO_TOL', 'predict_scores', 'margins',
           'predict_batch', 'predict_hybrid', 'transparency', 'count_nonzeros', 'evaluate', 'with_thresholds',
           'describe_model', 'save_model', 'load_model']

SCHEMA_VERSION = 1

# coefficients with |w| <= ZERO_TOL do not count as used features
ZERO_TOL = 1e-8


class BaseModel(PydanticBase):
    @classmethod
    def model_validate(cls, obj: Any, **kwargs):
        try:
            return super().model_validate(obj, **kwargs)
        except ValidationError as e:
            log.error(f'failed to parse {cls.__name__}: {e.error_count()} errors')
            raise e


class TieBreak(str, Enum):
    """
    winner among several claiming agents; only possible if some theta is 0
    """
    lowest_index = 'lowest_index'
    highest_score = 'highest_score'


class ModelMetadata(BaseModel):
    phi: PhiKind = PhiKind.smooth_hinge
    c1: float = Field(default=0.0, ge=0.0)
    c2: float = Field(default=0.0, ge=0.0)
    penalize_bias: bool = False
    #: last weight column belongs to the constant bias feature
    has_bias: bool = False
    tie_break: TieBreak = TieBreak.lowest_index
    #: dataset and black-box file digests, evaluation split, ...
    provenance: Dict[str, str] = Field(default_factory=dict)


@dataclass(frozen=True)
class HybridModel:
    params: ModelParams
    feature_names: List[str]
    scaling: Optional[ScalingParams] = None
    metadata: ModelMetadata = field(default_factory=ModelMetadata)

    def __post_init__(self):
        if len(self.feature_names) != self.params.dim:
            raise ShapeError(f'{len(self.feature_names)} feature names for {self.params.dim} weight columns')
        if np.any(self.params.theta < 0):
            raise ValueError('thresholds must be non-negative')

    @property
    def num_classes(self) -> int:
        return self.params.num_classes

    def transform(self, ds: Dataset) -> Dataset:
        """
        bring raw data into the feature space the model was trained in: scaling, then the bias column
        """
        raw_dim = self.params.dim - int(self.metadata.has_bias)
        if ds.d != raw_dim:
            raise ShapeError(f'model expects {raw_dim} features, data has {ds.d}')
        if self.scaling is not None:
            ds = apply_scale(ds, self.scaling)
        if self.metadata.has_bias:
            ds = add_bias(ds)
        return ds


@dataclass(frozen=True)
class PredictionOutcome:
    #: 0-based class
    label: int
    #: claiming agent or None if the row was deferred to the black-box
    agent: Optional[int]
    scores: np.ndarray
    margins: np.ndarray

    @property
    def deferred(self) -> bool:
        return self.agent is None

    @property
    def source(self) -> str:
        return 'blackbox' if self.agent is None else f'agent({self.agent + 1})'


@dataclass(frozen=True)
class BatchPrediction:
    """
    labels: 0-based output, -1 for deferred rows without a black-box label; agents: claiming agent or -1
    """
    labels: np.ndarray
    agents: np.ndarray
    scores: np.ndarray
    margins: np.ndarray

    @property
    def claimed(self) -> np.ndarray:
        return self.agents >= 0

    @property
    def deferred_rows(self) -> np.ndarray:
        return np.flatnonzero(self.agents < 0)


class Metrics(BaseModel):
    accuracy: float
    transparency: float
    accuracy_on_claimed: float
    accuracy_on_deferred: float
    avg_nonzeros: float
    per_class_claim_rate: List[float]
    #: agreement of the hybrid output with the black-box over all rows
    fidelity: float
    blackbox_accuracy: float
    n: int
    claimed: int
    claimed_correct: int
    deferred_correct: int


class AgentSummary(BaseModel):
    agent: int
    threshold: float
    #: (feature name, coefficient), largest magnitude first
    coefficients: List[Tuple[str, float]]


def predict_scores(params: ModelParams, x: np.ndarray) -> np.ndarray:
    """
    agent scores w_k.x for a d-vector (K scores) or an n x d matrix (n x K scores)
    """
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != params.dim:
        raise ShapeError(f'{x.shape[-1]} features, model has {params.dim}')
    return x @ params.w.T


def margins(scores: np.ndarray) -> np.ndarray:
    """
    score_k - max over j != k of score_j, row-wise
    """
    scores = np.atleast_2d(scores)
    if scores.shape[1] < 2:
        raise ShapeError('margins need at least two classes')
    top = scores.max(axis=1)
    second = np.partition(scores, scores.shape[1] - 2, axis=1)[:, -2]
    result = scores - top[:, None]
    rows = np.arange(scores.shape[0])
    leader = scores.argmax(axis=1)
    result[rows, leader] = top - second
    return result


def predict_batch(model: HybridModel, x: np.ndarray, bb: Optional[np.ndarray] = None) -> BatchPrediction:
    """
    Decision rule over the rows of x (already transformed into the model's feature space)

    :param model: hybrid model
    :param x: n x d matrix
    :param bb: 0-based black-box labels for the rows; without them deferred rows get label -1
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    scores = predict_scores(model.params, x)
    row_margins = margins(scores)
    claimants = row_margins >= model.params.theta[None, :]
    claimed = claimants.any(axis=1)
    if model.metadata.tie_break == TieBreak.highest_score:
        winner = np.where(claimants, scores, -np.inf).argmax(axis=1)
    else:
        winner = claimants.argmax(axis=1)
    agents = np.where(claimed, winner, -1)
    if bb is None:
        labels = agents.copy()
    else:
        bb = np.asarray(bb, dtype=np.int64)
        if bb.shape != (x.shape[0],):
            raise ShapeError(f'{bb.shape[0]} black-box labels for {x.shape[0]} rows')
        labels = np.where(claimed, winner, bb)
    return BatchPrediction(labels=labels, agents=agents, scores=scores, margins=row_margins)


def predict_hybrid(model: HybridModel, x: np.ndarray, bb_label: int) -> PredictionOutcome:
    """
    Decision rule for a single d-vector

    :param bb_label: 0-based black-box prediction for x, returned if no agent claims x
    """
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ShapeError('predict_hybrid takes a single feature vector')
    if not 0 <= bb_label < model.num_classes:
        raise DataError(f'black-box label {bb_label + 1} outside 1..{model.num_classes}')
    batch = predict_batch(model, x[None, :], np.array([bb_label]))
    agent = int(batch.agents[0])
    return PredictionOutcome(label=int(batch.labels[0]), agent=None if agent < 0 else agent,
                             scores=batch.scores[0], margins=batch.margins[0])


def transparency(model: HybridModel, x: np.ndarray) -> float:
    """
    share of rows claimed by an agent
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    if x.shape[0] == 0:
        raise ShapeError('transparency of an empty matrix')
    return float(predict_batch(model, x).claimed.mean())


def count_nonzeros(w: np.ndarray, zero_tol: float = ZERO_TOL) -> int:
    return int(np.count_nonzero(np.abs(w) > zero_tol))


def evaluate(model: HybridModel, ds: Dataset, bb: BlackboxPredictions) -> Metrics:
    """
    Metrics of the hybrid on a dataset in the model's feature space

    accuracy = (claimed_correct + deferred_correct) / n holds as integer counts
    """
    if len(bb) != ds.n:
        raise ShapeError(f'{len(bb)} black-box predictions for {ds.n} rows')
    if bb.max_class > model.num_classes:
        raise DataError(f'black-box predicts class {bb.max_class}, model has {model.num_classes} classes')
    if ds.labels.max() >= model.num_classes:
        raise DataError(f'label {ds.labels.max() + 1} outside 1..{model.num_classes}')
    batch = predict_batch(model, ds.features, bb.preds)
    claimed = batch.claimed
    correct = batch.labels == ds.labels
    n = ds.n
    n_claimed = int(claimed.sum())
    claimed_correct = int((correct & claimed).sum())
    deferred_correct = int((correct & ~claimed).sum())
    claims_per_agent = np.bincount(batch.agents[claimed], minlength=model.num_classes)
    return Metrics(accuracy=(claimed_correct + deferred_correct) / n,
                   transparency=n_claimed / n,
                   accuracy_on_claimed=claimed_correct / n_claimed if n_claimed else 0.0,
                   accuracy_on_deferred=deferred_correct / (n - n_claimed) if n_claimed < n else 0.0,
                   avg_nonzeros=count_nonzeros(model.params.w) / model.num_classes,
                   per_class_claim_rate=[float(c) / n for c in claims_per_agent],
                   fidelity=float(np.mean(batch.labels == bb.preds)),
                   blackbox_accuracy=float(np.mean(bb.preds == ds.labels)),
                   n=n, claimed=n_claimed, claimed_correct=claimed_correct, deferred_correct=deferred_correct)


def with_thresholds(model: HybridModel, theta: np.ndarray) -> HybridModel:
    """
    copy of the model with other thresholds
    """
    theta = np.broadcast_to(np.asarray(theta, dtype=float), (model.num_classes,)).copy()
    return replace(model, params=ModelParams(w=model.params.w, theta=theta))


def describe_model(model: HybridModel, top: Optional[int] = None) -> List[AgentSummary]:
    """
    Non-zero coefficients of every agent, largest magnitude first: what characterizes each class

    :param top: keep at most this many coefficients per agent
    """
    summaries = []
    for k in range(model.num_classes):
        row = model.params.w[k]
        order = [j for j in np.argsort(-np.abs(row), kind='stable') if abs(row[j]) > ZERO_TOL]
        if top is not None:
            order = order[:top]
        summaries.append(AgentSummary(agent=k, threshold=float(model.params.theta[k]),
                                      coefficients=[(model.feature_names[j], float(row[j])) for j in order]))
    return summaries


class ScalingFile(BaseModel):
    model_config = ConfigDict(extra='forbid')

    minimum: List[float]
    maximum: List[float]


class ModelFile(BaseModel):
    """
    on-disk model document
    """
    model_config = ConfigDict(extra='forbid')

    version: int
    K: int = Field(ge=2)
    d: int = Field(ge=1)
    phi: PhiKind
    c1: float = Field(ge=0.0)
    c2: float = Field(ge=0.0)
    penalize_bias: bool = False
    has_bias: bool = False
    tie_break: TieBreak
    feature_names: List[str]
    scaling: Optional[ScalingFile] = None
    w: List[List[float]]
    theta: List[float]
    provenance: Dict[str, str] = Field(default_factory=dict)

    @model_validator(mode='after')
    def consistent(self):
        if len(self.feature_names) != self.d:
            raise ValueError(f'feature_names has {len(self.feature_names)} entries, d is {self.d}')
        if len(self.w) != self.K or any(len(row) != self.d for row in self.w):
            raise ValueError(f'w must be {self.K} rows of {self.d} values')
        if len(self.theta) != self.K:
            raise ValueError(f'theta must have {self.K} values')
        if any(t < 0 for t in self.theta):
            raise ValueError('theta must be non-negative')
        if self.scaling is not None:
            raw_dim = self.d - int(self.has_bias)
            if len(self.scaling.minimum) != raw_dim or len(self.scaling.maximum) != raw_dim:
                raise ValueError(f'scaling must cover {raw_dim} features')
        return self

    @classmethod
    def from_model(cls, model: HybridModel) -> 'ModelFile':
        meta = model.metadata
        scaling = None
        if model.scaling is not None:
            scaling = ScalingFile(minimum=model.scaling.minimum.tolist(), maximum=model.scaling.maximum.tolist())
        return cls(version=SCHEMA_VERSION, K=model.num_classes, d=model.params.dim, phi=meta.phi, c1=meta.c1,
                   c2=meta.c2, penalize_bias=meta.penalize_bias, has_bias=meta.has_bias, tie_break=meta.tie_break,
                   feature_names=model.feature_names, scaling=scaling, w=model.params.w.tolist(),
                   theta=model.params.theta.tolist(), provenance=meta.provenance)

    def to_model(self) -> HybridModel:
        scaling = None
        if self.scaling is not None:
            scaling = ScalingParams(minimum=np.array(self.scaling.minimum), maximum=np.array(self.scaling.maximum))
        meta = ModelMetadata(phi=self.phi, c1=self.c1, c2=self.c2, penalize_bias=self.penalize_bias,
                             has_bias=self.has_bias, tie_break=self.tie_break, provenance=self.provenance)
        params = ModelParams(w=np.array(self.w, dtype=float).reshape(self.K, self.d),
                             theta=np.array(self.theta, dtype=float))
        return HybridModel(params=params, feature_names=self.feature_names, scaling=scaling, metadata=meta)


def save_model(model: HybridModel, path: str):
    """
    Write the model as JSON. Floats are written with repr() and read back bit-exactly
    """
    document = ModelFile.from_model(model).model_dump(mode='json')
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(document, f, indent=2)
        f.write('\n')
    log.debug(f'save_model({path}): K={model.num_classes}, d={model.params.dim}')


def load_model(path: str) -> HybridModel:
    """
    Read and validate a model file

    :raises ModelFileError: corrupted file, unsupported version, schema violation
    """
    with open(path, encoding='utf-8') as f:
        text = f.read()
    try:
        document = json.loads(text)
    except json.JSONDecodeError as e:
        raise ModelFileError(f'{path}: corrupted model file: {e}')
    if not isinstance(document, dict):
        raise ModelFileError(f'{path}: corrupted model file: expected a JSON object')
    version = document.get('version')
    if version != SCHEMA_VERSION:
        raise ModelFileError(f'{path}: unsupported model file version {version}, expected {SCHEMA_VERSION}')
    try:
        model_file = ModelFile.model_validate(document)
    except ValidationError as e:
        problems = '; '.join(f'{".".join(map(str, err["loc"])) or "model"}: {err["msg"]}' for err in e.errors())
        raise ModelFileError(f'{path}: invalid model file: {problems}')
    return model_file.to_model()
