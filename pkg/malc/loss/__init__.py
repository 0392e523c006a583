"""
The competitor loss, its gradient and the regularised objective

For a row i of class k and a competing class j the margin is s = w_k.x_i - w_j.x_i. Rows the black-box gets right
(pos) contribute phi(s + theta_j), rows it gets wrong (neg) contribute phi(s - theta_k). The first branch uses the
competitor's threshold while the decision rule tests theta of the claiming class: the loss is a convex surrogate of
the hybrid's error, not an exact relaxation of it.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np
from pydantic import BaseModel, Field
from scipy.special import expit

from malc.data import ClassPartition, Dataset
from malc.errors import NonSmoothLossError, ShapeError

log = logging.getLogger(__name__)

__all__ = ['PhiKind', 'ModelParams', 'ObjectiveConfig', 'Gradient', 'phi_eval', 'phi_grad', 'phi_curvature',
           'loss_eval', 'loss_eval_reference', 'loss_grad', 'objective_eval', 'l1_mask', 'lipschitz_bound']


class PhiKind(str, Enum):
    hinge = 'hinge'
    smooth_hinge = 'smooth_hinge'
    logistic = 'logistic'

    @property
    def smooth(self) -> bool:
        return self != PhiKind.hinge


@dataclass(frozen=True)
class ModelParams:
    """
    w: K x d weights, one linear agent per row; theta: K claim thresholds
    """
    w: np.ndarray
    theta: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.w, dtype=float)
        theta = np.asarray(self.theta, dtype=float)
        if w.ndim != 2 or theta.shape != (w.shape[0],):
            raise ShapeError(f'weights {w.shape} do not match thresholds {theta.shape}')
        object.__setattr__(self, 'w', w)
        object.__setattr__(self, 'theta', theta)

    @classmethod
    def zeros(cls, num_classes: int, dim: int) -> 'ModelParams':
        return cls(w=np.zeros((num_classes, dim)), theta=np.zeros(num_classes))

    @property
    def num_classes(self) -> int:
        return self.w.shape[0]

    @property
    def dim(self) -> int:
        return self.w.shape[1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.w.ravel(), self.theta])

    @classmethod
    def unflatten(cls, x: np.ndarray, num_classes: int, dim: int) -> 'ModelParams':
        split = num_classes * dim
        return cls(w=x[:split].reshape(num_classes, dim), theta=x[split:])


@dataclass(frozen=True)
class Gradient:
    """
    gradient w.r.t. (w, theta), same shapes as the parameters
    """
    d_w: np.ndarray
    d_theta: np.ndarray

    def flatten(self) -> np.ndarray:
        return np.concatenate([self.d_w.ravel(), self.d_theta])


class ObjectiveConfig(BaseModel):
    """
    loss + c1 * sum(theta) + c2 * |w|_1
    """
    c1: float = Field(default=0.0, ge=0.0)
    c2: float = Field(default=0.0, ge=0.0)
    phi: PhiKind = PhiKind.smooth_hinge
    #: include the bias column in the L1 penalty
    penalize_bias: bool = False
    #: False holds theta at 0: pure one-vs-all fit under the same loss
    fit_thresholds: bool = True


def phi_eval(kind: PhiKind, z):
    """
    hinge (1-z)+, smooth hinge (1-z)+^2 / 2, logistic log(1 + exp(-z)); scalars or arrays
    """
    z = np.asarray(z, dtype=float)
    if kind == PhiKind.hinge:
        r = np.maximum(0.0, 1.0 - z)
    elif kind == PhiKind.smooth_hinge:
        r = 0.5 * np.maximum(0.0, 1.0 - z) ** 2
    else:
        r = np.logaddexp(0.0, -z)
    return r[()] if r.ndim == 0 else r


def phi_grad(kind: PhiKind, z):
    """
    derivative of phi, always <= 0. Hinge has none
    """
    if not PhiKind(kind).smooth:
        raise NonSmoothLossError()
    z = np.asarray(z, dtype=float)
    if kind == PhiKind.smooth_hinge:
        r = -np.maximum(0.0, 1.0 - z)
    else:
        # -1 / (1 + exp(z))
        r = -expit(-z)
    return r[()] if r.ndim == 0 else r


def phi_curvature(kind: PhiKind) -> float:
    """
    upper bound of phi''
    """
    if not PhiKind(kind).smooth:
        raise NonSmoothLossError()
    return 1.0 if kind == PhiKind.smooth_hinge else 0.25


def _check_shapes(params: ModelParams, ds: Dataset, part: ClassPartition):
    if params.dim != ds.d:
        raise ShapeError(f'weights have {params.dim} columns, data has {ds.d} features')
    if params.num_classes != part.num_classes or part.n != ds.n:
        raise ShapeError(f'{params.num_classes} agents, partition has {part.num_classes} classes over {part.n} rows '
                         f'for {ds.n} rows')
    if ds.labels.max() >= params.num_classes:
        raise ShapeError(f'label {ds.labels.max() + 1} exceeds {params.num_classes} agents')


def _arguments(params: ModelParams, ds: Dataset, part: ClassPartition):
    """
    matrix of phi arguments z[i, j] for every row i and competing class j, plus the mask of valid (j != y_i) entries
    """
    scores = ds.features @ params.w.T
    rows = np.arange(ds.n)
    own = scores[rows, ds.labels]
    z = own[:, None] - scores
    pos = part.positive_mask()
    z[pos] += params.theta[None, :]
    z[~pos] -= params.theta[ds.labels[~pos]][:, None]
    competitor = np.ones_like(z, dtype=bool)
    competitor[rows, ds.labels] = False
    return z, competitor, pos


def loss_eval(params: ModelParams, ds: Dataset, part: ClassPartition, phi: PhiKind) -> float:
    """
    vectorised loss, agrees with loss_eval_reference up to floating point reassociation
    """
    _check_shapes(params, ds, part)
    z, competitor, _ = _arguments(params, ds, part)
    return float(np.sum(phi_eval(phi, z[competitor])) / ds.n)


def loss_eval_reference(params: ModelParams, ds: Dataset, part: ClassPartition, phi: PhiKind) -> float:
    """
    literal triple loop (class k, row i, competitor j)
    """
    _check_shapes(params, ds, part)
    w, theta, x = params.w, params.theta, ds.features
    total = 0.0
    for k in range(params.num_classes):
        for i in part.pos[k]:
            for j in range(params.num_classes):
                if j != k:
                    total += float(phi_eval(phi, w[k] @ x[i] - w[j] @ x[i] + theta[j]))
        for i in part.neg[k]:
            for j in range(params.num_classes):
                if j != k:
                    total += float(phi_eval(phi, w[k] @ x[i] - w[j] @ x[i] - theta[k]))
    return total / ds.n


def loss_grad(params: ModelParams, ds: Dataset, part: ClassPartition, phi: PhiKind) -> Gradient:
    """
    analytic gradient of the loss w.r.t. (w, theta)
    """
    if not PhiKind(phi).smooth:
        raise NonSmoothLossError()
    _check_shapes(params, ds, part)
    z, competitor, pos = _arguments(params, ds, part)
    g = np.where(competitor, phi_grad(phi, z), 0.0) / ds.n
    row_sum = g.sum(axis=1)
    rows = np.arange(ds.n)
    # d loss / d score[i, j]: -g for competitors, +sum of the row for the own class
    d_scores = -g
    d_scores[rows, ds.labels] = row_sum
    d_w = d_scores.T @ ds.features
    d_theta = g[pos].sum(axis=0)
    d_theta -= np.bincount(ds.labels[~pos], weights=row_sum[~pos], minlength=params.num_classes)
    return Gradient(d_w=d_w, d_theta=d_theta)


def l1_mask(dim: int, has_bias: bool, penalize_bias: bool) -> np.ndarray:
    """
    columns of w that enter the L1 penalty
    """
    mask = np.ones(dim, dtype=bool)
    if has_bias and not penalize_bias:
        mask[-1] = False
    return mask


def objective_eval(params: ModelParams, ds: Dataset, part: ClassPartition, cfg: ObjectiveConfig) -> float:
    """
    loss + c1 * sum(theta) + c2 * |w|_1
    """
    if np.any(params.theta < 0):
        raise ValueError(f'thresholds must be non-negative, got min {params.theta.min()}')
    mask = l1_mask(params.dim, ds.has_bias, cfg.penalize_bias)
    return (loss_eval(params, ds, part, cfg.phi) + cfg.c1 * float(params.theta.sum()) +
            cfg.c2 * float(np.abs(params.w[:, mask]).sum()))


def lipschitz_bound(ds: Dataset, phi: PhiKind, num_classes: Optional[int] = None) -> float:
    """
    Global Lipschitz constant of the loss gradient

    Every term is phi(a.(w, theta) + c) with |a|^2 = 2 |x_i|^2 + 1, so the Hessian is bounded by
    phi''_max / n * sum over terms of |a|^2
    """
    num_classes = num_classes or ds.num_classes
    sq = 2.0 * np.sum(ds.features ** 2, axis=1) + 1.0
    return phi_curvature(phi) * (num_classes - 1) * float(sq.sum()) / ds.n
