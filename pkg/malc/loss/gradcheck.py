"""
Finite-difference check of the analytic loss gradient on random small instances
"""
import logging
from typing import Sequence, Tuple

import numpy as np
from pydantic import BaseModel

from malc.data import BlackboxPredictions, ClassPartition, Dataset, partition_indices
from malc.errors import NonSmoothLossError
from malc.loss import ModelParams, PhiKind, loss_eval, loss_grad

log = logging.getLogger(__name__)

__all__ = ['GradCheckReport', 'random_instance', 'finite_difference', 'relative_error', 'gradient_check']

# scaled error of a coordinate: |analytic - numeric| / max(1, |analytic|, |numeric|);
# absolute below magnitude 1, relative above
REL_TOL = 1e-5


class GradCheckReport(BaseModel):
    phi: PhiKind
    instances: int
    max_scaled_error: float
    #: seed of the instance with the largest error
    worst_seed: int

    @property
    def passed(self) -> bool:
        return self.max_scaled_error <= REL_TOL


def random_instance(rng: np.random.Generator, *, n_max: int = 20, d_max: int = 5,
                    classes: Sequence[int] = (2, 3, 5)) -> Tuple[Dataset, BlackboxPredictions, ClassPartition,
                                                                 ModelParams]:
    """
    random dataset, black-box predictions, partition and parameters with theta >= 0
    """
    num_classes = int(rng.choice(classes))
    n = int(rng.integers(1, n_max + 1))
    d = int(rng.integers(1, d_max + 1))
    labels = rng.integers(0, num_classes, size=n)
    # keep the black-box right about 2/3 of the time so that both branches show up
    wrong = rng.random(n) < 1 / 3
    preds = np.where(wrong, (labels + rng.integers(1, num_classes, size=n)) % num_classes, labels)
    ds = Dataset(features=rng.standard_normal((n, d)), labels=labels, feature_names=[f'x{i + 1}' for i in range(d)],
                 num_classes=num_classes)
    bb = BlackboxPredictions(preds=preds, provenance='random')
    part = partition_indices(ds.labels, bb, num_classes=num_classes)
    params = ModelParams(w=rng.standard_normal((num_classes, d)), theta=rng.uniform(0.0, 1.0, size=num_classes))
    return ds, bb, part, params


def finite_difference(params: ModelParams, ds: Dataset, part: ClassPartition, phi: PhiKind,
                      h: float = 1e-5) -> np.ndarray:
    """
    central differences of the loss w.r.t. every coordinate of the flattened parameters
    """
    x0 = params.flatten()
    grad = np.zeros_like(x0)
    for j in range(x0.size):
        x = x0.copy()
        x[j] = x0[j] + h
        f_plus = loss_eval(ModelParams.unflatten(x, params.num_classes, params.dim), ds, part, phi)
        x[j] = x0[j] - h
        f_minus = loss_eval(ModelParams.unflatten(x, params.num_classes, params.dim), ds, part, phi)
        grad[j] = (f_plus - f_minus) / (2 * h)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    """
    Scaled error per coordinate. The denominator is floored at 1, so for gradients below 1 in magnitude this
    is the absolute error
    """
    scale = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / scale


def gradient_check(phi: PhiKind = PhiKind.smooth_hinge, *, instances: int = 100, seed: int = 0,
                   h: float = 1e-5) -> GradCheckReport:
    """
    Compare loss_grad with central differences on random instances (n <= 20, d <= 5, K in {2, 3, 5})

    :param phi: loss kind, must be smooth
    :param instances: number of random instances; instance i uses seed + i
    :param seed: base seed
    :param h: finite difference step
    """
    phi = PhiKind(phi)
    if not phi.smooth:
        raise NonSmoothLossError()
    worst, worst_seed = 0.0, seed
    for i in range(instances):
        instance_seed = seed + i
        ds, _, part, params = random_instance(np.random.default_rng(instance_seed))
        analytic = loss_grad(params, ds, part, phi).flatten()
        numeric = finite_difference(params, ds, part, phi, h=h)
        err = float(relative_error(analytic, numeric).max())
        log.debug(f'gradient_check: seed {instance_seed}, n={ds.n}, d={ds.d}, K={ds.num_classes}: {err:.3e}')
        if err > worst:
            worst, worst_seed = err, instance_seed
    return GradCheckReport(phi=phi, instances=instances, max_scaled_error=worst, worst_seed=worst_seed)
