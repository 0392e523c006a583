"""
Accuracy/transparency frontier: sweep c1, pick c2 per c1 on a holdout split, refit and evaluate
"""
import csv
import logging
import os
from concurrent.futures.thread import ThreadPoolExecutor
from enum import Enum
from typing import Dict, List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, Field, field_validator

from malc.data import BlackboxPredictions, Dataset, ScalingParams, Split, holdout_split, partition_indices, \
    reconcile_classes
from malc.errors import FrontierError, MalcError
from malc.loss import ModelParams, ObjectiveConfig
from malc.model import HybridModel, Metrics, ModelMetadata, TieBreak, evaluate, save_model
from malc.optimizer import FitResult, SolverConfig, apg_fit

log = logging.getLogger(__name__)

__all__ = ['Spacing', 'SweepGrid', 'FitSummary', 'FrontierPoint', 'Frontier', 'CSV_HEADER', 'train_model',
           'select_c2', 'sweep', 'export_frontier', 'model_file_name']

CSV_HEADER = ['c1', 'c2', 'transparency', 'accuracy', 'avg_nonzeros', 'validation_accuracy', 'converged']


class Spacing(str, Enum):
    log = 'log'
    linear = 'linear'


def _grid(low: float, high: float, count: int, spacing: Spacing) -> List[float]:
    if count == 1:
        return [float(low)]
    if spacing == Spacing.log:
        return [float(v) for v in np.geomspace(low, high, count)]
    return [float(v) for v in np.linspace(low, high, count)]


class SweepGrid(BaseModel):
    c1_values: List[float] = Field(min_length=1)
    c2_candidates: List[float] = Field(min_length=1)
    spacing: Spacing = Spacing.log

    @field_validator('c1_values', 'c2_candidates')
    @classmethod
    def non_negative(cls, values: List[float]) -> List[float]:
        if any(v < 0 for v in values):
            raise ValueError('grid values must be non-negative')
        return values

    @field_validator('c1_values')
    @classmethod
    def ascending(cls, values: List[float]) -> List[float]:
        return sorted(values)

    @classmethod
    def from_ranges(cls, *, c1_range: Tuple[float, float] = (0.005, 0.95), c1_count: int = 12,
                    c2_range: Tuple[float, float] = (0.03, 0.25), c2_count: int = 4,
                    spacing: Spacing = Spacing.log) -> 'SweepGrid':
        """
        grid with count values per range; log spacing needs positive bounds
        """
        spacing = Spacing(spacing)
        if spacing == Spacing.log and (min(c1_range) <= 0 or min(c2_range) <= 0):
            raise ValueError('log spacing needs positive range bounds')
        return cls(c1_values=_grid(*c1_range, c1_count, spacing), c2_candidates=_grid(*c2_range, c2_count, spacing),
                   spacing=spacing)


class FitSummary(BaseModel):
    iterations: int = 0
    converged: bool = False
    objective: Optional[float] = None
    wall_time: float = 0.0
    #: reason the point failed
    error: Optional[str] = None

    @classmethod
    def from_fit(cls, fit: FitResult) -> 'FitSummary':
        return cls(iterations=fit.iterations_run, converged=fit.converged, objective=fit.objective,
                   wall_time=fit.wall_time)


class FrontierPoint(BaseModel):
    c1: float
    c2_selected: Optional[float] = None
    validation_accuracy: Optional[float] = None
    metrics: Optional[Metrics] = None
    fit: FitSummary = Field(default_factory=FitSummary)


class Frontier(BaseModel):
    points: List[FrontierPoint]
    #: accuracy of the supplied black-box predictions on the evaluated rows: the transparency-zero end
    blackbox_accuracy: float
    provenance: Dict[str, str] = Field(default_factory=dict)


def train_model(ds: Dataset, bb: BlackboxPredictions, cfg: ObjectiveConfig, solver: SolverConfig = None, *,
                init: Optional[ModelParams] = None, scaling: Optional[ScalingParams] = None,
                tie_break: TieBreak = TieBreak.lowest_index,
                provenance: Optional[Dict[str, str]] = None) -> Tuple[HybridModel, FitResult]:
    """
    partition, fit and wrap the parameters into a hybrid model

    :param ds: training data in the model's feature space
    :param bb: black-box predictions on ds
    :param scaling: scaling that was applied to ds, stored with the model
    """
    ds = reconcile_classes(ds, bb)
    part = partition_indices(ds.labels, bb, num_classes=ds.num_classes)
    fit = apg_fit(ds, part, cfg, solver, init=init)
    metadata = ModelMetadata(phi=cfg.phi, c1=cfg.c1, c2=cfg.c2, penalize_bias=cfg.penalize_bias,
                             has_bias=ds.has_bias, tie_break=tie_break, provenance=dict(provenance or {}))
    model = HybridModel(params=fit.params, feature_names=ds.feature_names, scaling=scaling, metadata=metadata)
    return model, fit


def select_c2(train: Split, c1: float, c2_candidates: List[float], cfg: ObjectiveConfig,
              solver: SolverConfig = None, seed: int = 0, *, holdout: float = 0.2,
              stratified: bool = False) -> Tuple[float, float]:
    """
    Fit one model per c2 candidate on a (1 - holdout) share of train, return the candidate with the best hybrid
    accuracy on the held-out rows. Ties go to the larger c2: the sparser model

    :return: (c2, validation accuracy)
    """
    if not c2_candidates:
        raise ValueError('no c2 candidates')
    ds, bb = train
    ds = reconcile_classes(ds, bb)
    (fit_ds, fit_bb), (val_ds, val_bb) = holdout_split(ds, bb, holdout, seed, stratified=stratified)
    best: Optional[Tuple[float, float]] = None
    for c2 in sorted(c2_candidates, reverse=True):
        candidate_cfg = cfg.model_copy(update={'c1': c1, 'c2': c2})
        try:
            model, _ = train_model(fit_ds, fit_bb, candidate_cfg, solver)
        except MalcError as e:
            log.warning(f'select_c2(c1={c1}): skipping c2={c2}: {e}')
            continue
        accuracy = evaluate(model, val_ds, val_bb).accuracy
        log.debug(f'select_c2(c1={c1}): c2={c2} validation accuracy {accuracy:.4f}')
        if best is None or accuracy > best[1]:
            best = (c2, accuracy)
    if best is None:
        raise FrontierError(f'all {len(c2_candidates)} c2 candidates failed for c1={c1}')
    return best


def model_file_name(c1: float, c2: float) -> str:
    return f'model_c1={c1!r}_c2={c2!r}.json'


def sweep(ds: Dataset, bb: BlackboxPredictions, grid: SweepGrid, cfg: ObjectiveConfig,
          solver: SolverConfig = None, *, jobs: int = 1, seed: int = 0, holdout: float = 0.2,
          stratified: bool = False, evaluation: Optional[Split] = None, warm_start: bool = False,
          model_dir: Optional[str] = None, scaling: Optional[ScalingParams] = None,
          tie_break: TieBreak = TieBreak.lowest_index, provenance: Optional[Dict[str, str]] = None) -> Frontier:
    """
    One frontier point per c1 in ascending order: select c2 on a holdout split, refit on all of ds, evaluate

    Points are independent and run on a pool of jobs threads; the result order does not depend on completion
    order. Failures are recorded in the point's fit summary

    :param ds: training data in the model's feature space
    :param bb: black-box predictions on ds
    :param evaluation: split to report metrics on, default is ds itself
    :param warm_start: start each refit from the previous point's parameters (runs sequentially)
    :param model_dir: write every refit model to this directory
    """
    solver = solver or SolverConfig()
    ds = reconcile_classes(ds, bb)
    eval_ds, eval_bb = evaluation or (ds, bb)
    provenance = dict(provenance or {})
    provenance.setdefault('metrics_split', 'evaluation' if evaluation else 'train')
    if model_dir:
        os.makedirs(model_dir, exist_ok=True)

    def point(c1: float, init: Optional[ModelParams] = None) -> Tuple[FrontierPoint, Optional[ModelParams]]:
        try:
            c2, validation_accuracy = select_c2((ds, bb), c1, grid.c2_candidates, cfg, solver, seed,
                                                holdout=holdout, stratified=stratified)
        except MalcError as e:
            log.warning(f'sweep: c1={c1} failed during c2 selection: {e}')
            return FrontierPoint(c1=c1, fit=FitSummary(error=str(e))), None
        point_cfg = cfg.model_copy(update={'c1': c1, 'c2': c2})
        try:
            model, fit = train_model(ds, bb, point_cfg, solver, init=init, scaling=scaling, tie_break=tie_break,
                                     provenance=provenance)
        except MalcError as e:
            log.warning(f'sweep: c1={c1}, c2={c2} refit failed: {e}')
            return FrontierPoint(c1=c1, c2_selected=c2, validation_accuracy=validation_accuracy,
                                 fit=FitSummary(error=str(e))), None
        try:
            metrics = evaluate(model, eval_ds, eval_bb)
        except MalcError as e:
            log.warning(f'sweep: c1={c1}, c2={c2} evaluation failed: {e}')
            summary = FitSummary.from_fit(fit).model_copy(update={'error': str(e)})
            return FrontierPoint(c1=c1, c2_selected=c2, validation_accuracy=validation_accuracy, fit=summary), None
        if model_dir:
            save_model(model, os.path.join(model_dir, model_file_name(c1, c2)))
        log.info(f'sweep: c1={c1}, c2={c2}: transparency {metrics.transparency:.4f}, '
                 f'accuracy {metrics.accuracy:.4f}')
        return FrontierPoint(c1=c1, c2_selected=c2, validation_accuracy=validation_accuracy, metrics=metrics,
                             fit=FitSummary.from_fit(fit)), model.params

    points: List[FrontierPoint] = []
    if warm_start or jobs <= 1:
        if warm_start and jobs > 1:
            log.info('sweep: warm start runs sequentially')
        init = None
        for c1 in grid.c1_values:
            result, params = point(c1, init)
            points.append(result)
            if warm_start and params is not None:
                init = params
    else:
        with ThreadPoolExecutor(max_workers=jobs, thread_name_prefix='MalcSweep') as pool:
            futures = [pool.submit(point, c1) for c1 in grid.c1_values]
            points = [future.result()[0] for future in futures]
    return Frontier(points=points, blackbox_accuracy=float(np.mean(eval_bb.preds == eval_ds.labels)),
                    provenance=provenance)


def export_frontier(frontier: Frontier, path: str):
    """
    CSV, one row per point in c1 order, floats with full precision. Failed points have empty metric fields
    """
    if not frontier.points:
        raise ValueError('empty frontier')

    def number(value: Optional[float]) -> str:
        return '' if value is None else repr(float(value))

    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.writer(f)
        writer.writerow(CSV_HEADER)
        for p in frontier.points:
            if p.metrics is None:
                measured = ['', '', '']
            else:
                measured = [number(p.metrics.transparency), number(p.metrics.accuracy),
                            number(p.metrics.avg_nonzeros)]
            writer.writerow([number(p.c1), number(p.c2_selected), *measured, number(p.validation_accuracy),
                             str(p.fit.converged).lower()])
