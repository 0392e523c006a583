"""
Accelerated proximal gradient for the regularised competitor objective

The smooth part is the loss. c2 * |w|_1 and c1 * sum(theta) together with theta >= 0 form the non-smooth part,
both have closed-form proximal operators. Parameters are handled as one flat vector: the K x d weights row by row
followed by the K thresholds.
"""
import csv
import logging
from dataclasses import dataclass, field
from time import perf_counter
from typing import Callable, List, NamedTuple, Optional

import numpy as np
from pydantic import BaseModel, Field

from malc.data import ClassPartition, Dataset
from malc.errors import DivergenceError, NonSmoothLossError, ShapeError
from malc.loss import ModelParams, ObjectiveConfig, l1_mask, lipschitz_bound, loss_eval, loss_grad

log = logging.getLogger(__name__)

__all__ = ['SolverConfig', 'FitResult', 'LineSearchResult', 'prox_w', 'prox_theta', 'line_search', 'apg_fit',
           'proxgrad_reference', 'prox_grad_residual', 'MAX_DOUBLINGS']

# line search gives up after this many increases of the Lipschitz estimate
MAX_DOUBLINGS = 60

# guard of the relative objective change when the objective approaches 0
REL_EPS = 1e-12


class SolverConfig(BaseModel):
    """
    Solver settings. Stops after max_iters or when the relative objective change stayed below rel_tol for
    tol_window consecutive iterations
    """
    max_iters: int = Field(default=10000, ge=1)
    rel_tol: float = Field(default=1e-3, gt=0.0, lt=1.0)
    tol_window: int = Field(default=5, ge=1)
    initial_lipschitz_guess: float = Field(default=1.0, gt=0.0)
    backtrack_factor: float = Field(default=2.0, gt=1.0)
    #: reset momentum whenever the objective increases
    restart: bool = True
    #: halve the Lipschitz estimate after every iteration
    adaptive_decrease: bool = True
    seed: int = 0
    #: write "iter,objective,L,restart" per iteration to this CSV file
    trace_path: Optional[str] = None


@dataclass
class FitResult:
    params: ModelParams
    objective_trace: List[float]
    iterations_run: int
    converged: bool
    wall_time: float
    #: Lipschitz estimate accepted in the last iteration
    lipschitz: float
    restarts: int = field(default=0)

    @property
    def objective(self) -> float:
        return self.objective_trace[-1]


class LineSearchResult(NamedTuple):
    lipschitz: float
    candidate: np.ndarray
    #: smooth part at the candidate
    value: float


def prox_w(v: np.ndarray, step: float, c2: float, penalize_bias: bool = True, has_bias: bool = False) -> np.ndarray:
    """
    soft thresholding: sign(v) * max(0, |v| - step * c2). The bias column (last) passes through unless penalized
    """
    v = np.asarray(v, dtype=float)
    shrunk = np.sign(v) * np.maximum(0.0, np.abs(v) - step * c2)
    if has_bias and not penalize_bias:
        shrunk[..., -1] = v[..., -1]
    return shrunk


def prox_theta(v: np.ndarray, step: float, c1: float) -> np.ndarray:
    """
    prox of step * c1 * sum(theta) restricted to theta >= 0: max(0, v - step * c1)
    """
    return np.maximum(0.0, np.asarray(v, dtype=float) - step * c1)


def line_search(smooth: Callable[[np.ndarray], float], prox: Callable[[np.ndarray, float], np.ndarray],
                point: np.ndarray, value: float, grad: np.ndarray, current_lipschitz: float,
                backtrack_factor: float = 2.0) -> LineSearchResult:
    """
    Backtracking: grow the Lipschitz estimate L by backtrack_factor until the prox point of a gradient step of
    length 1/L lies below the quadratic upper bound of the smooth part around point

    :param smooth: smooth part of the objective
    :param prox: prox(v, step) of the non-smooth part
    :param point: extrapolated point
    :param value: smooth(point)
    :param grad: gradient of smooth at point
    :param current_lipschitz: starting estimate
    :param backtrack_factor: growth factor > 1
    """
    if current_lipschitz <= 0:
        raise ValueError(f'Lipschitz estimate must be positive, got {current_lipschitz}')
    lipschitz = current_lipschitz
    # absorbs rounding in the comparison
    slack = 1e-12 * max(1.0, abs(value))
    for _ in range(MAX_DOUBLINGS + 1):
        candidate = prox(point - grad / lipschitz, 1.0 / lipschitz)
        diff = candidate - point
        candidate_value = smooth(candidate)
        bound = value + float(grad @ diff) + 0.5 * lipschitz * float(diff @ diff)
        if candidate_value <= bound + slack:
            return LineSearchResult(lipschitz=lipschitz, candidate=candidate, value=candidate_value)
        lipschitz *= backtrack_factor
    log.debug(f'line_search: L grew from {current_lipschitz:.4g} to {lipschitz:.4g} without sufficient decrease')
    raise DivergenceError(f'line search exceeded {MAX_DOUBLINGS} increases of the Lipschitz estimate '
                          f'(started at {current_lipschitz})')


class _Problem:
    """
    objective split into smooth and non-smooth part over the flat parameter vector
    """

    def __init__(self, ds: Dataset, part: ClassPartition, cfg: ObjectiveConfig):
        if not cfg.phi.smooth:
            raise NonSmoothLossError()
        self.ds = ds
        self.part = part
        self.cfg = cfg
        self.num_classes = part.num_classes
        self.dim = ds.d
        self.split = self.num_classes * self.dim
        self.mask = l1_mask(self.dim, ds.has_bias, cfg.penalize_bias)

    def params(self, x: np.ndarray) -> ModelParams:
        return ModelParams.unflatten(x, self.num_classes, self.dim)

    def smooth(self, x: np.ndarray) -> float:
        return loss_eval(self.params(x), self.ds, self.part, self.cfg.phi)

    def grad(self, x: np.ndarray) -> np.ndarray:
        g = loss_grad(self.params(x), self.ds, self.part, self.cfg.phi).flatten()
        if not self.cfg.fit_thresholds:
            g[self.split:] = 0.0
        return g

    def non_smooth(self, x: np.ndarray) -> float:
        w = x[:self.split].reshape(self.num_classes, self.dim)
        return self.cfg.c1 * float(x[self.split:].sum()) + self.cfg.c2 * float(np.abs(w[:, self.mask]).sum())

    def prox(self, v: np.ndarray, step: float) -> np.ndarray:
        w = prox_w(v[:self.split].reshape(self.num_classes, self.dim), step, self.cfg.c2,
                   penalize_bias=self.cfg.penalize_bias, has_bias=self.ds.has_bias)
        if self.cfg.fit_thresholds:
            theta = prox_theta(v[self.split:], step, self.cfg.c1)
        else:
            theta = np.zeros(self.num_classes)
        return np.concatenate([w.ravel(), theta])

    def initial(self, init: Optional[ModelParams]) -> np.ndarray:
        if init is None:
            return np.zeros(self.split + self.num_classes)
        if init.w.shape != (self.num_classes, self.dim):
            raise ShapeError(f'initial weights {init.w.shape}, expected {(self.num_classes, self.dim)}')
        if np.any(init.theta < 0):
            raise ValueError('initial thresholds must be non-negative')
        x = init.flatten()
        if not self.cfg.fit_thresholds:
            x[self.split:] = 0.0
        return x

    def objective(self, x: np.ndarray, smooth_value: Optional[float] = None) -> float:
        if smooth_value is None:
            smooth_value = self.smooth(x)
        value = smooth_value + self.non_smooth(x)
        if not np.isfinite(value):
            raise DivergenceError(f'objective is not finite: {value}')
        return value


class _Trace:
    """
    optional per-iteration CSV trace
    """

    def __init__(self, path: Optional[str]):
        self._file = open(path, 'w', newline='', encoding='utf-8') if path else None
        self._writer = None
        if self._file:
            self._writer = csv.writer(self._file)
            self._writer.writerow(['iter', 'objective', 'L', 'restart'])

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc_val, exc_tb):
        if self._file:
            self._file.close()

    def write(self, iteration: int, objective: float, lipschitz: float, restarted: bool):
        if self._writer:
            self._writer.writerow([iteration, repr(objective), repr(lipschitz), int(restarted)])


def apg_fit(ds: Dataset, part: ClassPartition, cfg: ObjectiveConfig, solver: SolverConfig = None,
            init: Optional[ModelParams] = None) -> FitResult:
    """
    Minimize the objective with accelerated proximal gradient

    Momentum y = x_t + (t - 1) / (t + 2) * (x_t - x_{t-1}), backtracking on the Lipschitz estimate, function value
    restart: an iteration that increases the objective is redone as a plain proximal gradient step from x_t.

    :param ds: training data
    :param part: class/correctness partition of ds
    :param cfg: objective configuration, phi must be smooth
    :param solver: solver settings
    :param init: starting point, default w = 0, theta = 0
    """
    solver = solver or SolverConfig()
    problem = _Problem(ds, part, cfg)
    start = perf_counter()

    x = problem.initial(init)
    x_prev = x
    objective = problem.objective(x)
    trace = [objective]
    lipschitz = solver.initial_lipschitz_guess
    lipschitz_floor = solver.initial_lipschitz_guess / 2.0 ** MAX_DOUBLINGS
    t = 1
    streak = 0
    restarts = 0
    converged = False
    iteration = 0
    with _Trace(solver.trace_path) as iteration_trace:
        for iteration in range(1, solver.max_iters + 1):
            beta = (t - 1) / (t + 2)
            y = x + beta * (x - x_prev)
            step = line_search(problem.smooth, problem.prox, y, problem.smooth(y), problem.grad(y), lipschitz,
                               solver.backtrack_factor)
            candidate_objective = problem.objective(step.candidate, step.value)
            restarted = False
            if solver.restart and candidate_objective > objective:
                if beta > 0:
                    restarted = True
                    restarts += 1
                    t = 1
                    log.debug(f'apg_fit: restart at iteration {iteration}')
                    step = line_search(problem.smooth, problem.prox, x, problem.smooth(x), problem.grad(x),
                                       lipschitz, solver.backtrack_factor)
                    candidate_objective = problem.objective(step.candidate, step.value)
                if candidate_objective > objective:
                    # a plain step cannot increase the objective, only rounding can: stay put
                    step = step._replace(candidate=x)
                    candidate_objective = objective
            if not restarted:
                t += 1
            x_prev, x = x, step.candidate
            lipschitz = step.lipschitz
            iteration_trace.write(iteration, candidate_objective, lipschitz, restarted)

            change = abs(candidate_objective - objective) / max(abs(objective), REL_EPS)
            objective = candidate_objective
            trace.append(objective)
            streak = streak + 1 if change < solver.rel_tol else 0
            if iteration % 500 == 0:
                log.debug(f'apg_fit: iteration {iteration}, objective {objective:.8g}, L {lipschitz:.4g}, '
                          f'{restarts} restarts')
            if streak >= solver.tol_window:
                converged = True
                break
            if solver.adaptive_decrease:
                lipschitz = max(lipschitz / 2.0, lipschitz_floor)

    wall_time = perf_counter() - start
    if not converged:
        log.warning(f'apg_fit: c1={cfg.c1}, c2={cfg.c2}: no convergence within {solver.max_iters} iterations')
    log.info(f'apg_fit: c1={cfg.c1}, c2={cfg.c2}: objective {objective:.8g} after {iteration} iterations, '
             f'converged: {converged}, {wall_time:.3f} s')
    params = problem.params(x)
    return FitResult(params=params, objective_trace=trace, iterations_run=iteration, converged=converged,
                     wall_time=wall_time, lipschitz=step.lipschitz, restarts=restarts)


def proxgrad_reference(ds: Dataset, part: ClassPartition, cfg: ObjectiveConfig, *, iterations: int = 200000,
                       step: Optional[float] = None, tol: float = 0.0,
                       init: Optional[ModelParams] = None) -> FitResult:
    """
    Plain proximal gradient with a fixed safe step, no momentum and no line search. Slow, used as an oracle

    :param iterations: iteration count
    :param step: step size, default 1 / global Lipschitz bound of the loss gradient
    :param tol: stop early once an iteration moves the parameters by at most tol (Euclidean)
    """
    problem = _Problem(ds, part, cfg)
    step = step or 1.0 / lipschitz_bound(ds, cfg.phi, problem.num_classes)
    start = perf_counter()
    x = problem.initial(init)
    trace = [problem.objective(x)]
    converged = False
    iteration = 0
    for iteration in range(1, iterations + 1):
        x_new = problem.prox(x - step * problem.grad(x), step)
        moved = float(np.linalg.norm(x_new - x))
        x = x_new
        if moved <= tol:
            converged = True
            break
    trace.append(problem.objective(x))
    return FitResult(params=problem.params(x), objective_trace=trace, iterations_run=iteration, converged=converged,
                     wall_time=perf_counter() - start, lipschitz=1.0 / step)


def prox_grad_residual(ds: Dataset, part: ClassPartition, cfg: ObjectiveConfig, params: ModelParams,
                       lipschitz: float) -> float:
    """
    optimality certificate |x - prox(x - grad / L)| * L, zero exactly at a minimizer
    """
    problem = _Problem(ds, part, cfg)
    x = params.flatten()
    step = 1.0 / lipschitz
    return float(np.linalg.norm(x - problem.prox(x - step * problem.grad(x), step))) / step
