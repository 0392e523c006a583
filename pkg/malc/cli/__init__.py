"""
Command line interface

Exit codes: 0 success, 1 numerical or check failure, 2 usage or I/O error.
Defaults come from malc.env in the working directory (MALC_JOBS, MALC_SEED) and from an optional --config file in
dotenv format whose keys are flag names. Flags given on the command line win.
"""
import argparse
import csv
import json
import logging
import os
import sys
from typing import Dict, List, Optional, Tuple

import numpy as np
from dotenv import dotenv_values, load_dotenv
from pydantic import ValidationError

from malc.blackbox import NoisyOracleConfig, knn_fit, knn_predict_batch, noisy_oracle
from malc.data import BlackboxPredictions, Dataset, ScalingParams, add_bias, apply_scale, file_digest, \
    load_blackbox_predictions, load_dataset, make_blobs, minmax_scale, reconcile_classes, write_blackbox_predictions, \
    write_dataset_csv
from malc.errors import DivergenceError, FrontierError, MalcError
from malc.frontier import Spacing, SweepGrid, export_frontier, sweep, train_model
from malc.loss import ModelParams, ObjectiveConfig, PhiKind
from malc.loss.gradcheck import REL_TOL, gradient_check
from malc.model import TieBreak, describe_model, evaluate, load_model, predict_batch, save_model
from malc.optimizer import SolverConfig

log = logging.getLogger(__name__)

__all__ = ['main', 'build_parser', 'cmd_synth', 'cmd_blackbox', 'cmd_train', 'cmd_predict', 'cmd_evaluate',
           'cmd_frontier', 'cmd_gradcheck', 'cmd_describe']

ENV_FILE = 'malc.env'
JOBS_ENV = 'MALC_JOBS'
SEED_ENV = 'MALC_SEED'

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    pass


def _require(args: argparse.Namespace, *names: str):
    for name in names:
        if getattr(args, name, None) is None:
            raise UsageError(f'--{name.replace("_", "-")} is required')


def _env_int(name: str, default: int) -> int:
    value = os.getenv(name)
    if value is None or not value.strip():
        return default
    try:
        return int(value)
    except ValueError:
        raise UsageError(f'{name} must be an integer, got {value!r}')


def _common_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('-v', '--verbose', action='count', default=0, help='-v info, -vv debug')
    parser.add_argument('-q', '--quiet', action='store_true', help='errors only')
    parser.add_argument('--config', help='dotenv-style file with default flag values')
    parser.add_argument('--seed', type=int, default=_env_int(SEED_ENV, 0),
                        help='seed for every random component')
    return parser


def _data_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--data', help='dataset file')
    parser.add_argument('--format', dest='fmt', choices=['csv', 'svmlight'], default='csv')
    parser.add_argument('--label-column', default='label', help='CSV label column name or index')
    parser.add_argument('--num-features', type=int, help='svmlight dimension, default: largest index seen')
    return parser


def _fit_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(add_help=False)
    parser.add_argument('--blackbox', help='black-box prediction file, one label per line')
    parser.add_argument('--blackbox-provenance', default='user-supplied',
                        help='how the black-box predictions were produced (in-sample, cross-validated, ...)')
    parser.add_argument('--phi', type=PhiKind, choices=list(PhiKind), default=PhiKind.smooth_hinge)
    parser.add_argument('--penalize-bias', action='store_true', help='include the bias column in the L1 penalty')
    parser.add_argument('--no-thresholds', action='store_true',
                        help='hold theta at 0: pure one-vs-all linear fit under the same loss')
    parser.add_argument('--scale', action='store_true', help='min-max scale features to [0, 1]')
    parser.add_argument('--bias', action='store_true', help='append a constant-1 feature')
    parser.add_argument('--tie-break', type=TieBreak, choices=list(TieBreak), default=TieBreak.lowest_index)
    parser.add_argument('--max-iters', type=int, default=10000)
    parser.add_argument('--rel-tol', type=float, default=1e-3)
    parser.add_argument('--tol-window', type=int, default=5)
    parser.add_argument('--lipschitz', type=float, default=1.0, help='initial Lipschitz estimate')
    parser.add_argument('--backtrack-factor', type=float, default=2.0)
    parser.add_argument('--no-restart', action='store_true', help='disable function value restart')
    return parser


def build_parser() -> argparse.ArgumentParser:
    common, data, fit = _common_parser(), _data_parser(), _fit_parser()
    parser = argparse.ArgumentParser(prog='malc', description='Model-agnostic linear competitors')
    sub = parser.add_subparsers(dest='command', required=True)

    p = sub.add_parser('synth', parents=[common], help='gaussian blobs dataset')
    p.add_argument('--blobs', type=int, default=3)
    p.add_argument('--n', type=int, default=3000)
    p.add_argument('--d', type=int, default=2)
    p.add_argument('--separation', type=float, default=4.0)
    p.add_argument('--out', help='dataset CSV')
    p.add_argument('--labels-out', help='true labels in prediction file format')
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser('blackbox', parents=[common, data], help='stand-in black-box predictions')
    p.add_argument('kind', choices=['knn', 'oracle'])
    p.add_argument('--train', help='knn training dataset, default: --data')
    p.add_argument('--k', type=int, default=5)
    p.add_argument('--error-rate', type=float, default=0.1)
    p.add_argument('--out', help='prediction file')
    p.set_defaults(func=cmd_blackbox)

    p = sub.add_parser('train', parents=[common, data, fit], help='fit a hybrid model')
    p.add_argument('--c1', type=float, default=0.1, help='weight of sum(theta)')
    p.add_argument('--c2', type=float, default=0.05, help='weight of |w|_1')
    p.add_argument('--theta-max-init', action='store_true',
                   help='start from theta = 1 with w = 0, every row deferred')
    p.add_argument('--trace', help='per-iteration CSV trace')
    p.add_argument('--strict', action='store_true', help='exit 1 if the solver does not converge')
    p.add_argument('--model-out', help='model file')
    p.add_argument('--metrics-out', help='training metrics as JSON')
    p.set_defaults(func=cmd_train)

    p = sub.add_parser('predict', parents=[common, data], help='apply a hybrid model')
    p.add_argument('--model', help='model file')
    p.add_argument('--blackbox', help='black-box predictions for the rows, used for deferred rows')
    p.add_argument('--out', help='prediction CSV, default stdout')
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser('evaluate', parents=[common, data], help='metrics of a hybrid model')
    p.add_argument('--model', help='model file')
    p.add_argument('--blackbox', help='black-box prediction file')
    p.add_argument('--out', help='metrics JSON')
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser('frontier', parents=[common, data, fit], help='accuracy/transparency frontier')
    p.add_argument('--c1', type=float, nargs='+', help='explicit c1 values, overrides the c1 range')
    p.add_argument('--c2', type=float, nargs='+', help='explicit c2 candidates, overrides the c2 range')
    p.add_argument('--c1-min', type=float, default=0.005)
    p.add_argument('--c1-max', type=float, default=0.95)
    p.add_argument('--c1-count', type=int, default=12)
    p.add_argument('--c2-min', type=float, default=0.03)
    p.add_argument('--c2-max', type=float, default=0.25)
    p.add_argument('--c2-count', type=int, default=4)
    p.add_argument('--spacing', type=Spacing, choices=list(Spacing), default=Spacing.log)
    p.add_argument('--holdout', type=float, default=0.2, help='validation share for c2 selection')
    p.add_argument('--stratified', action='store_true', help='stratified holdout')
    p.add_argument('--warm-start', action='store_true', help='start each refit from the previous point')
    p.add_argument('--jobs', type=int, default=_env_int(JOBS_ENV, 1), help='parallel fits')
    p.add_argument('--eval-data', help='dataset to report metrics on, default: --data')
    p.add_argument('--eval-blackbox', help='black-box predictions for --eval-data')
    p.add_argument('--out', help='frontier CSV')
    p.add_argument('--model-dir', help='write every frontier model to this directory')
    p.set_defaults(func=cmd_frontier)

    p = sub.add_parser('gradcheck', parents=[common], help='finite-difference check of the loss gradient')
    p.add_argument('--phi', type=PhiKind, choices=list(PhiKind), default=PhiKind.smooth_hinge)
    p.add_argument('--instances', type=int, default=100)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser('describe', parents=[common], help='coefficients and thresholds of a model')
    p.add_argument('--model', help='model file')
    p.add_argument('--top', type=int, help='coefficients per class')
    p.set_defaults(func=cmd_describe)
    return parser


def _as_bool(value: str) -> bool:
    if value.strip().lower() in {'1', 'true', 'yes', 'on'}:
        return True
    if value.strip().lower() in {'0', 'false', 'no', 'off', ''}:
        return False
    raise UsageError(f'not a boolean: "{value}"')


def _apply_config(parser: argparse.ArgumentParser, path: str):
    """
    use the values of a dotenv-style file as defaults of every subcommand
    """
    if not os.path.isfile(path):
        raise UsageError(f'--config file {path} not found')
    values = {key.replace('-', '_'): value for key, value in dotenv_values(path).items() if value is not None}
    # noinspection PyProtectedMember
    subparsers = next(action for action in parser._actions if isinstance(action, argparse._SubParsersAction))
    for sub in subparsers.choices.values():
        defaults = {}
        for action in sub._actions:
            if action.dest not in values:
                continue
            value = values[action.dest]
            if action.nargs == 0:
                defaults[action.dest] = _as_bool(value)
            elif action.nargs in ('+', '*'):
                defaults[action.dest] = [action.type(v) if action.type else v for v in value.replace(',', ' ').split()]
            else:
                defaults[action.dest] = action.type(value) if action.type else value
        sub.set_defaults(**defaults)


def _setup_logging(args: argparse.Namespace):
    if args.quiet:
        level = logging.ERROR
    else:
        level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format='%(asctime)s %(levelname)s %(name)s: %(message)s', stream=sys.stderr)


def _label_column(value: str):
    return int(value) if value.lstrip('-').isdigit() else value


def _load_data(args: argparse.Namespace, path: str = None) -> Dataset:
    return load_dataset(path or args.data, fmt=args.fmt, label_column=_label_column(args.label_column),
                        num_features=args.num_features)


def _objective(args: argparse.Namespace, c1: float = 0.0, c2: float = 0.0) -> ObjectiveConfig:
    return ObjectiveConfig(c1=c1, c2=c2, phi=args.phi, penalize_bias=args.penalize_bias,
                           fit_thresholds=not args.no_thresholds)


def _solver(args: argparse.Namespace, trace_path: Optional[str] = None) -> SolverConfig:
    return SolverConfig(max_iters=args.max_iters, rel_tol=args.rel_tol, tol_window=args.tol_window,
                        initial_lipschitz_guess=args.lipschitz, backtrack_factor=args.backtrack_factor,
                        restart=not args.no_restart, seed=args.seed, trace_path=trace_path)


def _training_inputs(args: argparse.Namespace) -> Tuple[Dataset, BlackboxPredictions, Optional[ScalingParams],
                                                        Dict[str, str]]:
    """
    load → reconcile K → optional scaling → optional bias
    """
    _require(args, 'data', 'blackbox')
    ds = _load_data(args)
    bb = load_blackbox_predictions(args.blackbox, ds.n)
    ds = reconcile_classes(ds, bb)
    scaling = None
    if args.scale:
        ds, scaling = minmax_scale(ds)
    if args.bias:
        ds = add_bias(ds)
    provenance = {'dataset_sha256': file_digest(args.data), 'blackbox_sha256': file_digest(args.blackbox),
                  'blackbox_provenance': args.blackbox_provenance}
    return ds, bb, scaling, provenance


def _prepare(ds: Dataset, scaling: Optional[ScalingParams], bias: bool) -> Dataset:
    if scaling is not None:
        ds = apply_scale(ds, scaling)
    if bias:
        ds = add_bias(ds)
    return ds


def cmd_synth(args: argparse.Namespace) -> int:
    _require(args, 'out')
    ds = make_blobs(blobs=args.blobs, n=args.n, d=args.d, separation=args.separation, seed=args.seed)
    write_dataset_csv(ds, args.out)
    if args.labels_out:
        write_blackbox_predictions(args.labels_out, BlackboxPredictions(preds=ds.labels))
    print(f'wrote {ds.n} rows, {ds.d} features, {ds.num_classes} classes to {args.out}')
    return EXIT_OK


def cmd_blackbox(args: argparse.Namespace) -> int:
    _require(args, 'data', 'out')
    ds = _load_data(args)
    if args.kind == 'knn':
        train = _load_data(args, args.train) if args.train else ds
        model = knn_fit(train, args.k)
        bb = BlackboxPredictions(preds=knn_predict_batch(model, ds.features), provenance=f'knn(k={args.k})')
    else:
        bb = noisy_oracle(ds.labels, NoisyOracleConfig(error_rate=args.error_rate, seed=args.seed),
                          num_classes=ds.num_classes)
    write_blackbox_predictions(args.out, bb)
    accuracy = float(np.mean(bb.preds == ds.labels))
    print(f'wrote {len(bb)} {args.kind} predictions to {args.out}, accuracy {accuracy:.4f}')
    return EXIT_OK


def _print_metrics(metrics, out=None):
    out = out or sys.stdout
    print(f'accuracy:      {metrics.accuracy:.6f}', file=out)
    print(f'transparency:  {metrics.transparency:.6f}', file=out)
    print(f'avg_nonzeros:  {metrics.avg_nonzeros:.4f}', file=out)
    print(f'bb accuracy:   {metrics.blackbox_accuracy:.6f}', file=out)


def cmd_train(args: argparse.Namespace) -> int:
    _require(args, 'model_out')
    ds, bb, scaling, provenance = _training_inputs(args)
    cfg = _objective(args, args.c1, args.c2)
    init = None
    if args.theta_max_init:
        init = ModelParams(w=np.zeros((ds.num_classes, ds.d)), theta=np.ones(ds.num_classes))
    model, fit = train_model(ds, bb, cfg, _solver(args, args.trace), init=init, scaling=scaling,
                             tie_break=args.tie_break, provenance=provenance)
    save_model(model, args.model_out)
    metrics = evaluate(model, ds, bb)
    if args.metrics_out:
        with open(args.metrics_out, 'w', encoding='utf-8') as f:
            f.write(metrics.model_dump_json(indent=2))
    _print_metrics(metrics)
    print(f'iterations:    {fit.iterations_run}')
    print(f'converged:     {str(fit.converged).lower()}')
    if not fit.converged:
        print('warning: solver did not converge', file=sys.stderr)
        if args.strict:
            return EXIT_FAILURE
    return EXIT_OK


def cmd_predict(args: argparse.Namespace) -> int:
    _require(args, 'model', 'data')
    model = load_model(args.model)
    ds = model.transform(_load_data(args))
    bb = None
    if args.blackbox:
        bb = load_blackbox_predictions(args.blackbox, ds.n)
        if bb.max_class > model.num_classes:
            raise MalcError(f'{args.blackbox}: black-box predicts class {bb.max_class}, '
                            f'model has {model.num_classes} classes')
    batch = predict_batch(model, ds.features, None if bb is None else bb.preds)
    out = open(args.out, 'w', newline='', encoding='utf-8') if args.out else sys.stdout
    try:
        writer = csv.writer(out)
        writer.writerow(['row', 'label', 'source', 'margin'])
        for row in range(ds.n):
            agent = int(batch.agents[row])
            if agent >= 0:
                label, source, margin = agent + 1, f'agent({agent + 1})', batch.margins[row, agent]
            else:
                label = '' if bb is None else int(bb.preds[row]) + 1
                source = 'deferred' if bb is None else 'blackbox'
                margin = batch.margins[row].max()
            writer.writerow([row, label, source, repr(float(margin))])
    finally:
        if out is not sys.stdout:
            out.close()
    return EXIT_OK


def cmd_evaluate(args: argparse.Namespace) -> int:
    _require(args, 'model', 'data', 'blackbox')
    model = load_model(args.model)
    ds = model.transform(_load_data(args))
    bb = load_blackbox_predictions(args.blackbox, ds.n)
    metrics = evaluate(model, ds, bb)
    if args.out:
        with open(args.out, 'w', encoding='utf-8') as f:
            f.write(metrics.model_dump_json(indent=2))
    _print_metrics(metrics)
    return EXIT_OK


def _grid(args: argparse.Namespace) -> SweepGrid:
    grid = SweepGrid.from_ranges(c1_range=(args.c1_min, args.c1_max), c1_count=args.c1_count,
                                 c2_range=(args.c2_min, args.c2_max), c2_count=args.c2_count,
                                 spacing=args.spacing)
    update = {}
    if args.c1:
        update['c1_values'] = args.c1
    if args.c2:
        update['c2_candidates'] = args.c2
    if update:
        grid = SweepGrid.model_validate({**grid.model_dump(), **update})
    return grid


def cmd_frontier(args: argparse.Namespace) -> int:
    _require(args, 'out')
    ds, bb, scaling, provenance = _training_inputs(args)
    evaluation = None
    if args.eval_data:
        _require(args, 'eval_blackbox')
        eval_ds = _prepare(_load_data(args, args.eval_data), scaling, args.bias)
        eval_bb = load_blackbox_predictions(args.eval_blackbox, eval_ds.n)
        evaluation = (eval_ds, eval_bb)
        provenance['eval_dataset_sha256'] = file_digest(args.eval_data)
    frontier = sweep(ds, bb, _grid(args), _objective(args), _solver(args), jobs=args.jobs, seed=args.seed,
                     holdout=args.holdout, stratified=args.stratified, evaluation=evaluation,
                     warm_start=args.warm_start, model_dir=args.model_dir, scaling=scaling,
                     tie_break=args.tie_break, provenance=provenance)
    export_frontier(frontier, args.out)
    print(f'{"c1":>10} {"c2":>8} {"transp.":>8} {"accuracy":>8} {"nonzero":>8}')
    for p in frontier.points:
        if p.metrics is None:
            print(f'{p.c1:10.4g} failed: {p.fit.error}')
            continue
        print(f'{p.c1:10.4g} {p.c2_selected:8.4g} {p.metrics.transparency:8.4f} {p.metrics.accuracy:8.4f} '
              f'{p.metrics.avg_nonzeros:8.3f}')
    print(f'black-box accuracy: {frontier.blackbox_accuracy:.4f}')
    if all(p.metrics is None for p in frontier.points):
        return EXIT_FAILURE
    return EXIT_OK


def cmd_gradcheck(args: argparse.Namespace) -> int:
    report = gradient_check(args.phi, instances=args.instances, seed=args.seed)
    print(f'phi: {report.phi.value}, instances: {report.instances}, max scaled error: {report.max_scaled_error:.3e}')
    if not report.passed:
        print(f'gradient check failed (tolerance {REL_TOL:g}), worst instance seed: {report.worst_seed}')
        return EXIT_FAILURE
    return EXIT_OK


def cmd_describe(args: argparse.Namespace) -> int:
    _require(args, 'model')
    model = load_model(args.model)
    for summary in describe_model(model, top=args.top):
        print(f'class {summary.agent + 1}: theta = {summary.threshold:.6g}, '
              f'{len(summary.coefficients)} non-zero coefficients')
        for name, value in summary.coefficients:
            print(f'  {name:30} {value:+.6g}')
    return EXIT_OK


def main(argv: Optional[List[str]] = None) -> int:
    load_dotenv(os.path.join(os.getcwd(), ENV_FILE))
    argv = sys.argv[1:] if argv is None else argv
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument('--config')
    known, _ = pre.parse_known_args(argv)
    try:
        parser = build_parser()
        if known.config:
            _apply_config(parser, known.config)
    except UsageError as e:
        print(f'malc: error: {e}', file=sys.stderr)
        return EXIT_USAGE
    # argparse exits with 2 on usage errors
    args = parser.parse_args(argv)
    _setup_logging(args)
    log.debug(f'{args.command}: {", ".join(f"{k}={v}" for k, v in vars(args).items() if k != "func")}')
    try:
        return args.func(args)
    except (DivergenceError, FrontierError) as e:
        print(f'malc: error: {e}', file=sys.stderr)
        return EXIT_FAILURE
    except (UsageError, MalcError, ValidationError, ValueError, OSError) as e:
        print(f'malc: error: {e}', file=sys.stderr)
        return EXIT_USAGE
