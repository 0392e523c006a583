"""
Model-agnostic linear competitors: sparse linear agents that take over part of a black-box classifier's input space
"""
from malc.data import BlackboxPredictions, Dataset, load_blackbox_predictions, load_dataset
from malc.errors import *
from malc.frontier import Frontier, SweepGrid, export_frontier, sweep, train_model
from malc.loss import ModelParams, ObjectiveConfig, PhiKind
from malc.model import HybridModel, Metrics, evaluate, load_model, predict_hybrid, save_model
from malc.optimizer import FitResult, SolverConfig, apg_fit

__version__ = '0.1.0'
