"""Learned step-size schedules trained against a Wasserstein-robust worst-case risk."""
from .conic import SolverSettings
from .dro import DroConfig, dro_risk, dro_risk_gradient
from .evaluate import evaluate_schedule, fraction_solved, quantiles
from .families import GdFamily, IstaFamily, PdhgFamily, family_from_dataset
from .pep import pep_value, worst_case_gradient
from .train import TrainConfig, lr_at, train_dr_l2o, train_l2o, train_opt_pep
from .unroll import StepSchedule, run_algorithm, weighted_training_loss

__version__ = "0.1.0"
