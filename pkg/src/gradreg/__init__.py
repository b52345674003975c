"""Gradient-based input perturbations as a regulariser, and a linear model
of misclassification under random input noise."""

from .dataio import Dataset, load_mnist, one_hot, synthetic_blobs
from .model import MlpModel, backprop, forward, init_mlp, load_model, predict, save_model
from .numcore import InvalidParameterError, ShapeError, dual_exponent, lp_norm, make_rng
from .perturb import PerturbSpec, regularizer_value, worst_case_epsilon
from .robust import NoiseModel, min_perturb_stats, predict_missrate
from .train import TrainConfig, train, train_two_stage

__version__ = "0.1.0"
