"""Reverse-mode autodiff, layers, survival losses and the training loop."""
from .autodiff import EVAL, TRAIN, Params, Tape, Tensor, backward
from .layers import AffineReluLayer, DropoutLayer
from .losses import CoxLoss, RankingLoss, cox_npll_loss, make_loss, pairwise_ranking_loss
from .training import (GradCheckReport, RunRecord, Split, TrainConfig, TrainOutcome, finite_difference_check,
                       forward, gradient_check_report, predict, sgd_step, train, train_run)

__all__ = [
    "EVAL", "TRAIN", "Params", "Tape", "Tensor", "backward",
    "AffineReluLayer", "DropoutLayer",
    "CoxLoss", "RankingLoss", "cox_npll_loss", "make_loss", "pairwise_ranking_loss",
    "GradCheckReport", "RunRecord", "Split", "TrainConfig", "TrainOutcome", "finite_difference_check",
    "forward", "gradient_check_report", "predict", "sgd_step", "train", "train_run",
]
