"""Survival analysis with multimodal fusion: metrics, elastic-net Cox, and small fusion networks."""
from .coxnet import CoxnetConfig, CoxnetModel, fit_path, lambda_max, predict_risk, select_lambda
from .data import Cohort, SyntheticConfig, generate_synthetic, load_cohort, save_cohort, stratified_splits
from .fusion import FusionSpec, ModalitySpec, build_graph, early_fuse, late_fuse_risks
from .survival import (HALF, STRICT, SurvivalDataset, SurvivalRecord, concordance_index, default_grid,
                       kaplan_meier, td_auc)

__version__ = "0.1.0"

__all__ = [
    "CoxnetConfig", "CoxnetModel", "fit_path", "lambda_max", "predict_risk", "select_lambda",
    "Cohort", "SyntheticConfig", "generate_synthetic", "load_cohort", "save_cohort", "stratified_splits",
    "FusionSpec", "ModalitySpec", "build_graph", "early_fuse", "late_fuse_risks",
    "HALF", "STRICT", "SurvivalDataset", "SurvivalRecord", "concordance_index", "default_grid",
    "kaplan_meier", "td_auc",
]
