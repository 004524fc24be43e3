"""S and MM estimation for balanced linear models with structured covariance."""

from robustmm.estimators.data import Dataset, normalize_weights
from robustmm.estimators.mm import FitResult, MMConfig, mm_fit
from robustmm.estimators.scale import m_scale, m_scale_batch
from robustmm.estimators.scores import (
    Scores,
    evaluate_scores,
    h_matrices,
    objective_Rn,
    score_contributions,
)
from robustmm.estimators.sest import SConfig, SFit, fit_initial_s

__all__ = [
    "Dataset",
    "FitResult",
    "MMConfig",
    "SConfig",
    "SFit",
    "Scores",
    "evaluate_scores",
    "fit_initial_s",
    "h_matrices",
    "m_scale",
    "m_scale_batch",
    "mm_fit",
    "normalize_weights",
    "objective_Rn",
    "score_contributions",
]
