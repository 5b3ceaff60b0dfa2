"""Discrete-time competing-risk survival on irregular longitudinal covariates.

A time-aware covariate embedding feeds a factorized (time x covariate)
attention encoder, a learned-query summary and one hazard head per cause.
Everything, including reverse-mode gradients, is plain numpy.
"""
from .datamodel import Cohort, DiscretizationGrid, Feature, FeatureSchema
from .model import ModelConfig, SurvivalModel
from .training import TrainConfig, train

__all__ = ["Cohort", "DiscretizationGrid", "Feature", "FeatureSchema", "ModelConfig",
           "SurvivalModel", "TrainConfig", "train"]
__version__ = "0.1.0"
