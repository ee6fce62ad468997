"""Progression score model for longitudinal multi-voxel imaging data."""

from .data import Dataset, Visit, VoxelGrid, load_dataset, save_dataset, validate_dataset
from .diagnostics import bland_altman, empirical_semivariogram, fit_semivariogram
from .em import FitConfig, FittedModel, aic, fit, marginal_loglik, predict_ps, predict_traj, standardize
from .errors import DataError, DegenerateScoresError, NumericalError, StandardizationError
from .inference import BootstrapSamples, HypothesisResult, bootstrap, ci, roi_trajectory, test_level, test_rate
from .lme import LmeVoxelFit, fit_lme, fit_lme_voxel, lme_model_summary
from .params import ModelParams
from .simulation import SimDesign, SimTruth, cosine_similarity, percent_correct, simulate
from .spatial import KernelFamily, NoiseCov, build_correlation, correlation, nu_from_v, v_from_nu

__version__ = "0.1.0"
