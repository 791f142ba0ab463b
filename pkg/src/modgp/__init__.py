"""Scalable modulated Gaussian processes: heteroscedastic, mixture and latent-input models."""
from .tensor import RngState  # noqa: F401  (sets float64 as torch default)
from .kernels import SeArdKernel
from .svgp import InducingBlock, NoiseParam, SvgpModel, kl_to_prior, marginals, svgp_elbo, svgp_predict
from .shgp import ShgpModel, shgp_elbo, shgp_expected_loglik, shgp_predict
from .smgp import SmgpModel, concrete_sample, partial_bound, smgp_elbo, smgp_predict
from .slgp import SlgpModel, phi, slgp_elbo_hybrid, slgp_elbo_iwvi, slgp_elbo_vi, slgp_predict
from .data import Dataset, gen_toy, kmeans_init, load_csv, standardize
from .evalkit import PredictiveSampleSet, kde_nll, run_summary
from .training import TrainConfig, adam_train, build_model, load_checkpoint, save_checkpoint

__all__ = [
    "RngState", "SeArdKernel", "InducingBlock", "NoiseParam", "SvgpModel", "kl_to_prior", "marginals",
    "svgp_elbo", "svgp_predict", "ShgpModel", "shgp_elbo", "shgp_expected_loglik", "shgp_predict",
    "SmgpModel", "concrete_sample", "partial_bound", "smgp_elbo", "smgp_predict", "SlgpModel", "phi",
    "slgp_elbo_hybrid", "slgp_elbo_iwvi", "slgp_elbo_vi", "slgp_predict", "Dataset", "gen_toy",
    "kmeans_init", "load_csv", "standardize", "PredictiveSampleSet", "kde_nll", "run_summary",
    "TrainConfig", "adam_train", "build_model", "load_checkpoint", "save_checkpoint",
]
__version__ = "0.1.0"
