"""Toy-scale probabilistic diffusion models with exact oracles, plus FID,
improved precision/recall and semivariogram evaluation for single-channel
images."""

from .dataio import Dataset, NormalizationRecord, normalize, rescale_generated, synth_gaussian, synth_grf
from .denoiser import Condition, DenoiserNet, NetConfig, NoisePrediction, OracleDenoiser, oracle_predict
from .diffusion import GaussianMoments, ImportanceSampler, forward_marginal, forward_step, gaussian_kl, hybrid_loss, posterior, vlb_term
from .metrics import FeatureSet, Variogram, fid, improved_pr, semivariogram
from .sampler import SamplerConfig, ancestral_step, ddim_step, reverse_mean_from_eps, sample
from .schedule import BetaSchedule, make_schedule, respace

__version__ = "0.1.0"
