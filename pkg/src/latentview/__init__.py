"""Single-image novel view synthesis by translating DDIM-inverted latents."""

from .camera import Camera, compute_rays, look_at, ray_grid
from .diffusion import InvertedLatent, NoiseSchedule, ddim_invert, ddim_sample
from .estimators import DDIMInverter, NovelViewSynthesizer, TUNetRegressor
from .evaluation import EvalReport, evaluate, synthesize
from .exceptions import CheckpointError, ConfigurationError, DataError, LatentViewError, NumericalError
from .fusion import FusionConfig, fuse_strategy_a, fuse_strategy_b, select_best
from .metrics import psnr, ssim
from .priors import ExternalPriorAdapter, ToyDiffusionPrior, ZeroPrior
from .training import PairDataset, TrainConfig, train_loop, train_step
from .tunet import TUNet, TUNetConfig, desk_config, paper_config, tunet_forward

__version__ = "0.1.0"

__all__ = [
    "Camera", "CheckpointError", "ConfigurationError", "DDIMInverter", "DataError", "EvalReport",
    "ExternalPriorAdapter", "FusionConfig", "InvertedLatent", "LatentViewError", "NoiseSchedule",
    "NovelViewSynthesizer", "NumericalError", "PairDataset", "TUNet", "TUNetConfig", "TUNetRegressor",
    "ToyDiffusionPrior", "TrainConfig", "ZeroPrior", "compute_rays", "ddim_invert", "ddim_sample",
    "desk_config", "evaluate", "fuse_strategy_a", "fuse_strategy_b", "look_at", "paper_config", "psnr",
    "ray_grid", "select_best", "ssim", "synthesize", "train_loop", "train_step", "tunet_forward",
]
