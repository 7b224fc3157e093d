"""DFAlign: residual background-suppress diffusion for open-vocabulary
temporal action detection on synthetic 1-D feature sequences."""

from .config import RunConfig, default_config, load_config, config_hash
from .data import Annotation, CategorySplit, VideoSample, generate_dataset
from .detect import Proposal, average_precision, mean_ap, soft_nms, tiou
from .diffusion import (DenoiserNet, OracleDenoiser, forward_sample,
                        infer_foreground, mc_verify, residual, reverse_step)
from .numerics import Adam, Parameter, Tensor, finite_diff_check
from .schedule import DiffusionSchedule, make_schedule

__version__ = "0.1.0"

__all__ = [
    "Adam", "Annotation", "CategorySplit", "DenoiserNet", "DiffusionSchedule",
    "OracleDenoiser", "Parameter", "Proposal", "RunConfig", "Tensor",
    "VideoSample", "average_precision", "config_hash", "default_config",
    "finite_diff_check", "forward_sample", "generate_dataset",
    "infer_foreground", "load_config", "make_schedule", "mc_verify",
    "mean_ap", "residual", "reverse_step", "soft_nms", "tiou",
]
