"""ScatSimCLR - self-supervised learning on a fixed wavelet scattering encoder."""

__version__ = "2026.10.0"

from scatsimclr.filterbank import FilterBank, FilterBankConfig, build_filter_bank
from scatsimclr.scattering import ScatterConfig, channel_count, scatter, scatter_color
from scatsimclr.trainer import TrainConfig, Trainer, pretrain, load_checkpoint, save_checkpoint
from scatsimclr.evaluation import ProbeConfig, linear_eval

__all__ = [
    "FilterBank",
    "build_filter_bank",
    "FilterBankConfig",
    "ScatterConfig",
    "scatter_color",
    "channel_count",
    "scatter",
    "TrainConfig",
    "Trainer",
    "pretrain",
    "load_checkpoint",
    "save_checkpoint",
    "ProbeConfig",
    "linear_eval",
]
