"""Test-time training for hyperspectral image super-resolution."""
from .cube import HSICube, band, downsample, downsample_array, load_cube, save_cube
from .metrics import MetricsReport, ergas, mpsnr, psnr_band, rmse
from .model import DESK, PAPER, TINY, ModelConfig, SRModel, build_model, super_resolve
from .ttt import TTTConfig, adapt, ema_update, init_state, ttt_step

__version__ = "0.1.0"

__all__ = [
    "HSICube", "band", "downsample", "downsample_array", "load_cube", "save_cube",
    "MetricsReport", "ergas", "mpsnr", "psnr_band", "rmse",
    "DESK", "PAPER", "TINY", "ModelConfig", "SRModel", "build_model", "super_resolve",
    "TTTConfig", "adapt", "ema_update", "init_state", "ttt_step",
]
