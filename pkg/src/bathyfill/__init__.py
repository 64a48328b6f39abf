"""Seabed depth mapping from refraction-distorted photogrammetry.

Pipeline pieces: synthetic through-water scenes (``refraction``), linear
SVR depth correction (``svr``), an attention U-Net depth regressor
(``network`` / ``training``), the boundary-sensitive weighted loss
(``loss``), raster formats (``rasters``), and evaluation (``metrics``).
"""

from .loss import BswConfig, bsw_rmse, edt, masked_rmse
from .network import NetworkConfig, forward, init_params, load_checkpoint, save_checkpoint
from .rasters import DepthRaster, NormalizationSpec, RgbRaster
from .refraction import CameraPose, SceneConfig, WaterInterface, generate_scene, snell_refract
from .svr import LinearSvr, LinearSvrModel, SvrTrainConfig, grid_search_C, train_svr
from .tensor import Tensor, finite_difference_check
from .training import DepthRegressor, TrainConfig, combine_prediction, predict_raster, train

__all__ = [
    "BswConfig",
    "CameraPose",
    "DepthRaster",
    "DepthRegressor",
    "LinearSvr",
    "LinearSvrModel",
    "NetworkConfig",
    "NormalizationSpec",
    "RgbRaster",
    "SceneConfig",
    "SvrTrainConfig",
    "Tensor",
    "TrainConfig",
    "WaterInterface",
    "bsw_rmse",
    "combine_prediction",
    "edt",
    "finite_difference_check",
    "forward",
    "generate_scene",
    "grid_search_C",
    "init_params",
    "load_checkpoint",
    "masked_rmse",
    "predict_raster",
    "save_checkpoint",
    "snell_refract",
    "train",
    "train_svr",
]

__version__ = "0.1.0"
