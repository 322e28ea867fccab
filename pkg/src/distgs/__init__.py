"""Distributed 3D Gaussian splatting of isosurfaces extracted from volumes."""
from .core import Camera, Gaussian3D, Image, SplatModel, build_orbital_cameras, project_gaussian
from .errors import DistGSError
from .isosurface import PointCloud, Volume, extract_isosurface, make_volume, seed_gaussians
from .kernels import BACKEND
from .metrics import boundary_band_error, psnr, ssim
from .partition import Partition, merge_models, partition_cloud
from .rasterizer import RenderConfig, backward, render, render_mask
from .trainer import TrainConfig, TrainView, masked_loss, train_partition

__version__ = "0.1.0"

__all__ = [
    "BACKEND", "Camera", "DistGSError", "Gaussian3D", "Image", "Partition", "PointCloud", "RenderConfig",
    "SplatModel", "TrainConfig", "TrainView", "Volume", "backward", "boundary_band_error",
    "build_orbital_cameras", "extract_isosurface", "make_volume", "masked_loss", "merge_models",
    "partition_cloud", "project_gaussian", "psnr", "render", "render_mask", "seed_gaussians", "ssim",
    "train_partition",
]
