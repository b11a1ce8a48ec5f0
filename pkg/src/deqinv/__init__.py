"""Deep-equilibrium reconstruction for linear inverse problems, in NumPy."""

from .core import DatasetSpec, NoiseSpec, psnr, ssim
from .deq import IterationMap, certify_contraction, reconstruct
from .fixpoint import FixedPointResult, SolverConfig
from .linops import make_blur, make_gaussian_cs, make_mri_mask, spectral_bounds
from .regnet import RegNet, lipschitz_estimate

__version__ = "0.1.0"

__all__ = [
    "DatasetSpec", "NoiseSpec", "psnr", "ssim", "IterationMap", "certify_contraction",
    "reconstruct", "FixedPointResult", "SolverConfig", "make_blur", "make_gaussian_cs",
    "make_mri_mask", "spectral_bounds", "RegNet", "lipschitz_estimate",
]
