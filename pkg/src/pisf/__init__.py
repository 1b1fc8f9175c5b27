"""Physics-informed synthetic data, an unrolled 1D de-aliasing network and multi-coil 2D reconstruction."""
from .arrayio import read_array, write_array
from .metrics import psnr, ssim
from .recon2d import KspaceVolume, ReconOptions, Reconstructor, reconstruct
from .sampling import make_cartesian_1d, make_partial_fourier_1d, make_random_2d
from .unroll import UnrolledDealiaser, UnrolledModel

__version__ = "0.1.0"

__all__ = [
    "KspaceVolume",
    "ReconOptions",
    "Reconstructor",
    "UnrolledDealiaser",
    "UnrolledModel",
    "make_cartesian_1d",
    "make_partial_fourier_1d",
    "make_random_2d",
    "psnr",
    "read_array",
    "reconstruct",
    "ssim",
    "write_array",
]
