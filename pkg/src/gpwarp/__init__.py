"""Temporally consistent sampling with image diffusion models: GP noise
warping, equivariance self-guidance, and desk-scale analytic denoisers."""

from .grid import Field, Grid
from .kernels import KernelSpec, rff_eval, rff_eval_grid, rff_sample
from .flow import FlowMap, FlowSequence, flow_compose, flow_translate_pixels
from .warp import SCHEMES, noise_sequence, warp_gp
from .diffusion import Schedule, sample_frame
from .guidance import GuidedRun, sample_video
from .metrics import warping_error

__version__ = "0.1.0"
