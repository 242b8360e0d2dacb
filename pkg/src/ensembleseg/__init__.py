"""Semi-supervised segmentation with shrinking ensembles of sub-models and fused pseudo labels."""
from .core import Mask, ProbMap, RasterImage, Sample, binarize, validate_probmap
from .fusion import fuse, generate_pseudo_labels, image_weights, normalize_weights, raw_weights, rescale_weights
from .kernels import BACKEND as KERNEL_BACKEND
from .schedule import assign_subsets, plan_levels, select_parents

__version__ = "0.1.0"
