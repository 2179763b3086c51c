"""Weakly-supervised deformable 3D image registration.

Trains a convolutional network to predict dense displacement fields from
image pairs, supervised only by anatomical label overlap; ships synthetic
phantom generation, training, inference and evaluation tooling.
"""

from .grids import (
    AffineParams,
    DisplacementField,
    GridMeta,
    LabelMask,
    Volume,
    centroid,
    normalize_intensity,
)
from .losses import (
    LossReport,
    MultiscaleConfig,
    bending_energy,
    gaussian_filter,
    l2_gradient_penalty,
    multiscale_cross_entropy,
    multiscale_dice,
    soft_dice,
    total_loss,
)
from .network import NetworkConfig, RegistrationNet, init_parameters, load_checkpoint, save_checkpoint
from .spatial import (
    AffineMagnitude,
    WarpGradients,
    affine_to_ddf,
    aggregate_summands,
    compose,
    displacement_magnitude_map,
    gradient_l2norm_map,
    jacobian_determinant_map,
    random_affine,
    warp,
    warp_gradients,
)
from .volio import read_label, read_volume, write_volume

__version__ = "0.1.0"
