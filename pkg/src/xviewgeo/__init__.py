"""Orientation- and FoV-robust cross-view retrieval at desk scale.

Ground panoramas are matched to aerial tiles with a dual encoder trained by
InfoNCE.  Besides the usual ground/aerial term, training can add contrastive
terms between a panorama and its shifted or cropped copy, between an aerial
tile and a rotated copy, and between the transformed panorama and the aerial
tile.  ``xviewgeo.data`` renders a synthetic dataset whose road layout is a
North-aligned shortcut, which makes the benefit measurable on a laptop.
"""

from .losses import LossConfig, info_nce, total_loss
from .encoders import EncoderConfig, init_dual_encoder
from .training import TrainConfig, train
from .transforms import TransformSpec, apply_ground_transform, cyclic_shift, fov_crop

__version__ = "0.1.0"

__all__ = [
    "EncoderConfig",
    "LossConfig",
    "TrainConfig",
    "TransformSpec",
    "apply_ground_transform",
    "cyclic_shift",
    "fov_crop",
    "info_nce",
    "init_dual_encoder",
    "total_loss",
    "train",
]
