"""Image preprocessing, augmentation, class balancing and batching."""
from .augment import AugmentationPolicy, apply_augmentation, draw_rng, sample_params
from .balance import BalancingPlan, CellPlan, execute_plan, plan_balancing
from .batching import (
    Batch,
    BatchingConfig,
    BatchStream,
    buffer_shuffle,
    encode_label,
    make_batches,
    steps_per_epoch,
)
from .images import DEFAULT_SIZE, decode_and_preprocess, save_image, to_uint8

__all__ = [
    "AugmentationPolicy",
    "Batch",
    "BatchingConfig",
    "BatchStream",
    "BalancingPlan",
    "CellPlan",
    "DEFAULT_SIZE",
    "apply_augmentation",
    "buffer_shuffle",
    "decode_and_preprocess",
    "draw_rng",
    "encode_label",
    "execute_plan",
    "make_batches",
    "plan_balancing",
    "sample_params",
    "save_image",
    "steps_per_epoch",
    "to_uint8",
]
