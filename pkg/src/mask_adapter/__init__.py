"""Mask-adapter open-vocabulary mask classification on a synthetic world."""

from .adapter import AdapterParams, adapter_backward, adapter_forward, init_params
from .estimator import MaskAdapterClassifier, MaskPoolingClassifier
from .extractors import aggregate, classify, mask_crop_embed, mask_pool
from .masks import downsample_masks, iou, iou_matrix, perturb_mask
from .matching import MatchSet, hungarian_matcher, iou_matcher
from .pipeline import (
    EnsembleConfig,
    EvalReport,
    TrainConfig,
    evaluate,
    geometric_ensemble,
    semantic_inference,
    train_mixed,
    train_warmup,
)
from .synthworld import CategoryBank, Scene, WorldConfig, generate_scene, make_category_bank

__version__ = "0.1.0"
