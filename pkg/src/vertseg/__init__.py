"""Vertebrae segmentation toolkit: stacked encoder-decoder networks with
multi-scale attention blocks, a CT slice pipeline, a training harness, and
confusion-count evaluation. Pure numpy/scipy, including the autodiff engine."""

from .autodiff import Tensor, no_grad
from .blocks import (ASPP, PSA, BlockConfig, ConvBlock, RandomFeatureParams,
                     SpatialAttention, SqueezeExcite, SqueezeExciteRF,
                     random_feature_map)
from .data import (AugmentationConfig, SliceSample, Volume, augment,
                   extract_slices, load_slice_cache, load_volume,
                   make_synthetic_dataset, normalize_intensity,
                   resample_to_unit_spacing, save_slice_cache, save_volume,
                   split_dataset)
from .evaluation import (AblationResult, ConfusionCounts, MetricsReport,
                         confusion_counts, evaluate, export_qualitative,
                         metrics_from_counts, run_ablation)
from .network import (ModelConfig, NetworkOutput, build_doubleunet_baseline,
                      build_doubleunet_pp, count_parameters, forward,
                      load_model, load_weights, save_weights)
from .training import (Adam, TrainConfig, TrainHistory, TrainingDiverged,
                       bce_dice_loss, checkpoint, lr_at, resume, train)

__version__ = "0.1.0"
