"""Segmentation toolkit for large diffuse contaminants.

Combines gridded multi-scale attention (constant-size tiles over a scale
pyramid with weight-tied upscaling), an orientation-sensitive Gabor attention
operator, and a quartile-gated consensus loss, together with a synthetic
cirrus data generator and a training/evaluation harness.
"""

from .attention import (AffinityMeter, ChannelAttention, GaborAttention,
                        PositionalAttention, TriAttention, track_affinity)
from .data import (DatasetManifest, SplitView, load_sample, make_dataset,
                   save_sample, split_sizes)
from .gabor import GaborBank, GaborConv2d, gabor_filter, make_gabor_bank
from .gridding import (AttentionCost, FeatureFusion, GriddedMultiScaleAttention,
                       MultiScaleFeatures, TileGrid, UpscaleBlock,
                       attention_cost, build_ms_features, tile, untile)
from .losses import (LossConfig, focal_loss, focal_loss_soft, quartile_bands,
                     rounded_focal_loss, super_majority_loss, total_loss)
from .metrics import (coverage_histogram, coverage_kl, dice, iou,
                      prediction_coverage, target_coverage)
from .model import (ArcsinhLayer, CirrusSegModel, ConvBackbone, SegOutputs,
                    ensemble_predict)
from .synth import (IDENTITY_TRANSFORM, AnnotatorSpec, CirrusParams,
                    CirrusSample, apply_transform, augment, default_annotators,
                    generate_cirrus_sample, invert_transform, sample_transform,
                    simulate_consensus)
from .train import (TrainConfig, TrainingDiverged, TrainResult,
                    aggregate_splits, benchmark, build_model, evaluate, infer,
                    load_checkpoint, load_config, save_checkpoint, save_config,
                    train, train_ensemble, validate)

__version__ = "0.1.0"
