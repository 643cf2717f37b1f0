"""Weak-label domain adaptation for semantic segmentation, at desk scale.

A numpy implementation of category-wise adversarial feature alignment driven
by image-level or point weak labels, evaluated on a deterministic synthetic
two-domain benchmark.
"""

__version__ = "0.1.0"

from .losses import (
    LossWeights,
    adversarial_loss,
    category_pool,
    discriminator_domain_loss,
    joint_g_loss,
    point_loss,
    pseudo_weak_labels,
    segmentation_ce,
    smooth_max_pool,
    spatial_softmax,
    weak_label_bce,
)
from .nets import NetOutputs, SegNetConfig, disc_forward, init_networks, seg_forward
from .synthdata import (
    BenchmarkSpec,
    DomainParams,
    SceneBatch,
    generate_scene,
    n_points_from_mask,
    points_from_mask,
    weak_from_mask,
)
from .trainer import RunRecord, TrainConfig, poly_lr, run_experiment
from .metrics import mean_iou, per_class_iou, weak_label_pr
