"""Adversarial semi-supervised semantic segmentation at desk scale."""

from .maps import (IGNORE, LOG_EPS, argmax_labels, bilinear_resize,
                   one_hot_encode, threshold_mask)
from .data import (AugmentConfig, Batch, DatasetSplit, Sample, augment,
                   generate_shapes_dataset, interleave_batches,
                   load_folder_dataset, save_folder_dataset, split_labeled)
from .losses import (HyperParams, LossValue, build_self_taught_target, loss_adv,
                     loss_ce, loss_discriminator, loss_semi, loss_seg_total)
from .networks import (DiscNetConfig, Discriminator, SegNetConfig,
                       SegmentationNet, build_discriminator,
                       build_segmentation_network, scale_scheme)
from .trainer import TrainConfig, Trainer, poly_lr, train
from .evaluate import confusion, grad_check, mean_iou, selected_pixel_stats

__version__ = "0.1.0"
