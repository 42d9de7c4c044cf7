"""Edge-preserving guidance for semantic segmentation at desk scale."""

from .augment import (AugmentConfig, ClassHistogram, InstancePatch, augment_sample, class_histogram,
                      extract_instances, paste_patch, transform_patch)
from .core import (BinaryEdgeMap, LabelMap, RgbImage, load_label_map, load_rgb_image, save_label_map,
                   save_rgb_image)
from .edge_head import (ConvParams, EdgeLossResult, conv3x3_backward, conv3x3_forward, edge_loss, grad_check,
                        sgd_step, softmax_xent2d)
from .edges import GradientMap, edge_target, sobel_magnitude, threshold_edges
from .metrics import CategoryMap, ConfusionMatrix, accumulate, category_metrics, iou_per_class, mean_iou, report
from .toytrain import TinySegNet, TrainConfig, TrainLog, ablation, boundary_f1, pixel_xent_seg, synth_dataset, train

__version__ = "0.1.0"
