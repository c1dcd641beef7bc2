"""Keypoint-guided adversarial inpainting of human figures, desk-scale."""

from .data import (DiskDataset, MaskedSample, StickFigureSpec, detect_pose_blobs,
                   resample_sample, synth_sample)
from .discriminator import PatchDiscriminator, loss_d_baseline, loss_d_mask_aware, loss_g
from .generator import EmaWarmup, Generator, GeneratorConfig, StyleMapper, map_latent
from .masks import composite, corrupt, minpool_mask
from .metrics import (FeatureStats, StatsAccumulator, accumulate_stats, evaluate_oks,
                      frechet_distance, ppl)
from .pose import (COCO_SIGMAS, Keypoints17, PoseMaps, build_pose_maps, encode_keypoints,
                   oks, rasterize_skeleton)
from .projector import (FeaturePreprocess, FrozenFeatureNetwork, ProjectionSet,
                        blur_schedule, build_feature_network, gaussian_blur)
from .trainer import (TrainSchedule, TrainState, advance_stage, build_train_state,
                      load_checkpoint, run_stage, run_training, save_checkpoint, train_step)

__version__ = "0.1.0"
