# coding: utf-8
"""SALSA LiDAR place recognition and metric localization."""

__author__ = "SALSA developers"
__copyright__ = "Copyright (C) 2024 SALSA developers"
__license__ = "This software is released under the MIT license cited in " \
              "LICENSE.txt"

from ._backbone import (BackboneConfig, BackboneParams, LocalDescriptorSet,  # noqa
                        attention_groups, extract_local_descriptors)
from ._checkpoint import load_model, save_model  # noqa
from ._config import RunConfig, dump_config, load_config  # noqa
from ._dataset import (ScanDataset, ScanRecord, generate_synthetic,  # noqa
                       load_poses, load_scan, write_poses, write_scan)
from ._descriptor import (AggregatorConfig, AttentionMap, SalsaModel,  # noqa
                          SceneDescriptor, TokenSet, adaptive_pool,
                          count_parameters, describe, mixer,
                          scene_descriptor, select_salient_points,
                          token_fuser)
from ._geometry import (PointCloud, RigidTransform, kabsch,  # noqa
                        pose_error, voxelize)
from ._localization import (CompatibilityGraph, LocalizationConfig,  # noqa
                            MatchSet, PoseEstimate, compatibility_matrix,
                            global_pose, localization_success, match_local,
                            ransac_register, ratio_prune, register_candidate,
                            rerank, spectral_fitness, summarize_localization)
from ._numeric import (PCAWhitener, Parameter, Tensor, apply_whitener,  # noqa
                       backward, finite_diff_check, fit_pca_whitener,
                       power_iteration)
from ._retrieval import (DescriptorDatabase, QueryResult,  # noqa
                         RetrievalConfig, RetrievalMetrics, WhiteningConfig,
                         evaluate_retrieval, f1_max, mrr, recall_at_k,
                         recall_curve)
from ._training import (SGD, Adam, CorrespondenceSet, LossConfig,  # noqa
                        MiningConfig, TrainingConfig, Triplet, augment,
                        compute_descriptors, evaluate_triplets,
                        find_correspondences, local_consistency_loss,
                        make_optimizer, mine_hard_negatives, train_epoch,
                        triplet_loss)
from ._version import __version__  # noqa
