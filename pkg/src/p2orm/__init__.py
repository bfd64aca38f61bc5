"""Pixel-pair occlusion relationship maps.

Label generation from depth and normals, occlusion boundaries and
orientations, boundary/depth evaluation, the refinement losses and a direct
depth-refinement optimizer, plus analytic synthetic scenes.
"""

from .geometry import CameraIntrinsics, TangentPlane, backproject, project
from .relation import DEFAULT_DELTA, Inclination, ProbRelationMap, RelationMap, compute_p2orm, estimate_normals
from .derive import (BoundaryMap, OrientationMap, boundary_from_prob_relation, boundary_from_relation, depth_edges,
                     nms_thin, orientation_from_relation, threshold_boundary)
from .metrics import depth_metrics, edge_metrics, match_boundaries, opr_curve, summarize
from .losses import RefineLossConfig, class_balanced_ce, refine_loss
from .refine import RefineConfig, refine_depth
from .synth import make_scene, oracle_relation, render, scene_catalog

__version__ = "0.1.0"
