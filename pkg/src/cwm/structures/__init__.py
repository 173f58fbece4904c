"""Counterfactual structure queries: keypoints, flow, segments."""

from .flow import (FlowField, dense_embed, embed_cached, flow_cosine, flow_field, flow_perturbation,
                   flow_to_rgb, gaussian_bump, perturbation_response)
from .keypoints import KeypointSet, extract_keypoints, extract_keypoints_batch, keypoint_action, patch_errors
from .segment import (Movability, SegmentMask, check_constructive, dilate, discover_objects, extract_segment,
                      movability_map, patch_membership, spelke_affinity)

__all__ = [
    "FlowField", "KeypointSet", "Movability", "SegmentMask", "check_constructive", "dense_embed", "dilate",
    "discover_objects", "embed_cached", "extract_keypoints", "extract_keypoints_batch", "extract_segment",
    "flow_cosine", "flow_field", "flow_perturbation", "flow_to_rgb", "gaussian_bump", "keypoint_action",
    "movability_map", "patch_errors", "patch_membership", "perturbation_response", "spelke_affinity",
]
