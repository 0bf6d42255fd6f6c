"""Geometric verification of loop candidates between two multi-camera rigs."""
from .central import central_prefilter, essential_ransac, sampson_angular
from .covariance import LoopConstraint, estimate_covariance, information_from_covariance
from .generalized import generalized_epipolar_residual, rotations_from_essential, solve_17pt
from .ransac import PooledMatches, RelPoseResult, induced_errors, inlier_mask, positive_depth, ransac_17pt
from .rig import MultiCameraRig, build_rig
from .verify import VerificationConfig, load_job, save_job, verify_loop

__all__ = [
    "LoopConstraint", "MultiCameraRig", "PooledMatches", "RelPoseResult", "VerificationConfig",
    "build_rig", "central_prefilter", "essential_ransac", "estimate_covariance",
    "generalized_epipolar_residual", "induced_errors", "information_from_covariance", "inlier_mask",
    "load_job", "positive_depth", "rotations_from_essential",
    "ransac_17pt", "sampson_angular", "save_job", "solve_17pt", "verify_loop",
]
