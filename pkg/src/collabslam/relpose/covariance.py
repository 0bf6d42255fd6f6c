"""Sampling-based covariance of a rig-to-rig relative pose."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import DegenerateConfiguration, DegenerateSamples
from ..geometry import Pose, pose_delta_vector
from .generalized import MIN_CORRESPONDENCES
from .ransac import PooledMatches, fit_pose, stratified_sample

EIGEN_FLOOR = 1e-6


def floor_eigenvalues(C: np.ndarray, floor: float = EIGEN_FLOOR) -> np.ndarray:
    C = 0.5 * (C + C.T)
    w, V = np.linalg.eigh(C)
    C = (V * np.maximum(w, floor)) @ V.T
    return 0.5 * (C + C.T)


def estimate_covariance(pool: PooledMatches, inlier_mask, T_ref: Pose, rng: np.random.Generator,
                        n_samples: int = 30, floor: float = EIGEN_FLOOR) -> np.ndarray:
    """6x6 covariance of ``[dp; 2 vec(dq)]`` where ``dT = T_ref^-1 * T_sample``.

    Each sample solves the 17-point problem on 17 distinct inliers drawn with
    the same stratification as RANSAC. Eigenvalues are clamped to ``floor``.
    """
    idx = np.flatnonzero(inlier_mask)
    if len(idx) < MIN_CORRESPONDENCES:
        raise DegenerateSamples(f"{len(idx)} inliers, need {MIN_CORRESPONDENCES}")
    strata = [idx[pool.set_id[idx] == i] for i in range(len(pool.keys))]
    deltas = []
    for _ in range(n_samples):
        sample = stratified_sample(strata, rng)
        try:
            T = fit_pose(pool, sample, near=T_ref)
        except DegenerateConfiguration:
            continue
        deltas.append(pose_delta_vector(T_ref, T))
    if len(deltas) < 3:
        raise DegenerateSamples(f"only {len(deltas)} of {n_samples} samples solved")
    C = np.cov(np.array(deltas), rowvar=False)
    return floor_eigenvalues(C, floor) if floor > 0 else 0.5 * (C + C.T)


def information_from_covariance(C: np.ndarray, floor: float = EIGEN_FLOOR) -> np.ndarray:
    W = np.linalg.inv(floor_eigenvalues(C, floor))
    return 0.5 * (W + W.T)


@dataclass
class LoopConstraint:
    """Verified relative pose between a query and a candidate keyframe."""

    query_kf_id: tuple
    candidate_kf_id: tuple
    T_cq: Pose
    information: np.ndarray
    covariance: np.ndarray
    n_inliers: int = 0
