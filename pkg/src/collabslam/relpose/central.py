"""Central (single camera pair) epipolar geometry on bearing vectors."""
from __future__ import annotations

import numpy as np

from ..errors import SetRejected
from ..geometry import skew

MIN_PREFILTER_INLIERS = 30


def essential_from_pose(R, t) -> np.ndarray:
    """E with ``f2^T E f1 = 0`` for ``x2 = R x1 + t``."""
    return skew(t) @ R


def sampson_signed(E, f1, f2) -> np.ndarray:
    """Signed first-order angular distance (rad) of bearing pairs to ``f2^T E f1 = 0``.

    The algebraic residual is divided by the norm of its gradient restricted to
    the tangent planes of both unit spheres.
    """
    Ef1 = f1 @ E.T
    Etf2 = f2 @ E
    r = np.einsum("ij,ij->i", f2, Ef1)
    g2 = Ef1 - f2 * r[:, None]
    g1 = Etf2 - f1 * r[:, None]
    den = np.sqrt(np.einsum("ij,ij->i", g1, g1) + np.einsum("ij,ij->i", g2, g2))
    return r / np.maximum(den, 1e-15)


def sampson_angular(E, f1, f2) -> np.ndarray:
    return np.abs(sampson_signed(E, f1, f2))


def rotation_only_angular(R, f1, f2) -> np.ndarray:
    c = np.clip(np.einsum("ij,ij->i", f2, f1 @ R.T), -1.0, 1.0)
    return np.arccos(c)


def pair_error(R, t, f1, f2, min_baseline: float = 1e-9, signed: bool = False) -> np.ndarray:
    """Angular error of bearings under relative pose ``x2 = R x1 + t``.

    Falls back to the angle between rotated bearings for a vanishing baseline.
    """
    if np.linalg.norm(t) < min_baseline:
        return rotation_only_angular(R, f1, f2)
    r = sampson_signed(essential_from_pose(R, t), f1, f2)
    return r if signed else np.abs(r)


def eight_point(f1, f2) -> np.ndarray:
    """Linear essential matrix from >= 8 bearing pairs, projected to the essential manifold."""
    A = np.einsum("ni,nj->nij", f2, f1).reshape(len(f1), 9)
    _, _, Vt = np.linalg.svd(A)
    E = Vt[-1].reshape(3, 3)
    U, _, Vt = np.linalg.svd(E)
    return U @ np.diag([1.0, 1.0, 0.0]) @ Vt


def ransac_iterations(inlier_ratio: float, sample_size: int, confidence: float, cap: int) -> int:
    w = inlier_ratio ** sample_size
    if w >= 1.0:
        return 1
    denom = np.log1p(-w)
    if w <= 0.0 or denom == 0.0:
        return cap
    return int(min(cap, np.ceil(np.log(1 - confidence) / denom)))


def essential_ransac(f1, f2, threshold: float, rng: np.random.Generator,
                     confidence: float = 0.99, max_iterations: int = 1000):
    """Returns (E, inlier mask, iterations). Requires at least 8 pairs."""
    n = len(f1)
    best_mask = np.zeros(n, bool)
    best_E = None
    needed = max_iterations
    it = 0
    while it < needed:
        it += 1
        idx = rng.choice(n, 8, replace=False)
        E = eight_point(f1[idx], f2[idx])
        mask = sampson_angular(E, f1, f2) < threshold
        if mask.sum() > best_mask.sum():
            best_mask, best_E = mask, E
            needed = ransac_iterations(mask.mean(), 8, confidence, max_iterations)
    # local refit on the consensus set
    for _ in range(2):
        if best_mask.sum() < 8:
            break
        E = eight_point(f1[best_mask], f2[best_mask])
        mask = sampson_angular(E, f1, f2) < threshold
        if mask.sum() < best_mask.sum():
            break
        best_mask, best_E = mask, E
    return best_E, best_mask, it


def central_prefilter(f1, f2, threshold: float, rng: np.random.Generator, *,
                      min_inliers: int = MIN_PREFILTER_INLIERS, confidence: float = 0.99,
                      max_iterations: int = 1000, pair=None) -> np.ndarray:
    """Inlier mask of one correspondence set; raises SetRejected below ``min_inliers``."""
    f1 = np.asarray(f1, dtype=float)
    f2 = np.asarray(f2, dtype=float)
    if len(f1) < 8:
        raise SetRejected(f"set {pair}: only {len(f1)} correspondences", pair, 0)
    _, mask, _ = essential_ransac(f1, f2, threshold, rng, confidence, max_iterations)
    if mask.sum() < min_inliers:
        raise SetRejected(f"set {pair}: {int(mask.sum())} inliers < {min_inliers}", pair, int(mask.sum()))
    return mask
