"""Brute-force binary descriptor matching with a mutual nearest-neighbour check."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DescriptorTypeMismatch

DEFAULT_MAX_DISTANCE = 64


@dataclass(frozen=True)
class Correspondence:
    kf_a: object
    kp_index_a: int
    kf_b: object
    kp_index_b: int
    distance: int


def hamming_matrix(descs_a: np.ndarray, descs_b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between rows of two uint8 descriptor arrays."""
    a = np.ascontiguousarray(descs_a, dtype=np.uint8)
    b = np.ascontiguousarray(descs_b, dtype=np.uint8)
    if a.shape[1] != b.shape[1]:
        raise DescriptorTypeMismatch(f"descriptor lengths differ: {a.shape[1]} vs {b.shape[1]}")
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)), dtype=np.int64)
    if a.shape[1] % 8 == 0:
        a = a.view(np.uint64)
        b = b.view(np.uint64)
    x = np.bitwise_xor(a[:, None, :], b[None, :, :])
    return np.bitwise_count(x).sum(axis=2, dtype=np.int64)


def hamming(d1, d2) -> int:
    return int(np.bitwise_count(np.bitwise_xor(np.asarray(d1, np.uint8), np.asarray(d2, np.uint8))).sum())


def mutual_matches(dist: np.ndarray, max_distance: int = DEFAULT_MAX_DISTANCE) -> np.ndarray:
    """Index pairs (i, j) that are each other's nearest neighbour within ``max_distance``.

    Ties are broken toward the lowest index, on both sides, which keeps the
    result symmetric under transposition.
    """
    if dist.size == 0:
        return np.zeros((0, 2), dtype=np.int64)
    nn_ab = np.argmin(dist, axis=1)
    nn_ba = np.argmin(dist, axis=0)
    i = np.arange(dist.shape[0])
    ok = (nn_ba[nn_ab] == i) & (dist[i, nn_ab] <= max_distance)
    return np.stack([i[ok], nn_ab[ok]], axis=1)


def match_pair(kps_a, descs_a, kps_b, descs_b, *, kf_a=None, kf_b=None,
               type_a: int = 0, type_b: int = 0,
               max_distance: int = DEFAULT_MAX_DISTANCE) -> list[Correspondence]:
    if type_a != type_b:
        raise DescriptorTypeMismatch(f"descriptor types differ: {type_a} vs {type_b}")
    if len(kps_a) != len(descs_a) or len(kps_b) != len(descs_b):
        raise ValueError("keypoint and descriptor counts differ")
    dist = hamming_matrix(descs_a, descs_b)
    pairs = mutual_matches(dist, max_distance)
    return [Correspondence(kf_a, int(i), kf_b, int(j), int(dist[i, j])) for i, j in pairs]


def match_keyframes(kf_a, kf_b, max_distance: int = DEFAULT_MAX_DISTANCE) -> np.ndarray:
    """Mutual matches between two keyframe-like objects, as an (M, 3) array of (i, j, dist)."""
    if kf_a.descriptor_type != kf_b.descriptor_type:
        raise DescriptorTypeMismatch(
            f"descriptor types differ: {kf_a.descriptor_type} vs {kf_b.descriptor_type}")
    dist = hamming_matrix(kf_a.descriptors, kf_b.descriptors)
    pairs = mutual_matches(dist, max_distance)
    if len(pairs) == 0:
        return np.zeros((0, 3), dtype=np.int64)
    return np.column_stack([pairs, dist[pairs[:, 0], pairs[:, 1]]])


def match_rigs(rig_q, rig_c, max_distance: int = DEFAULT_MAX_DISTANCE) -> dict:
    """One match array per (query member, candidate member) pair, keyed by member indices."""
    sets = {}
    for a, kf_a in enumerate(rig_q.keyframes):
        for b, kf_b in enumerate(rig_c.keyframes):
            sets[(a, b)] = match_keyframes(kf_a, kf_b, max_distance)
    return sets
