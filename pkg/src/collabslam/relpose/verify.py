"""Full geometric verification of a loop candidate, plus replayable job files."""
from __future__ import annotations

import json
import time
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from ..errors import CorruptJobFile
from ..geometry import Pose
from ..keyframe import Keyframe, PinholeCamera
from ..matching import match_rigs
from .central import MIN_PREFILTER_INLIERS, central_prefilter
from .covariance import LoopConstraint, estimate_covariance, information_from_covariance
from .ransac import MIN_LOOP_INLIERS, PooledMatches, RelPoseResult, ransac_17pt
from .rig import MultiCameraRig

JOB_FORMAT_VERSION = 1


@dataclass
class VerificationConfig:
    max_hamming: int = 64
    prefilter_threshold_deg: float = 0.35
    prefilter_confidence: float = 0.99
    prefilter_max_iterations: int = 1000
    min_prefilter_inliers: int = MIN_PREFILTER_INLIERS
    ransac_threshold_deg: float = 0.35
    ransac_confidence: float = 0.99
    ransac_max_iterations: int = 500
    min_loop_inliers: int = MIN_LOOP_INLIERS
    covariance_samples: int = 30
    eigen_floor: float = 1e-6


def job_seed(base_seed: int, query_id, candidate_id) -> int:
    """Deterministic per-job seed, independent of processing order."""
    return zlib.crc32(json.dumps([base_seed, list(query_id), list(candidate_id)]).encode())


def prefilter_sets(rig_q, rig_c, sets: dict, config: VerificationConfig, rng) -> dict:
    """Inlier subset of each correspondence set; raises SetRejected on the first bad set."""
    thr = np.deg2rad(config.prefilter_threshold_deg)
    out = {}
    for (a, b) in sorted(sets):
        m = np.asarray(sets[(a, b)], dtype=np.int64).reshape(-1, 3)
        fq = rig_q.rays[a][m[:, 0]] if len(m) else np.zeros((0, 3))
        fc = rig_c.rays[b][m[:, 1]] if len(m) else np.zeros((0, 3))
        mask = central_prefilter(fq, fc, thr, rng, min_inliers=config.min_prefilter_inliers,
                                 confidence=config.prefilter_confidence,
                                 max_iterations=config.prefilter_max_iterations, pair=(a, b))
        out[(a, b)] = m[mask]
    return out


def verify_loop(rig_q: MultiCameraRig, rig_c: MultiCameraRig, config: VerificationConfig | None = None,
                rng=None, sets: dict | None = None):
    """Match, pre-filter, 17-point RANSAC and covariance for one rig pair.

    Returns ``(LoopConstraint, RelPoseResult, timings)``; timings are seconds per
    stage. Rejections propagate as SetRejected / VerificationFailed /
    DegenerateSamples.
    """
    config = config or VerificationConfig()
    rng = rng if rng is not None else np.random.default_rng(0)
    timings = {}
    t0 = time.perf_counter()
    if sets is None:
        sets = match_rigs(rig_q, rig_c, config.max_hamming)
    t1 = time.perf_counter()
    timings["matching"] = t1 - t0
    filtered = prefilter_sets(rig_q, rig_c, sets, config, rng)
    t2 = time.perf_counter()
    timings["prefilter"] = t2 - t1
    pool = PooledMatches(rig_q, rig_c, filtered)
    result = ransac_17pt(pool, rng, threshold_deg=config.ransac_threshold_deg,
                         confidence=config.ransac_confidence, max_iterations=config.ransac_max_iterations,
                         min_inliers=config.min_loop_inliers)
    t3 = time.perf_counter()
    timings["ransac"] = t3 - t2
    cov = estimate_covariance(pool, result.inlier_mask, result.T_cq, rng, config.covariance_samples,
                              config.eigen_floor)
    timings["covariance"] = time.perf_counter() - t3
    constraint = LoopConstraint(rig_q.reference_kf_id, rig_c.reference_kf_id, result.T_cq,
                                information_from_covariance(cov, config.eigen_floor), cov,
                                result.n_inliers)
    return constraint, result, timings


# ---------------------------------------------------------------------------
# job files: npz archive with a JSON header
# ---------------------------------------------------------------------------

def _kf_arrays(prefix, kf: Keyframe, arrays: dict) -> dict:
    arrays[f"{prefix}_kps"] = kf.keypoints
    arrays[f"{prefix}_descs"] = kf.descriptors
    return {"agent_id": kf.agent_id, "seq": kf.seq, "timestamp_ns": kf.timestamp_ns,
            "pose": kf.T_ws_odom.as_array().tolist(), "camera": asdict(kf.camera),
            "descriptor_type": kf.descriptor_type}


def _rig_to_json(name, rig: MultiCameraRig, arrays) -> dict:
    return {"keyframes": [_kf_arrays(f"{name}{i}", kf, arrays) for i, kf in enumerate(rig.keyframes)],
            "extrinsics": [x.as_array().tolist() for x in rig.extrinsics]}


def _rig_from_json(name, meta, arrays) -> MultiCameraRig:
    kfs = []
    for i, k in enumerate(meta["keyframes"]):
        pose = np.array(k["pose"])
        kfs.append(Keyframe(k["agent_id"], k["seq"], k["timestamp_ns"], Pose(pose[:4], pose[4:]),
                            PinholeCamera(**k["camera"]), arrays[f"{name}{i}_kps"],
                            arrays[f"{name}{i}_descs"], k["descriptor_type"]))
    ext = tuple(Pose(np.array(x)[:4], np.array(x)[4:]) for x in meta["extrinsics"])
    return MultiCameraRig(tuple(kfs), ext)


def save_job(path, rig_q, rig_c, config: VerificationConfig, seed: int, *, sets=None,
             result: RelPoseResult | None = None, constraint: LoopConstraint | None = None):
    arrays = {}
    meta = {"version": JOB_FORMAT_VERSION, "seed": int(seed), "config": asdict(config),
            "rig_q": _rig_to_json("q", rig_q, arrays), "rig_c": _rig_to_json("c", rig_c, arrays)}
    if sets is not None:
        meta["set_keys"] = [list(k) for k in sorted(sets)]
        for k in sorted(sets):
            arrays[f"set_{k[0]}_{k[1]}"] = np.asarray(sets[k], dtype=np.int64).reshape(-1, 3)
    if result is not None:
        meta["result"] = {"T_cq": result.T_cq.as_array().tolist(), "n_inliers": result.n_inliers,
                          "set_inliers": [[list(k), v] for k, v in result.set_inliers.items()]}
    if constraint is not None:
        arrays["covariance"] = constraint.covariance
    arrays["meta"] = np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8)
    with open(path, "wb") as f:
        np.savez_compressed(f, **arrays)


@dataclass
class VerificationJob:
    rig_q: MultiCameraRig
    rig_c: MultiCameraRig
    config: VerificationConfig
    seed: int
    sets: dict | None
    recorded: dict | None


def load_job(path) -> VerificationJob:
    try:
        with np.load(path, allow_pickle=False) as z:
            arrays = {k: z[k] for k in z.files}
        meta = json.loads(arrays["meta"].tobytes().decode())
        if meta.get("version") != JOB_FORMAT_VERSION:
            raise CorruptJobFile(f"unsupported job version {meta.get('version')}")
        rig_q = _rig_from_json("q", meta["rig_q"], arrays)
        rig_c = _rig_from_json("c", meta["rig_c"], arrays)
        sets = None
        if "set_keys" in meta:
            sets = {tuple(k): arrays[f"set_{k[0]}_{k[1]}"] for k in meta["set_keys"]}
        return VerificationJob(rig_q, rig_c, VerificationConfig(**meta["config"]), meta["seed"], sets,
                               meta.get("result"))
    except CorruptJobFile:
        raise
    except Exception as e:  # zip, json, key and shape errors all mean a bad file
        raise CorruptJobFile(f"{path}: {e}") from e
