"""Trajectory alignment, ATE, loop-log inspection and verification-job replay."""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass

import numpy as np

from .errors import InsufficientOverlap, VerificationFailed, SetRejected, DegenerateSamples
from .geometry import Pose, compose, rotation_angle

PAIRING_TOLERANCE_S = 0.05


@dataclass
class Trajectory:
    timestamps: np.ndarray     # seconds
    positions: np.ndarray      # (N, 3)
    quats: np.ndarray          # (N, 4) w, x, y, z

    def __len__(self):
        return len(self.timestamps)

    def poses(self) -> list[Pose]:
        return [Pose(q, p) for q, p in zip(self.quats, self.positions)]

    @classmethod
    def from_poses(cls, timestamps_ns, poses) -> "Trajectory":
        return cls(np.asarray(timestamps_ns, dtype=np.float64) / 1e9,
                   np.array([T.p for T in poses]).reshape(-1, 3), np.array([T.q for T in poses]).reshape(-1, 4))


def write_tum(path, timestamps_ns, poses):
    """``timestamp tx ty tz qx qy qz qw`` per line, timestamp in seconds."""
    with open(path, "w") as f:
        for ts, T in zip(timestamps_ns, poses):
            w, x, y, z = T.q
            px, py, pz = T.p
            f.write(f"{int(ts) // 1_000_000_000}.{int(ts) % 1_000_000_000:09d} "
                    f"{px:.9f} {py:.9f} {pz:.9f} {x:.12f} {y:.12f} {z:.12f} {w:.12f}\n")


def read_tum(path) -> Trajectory:
    rows = []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = line.replace(",", " ").split()
            if len(vals) != 8:
                raise ValueError(f"{path}:{ln}: expected 8 columns, got {len(vals)}")
            rows.append([float(v) for v in vals])
    a = np.array(rows).reshape(-1, 8)
    if len(a) > 1 and np.any(np.diff(a[:, 0]) <= 0):
        raise ValueError(f"{path}: timestamps not strictly increasing")
    q = a[:, [7, 4, 5, 6]]
    if len(q) and np.any(np.abs(np.linalg.norm(q, axis=1) - 1) > 1e-6):
        raise ValueError(f"{path}: non-unit quaternion")
    return Trajectory(a[:, 0], a[:, 1:4], q)


def associate(est_t, gt_t, tol: float = PAIRING_TOLERANCE_S):
    """Index pairs (i_est, j_gt) by nearest timestamp within ``tol``; each gt sample used once."""
    est_t, gt_t = np.asarray(est_t), np.asarray(gt_t)
    if len(gt_t) == 0 or len(est_t) == 0:
        return np.zeros(0, int), np.zeros(0, int)
    order = np.argsort(gt_t)
    gs = gt_t[order]
    pos = np.clip(np.searchsorted(gs, est_t), 1, len(gs) - 1) if len(gs) > 1 else np.zeros(len(est_t), int)
    cand = np.stack([pos - 1, pos], 1) if len(gs) > 1 else pos[:, None]
    d = np.abs(gs[cand] - est_t[:, None])
    best = cand[np.arange(len(est_t)), np.argmin(d, axis=1)]
    dist = np.abs(gs[best] - est_t)
    i = np.flatnonzero(dist <= tol)
    j = order[best[i]]
    _, first = np.unique(j, return_index=True)
    keep = np.sort(first)
    return i[keep], j[keep]


def kabsch(src: np.ndarray, dst: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """R, t minimizing sum |R src_i + t - dst_i|^2 (no scale)."""
    mu_s, mu_d = src.mean(0), dst.mean(0)
    H = (src - mu_s).T @ (dst - mu_d)
    U, _, Vt = np.linalg.svd(H)
    D = np.diag([1.0, 1.0, np.sign(np.linalg.det(Vt.T @ U.T)) or 1.0])
    R = Vt.T @ D @ U.T
    return R, mu_d - R @ mu_s


@dataclass
class AlignedPairs:
    T_align: Pose
    estimate: np.ndarray     # aligned estimated positions
    reference: np.ndarray    # matched ground-truth positions
    est_index: np.ndarray
    gt_index: np.ndarray


def align_se3(estimate: Trajectory, ground_truth: Trajectory, tol: float = PAIRING_TOLERANCE_S) -> AlignedPairs:
    i, j = associate(estimate.timestamps, ground_truth.timestamps, tol)
    if len(i) < 3:
        raise InsufficientOverlap(f"only {len(i)} timestamp pairs within {tol * 1e3:.0f} ms")
    src, dst = estimate.positions[i], ground_truth.positions[j]
    R, t = kabsch(src, dst)
    return AlignedPairs(Pose.from_Rt(R, t), src @ R.T + t, dst, i, j)


def ate_rmse(pairs: AlignedPairs) -> float:
    d = pairs.estimate - pairs.reference
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))


JOINT_OFFSET_S = 1e7     # per-agent timestamp shift in joint evaluation, far beyond any run length


def concat(trajs) -> Trajectory:
    """Joint trajectory for multi-agent evaluation.

    Agent k's timestamps are shifted by k * JOINT_OFFSET_S, the same for
    estimate and ground truth, so pairing never crosses agents.
    """
    if not trajs:
        return Trajectory(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
    return Trajectory(np.concatenate([t.timestamps + k * JOINT_OFFSET_S for k, t in enumerate(trajs)]),
                      np.concatenate([t.positions for t in trajs]), np.concatenate([t.quats for t in trajs]))


def joint_ate(estimates: list, truths: list) -> float:
    """One rigid alignment for all agents together."""
    return ate_rmse(align_se3(concat(estimates), concat(truths)))


def per_agent_ate(estimates: list, truths: list) -> float:
    """RMS over all keyframes with every agent aligned separately."""
    sq, n = 0.0, 0
    for e, g in zip(estimates, truths):
        p = align_se3(e, g)
        d = p.estimate - p.reference
        sq += float(np.sum(d * d))
        n += len(d)
    return float(np.sqrt(sq / n))


def compare(before: Trajectory, after: Trajectory, ground_truth: Trajectory | None = None) -> dict:
    """Pre/post statistics. Without ground truth, reports how far ``after`` moved from ``before``."""
    out = {}
    if ground_truth is not None:
        out["ate_before"] = ate_rmse(align_se3(before, ground_truth))
        out["ate_after"] = ate_rmse(align_se3(after, ground_truth))
        out["improvement"] = 1.0 - out["ate_after"] / out["ate_before"] if out["ate_before"] > 0 else 0.0
    i, j = associate(before.timestamps, after.timestamps)
    d = np.linalg.norm(before.positions[i] - after.positions[j], axis=1)
    out["pairs"] = int(len(i))
    out["mean_shift"] = float(d.mean()) if len(d) else 0.0
    out["max_shift"] = float(d.max()) if len(d) else 0.0
    return out


# ---------------------------------------------------------------------------
# loop logs
# ---------------------------------------------------------------------------

def read_loop_log(path) -> list[dict]:
    with open(path, newline="") as f:
        return list(csv.DictReader(f))


def summarize_loops(rows: list[dict]) -> dict:
    if not rows:
        return {"loops": 0}
    inl = np.array([float(r["inliers"]) for r in rows])
    tr = np.array([float(r["covariance_trace"]) for r in rows])
    kinds = [r.get("kind", "") for r in rows]
    return {"loops": len(rows), "fusions": kinds.count("fusion"), "intra": kinds.count("intra"),
            "inliers_min": int(inl.min()), "inliers_median": float(np.median(inl)),
            "inliers_max": int(inl.max()), "cov_trace_median": float(np.median(tr))}


# ---------------------------------------------------------------------------
# verification replay
# ---------------------------------------------------------------------------

@dataclass
class ReplayOutcome:
    accepted: bool
    result: object             # RelPoseResult or None
    constraint: object         # LoopConstraint or None
    timings: dict
    reason: str = ""


def inject_outliers(sets: dict, fraction: float, rig_q, rig_c, rng: np.random.Generator) -> dict:
    """Replace ``fraction`` of every set with random keypoint pairings."""
    out = {}
    for (a, b), m in sets.items():
        m = np.asarray(m, dtype=np.int64).reshape(-1, 3).copy()
        k = int(round(fraction * len(m)))
        if k:
            rows = rng.choice(len(m), k, replace=False)
            m[rows, 0] = rng.integers(0, len(rig_q.keyframes[a]), k)
            m[rows, 1] = rng.integers(0, len(rig_c.keyframes[b]), k)
        out[(a, b)] = m
    return out


def replay_verification(job, inject_outliers_fraction: float = 0.0) -> ReplayOutcome:
    """Re-run a recorded verification job with its own seed."""
    from .matching import match_rigs
    from .relpose.verify import verify_loop
    rng = np.random.default_rng(job.seed)
    t0 = time.perf_counter()
    sets = job.sets if job.sets is not None else match_rigs(job.rig_q, job.rig_c, job.config.max_hamming)
    t_match = time.perf_counter() - t0
    if inject_outliers_fraction > 0:
        sets = inject_outliers(sets, inject_outliers_fraction, job.rig_q, job.rig_c,
                               np.random.default_rng(job.seed + 1))
    try:
        constraint, result, timings = verify_loop(job.rig_q, job.rig_c, job.config, rng, sets=sets)
    except (SetRejected, VerificationFailed, DegenerateSamples) as e:
        return ReplayOutcome(False, None, None, {"matching": t_match}, f"{type(e).__name__}: {e}")
    timings["matching"] = t_match
    return ReplayOutcome(True, result, constraint, timings)


def describe_pose(T: Pose) -> str:
    return (f"t=({T.p[0]:.4f}, {T.p[1]:.4f}, {T.p[2]:.4f}) m, "
            f"rot={np.rad2deg(rotation_angle(T.R)):.4f} deg")
