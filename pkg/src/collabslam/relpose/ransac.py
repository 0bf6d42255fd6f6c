"""Stratified 17-point RANSAC between two multi-camera rigs."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from ..errors import DegenerateConfiguration, VerificationFailed
from ..geometry import Pose, pose_delta_vector, quat_exp, quat_mul, skew
from ..matching import Correspondence
from .central import pair_error, ransac_iterations
from .generalized import MIN_CORRESPONDENCES, solve_17pt

MIN_LOOP_INLIERS = 100


class PooledMatches:
    """The correspondence sets of a rig pair flattened into aligned arrays.

    Row ``k`` belongs to camera pair ``(a[k], b[k])`` (query member, candidate
    member) and set index ``set_id[k]``.
    """

    def __init__(self, rig_q, rig_c, sets: dict):
        self.rig_q, self.rig_c = rig_q, rig_c
        self.keys = sorted(sets)
        rows = [np.asarray(sets[k], dtype=np.int64).reshape(-1, 3) for k in self.keys]
        self.set_id = np.concatenate([np.full(len(r), i) for i, r in enumerate(rows)]).astype(np.int64)
        self.a = np.array([self.keys[i][0] for i in self.set_id], dtype=np.int64)
        self.b = np.array([self.keys[i][1] for i in self.set_id], dtype=np.int64)
        allrows = np.concatenate(rows) if rows else np.zeros((0, 3), np.int64)
        self.iq, self.ic, self.dist = allrows[:, 0], allrows[:, 1], allrows[:, 2]
        self.f_q = np.zeros((len(self), 3))
        self.f_c = np.zeros((len(self), 3))
        for i, (a, b) in enumerate(self.keys):
            sel = self.set_id == i
            self.f_q[sel] = rig_q.rays[a][self.iq[sel]]
            self.f_c[sel] = rig_c.rays[b][self.ic[sel]]
        self.dq = np.zeros_like(self.f_q)
        self.mq = np.zeros_like(self.f_q)
        self.dc = np.zeros_like(self.f_q)
        self.mc = np.zeros_like(self.f_q)
        for a in range(len(rig_q)):
            sel = self.a == a
            self.dq[sel], self.mq[sel] = rig_q.plucker(a, self.f_q[sel])
        for b in range(len(rig_c)):
            sel = self.b == b
            self.dc[sel], self.mc[sel] = rig_c.plucker(b, self.f_c[sel])

    def __len__(self):
        return len(self.set_id)

    def lines(self, idx=slice(None)):
        return self.dq[idx], self.mq[idx], self.dc[idx], self.mc[idx]

    def set_indices(self):
        return [np.flatnonzero(self.set_id == i) for i in range(len(self.keys))]

    def subset(self, mask):
        """Per-set match arrays restricted to ``mask``."""
        out = {}
        for i, k in enumerate(self.keys):
            sel = (self.set_id == i) & mask
            out[k] = np.column_stack([self.iq[sel], self.ic[sel], self.dist[sel]])
        return out

    def correspondences(self, mask) -> list[Correspondence]:
        ids_q, ids_c = self.rig_q.member_ids, self.rig_c.member_ids
        return [Correspondence(ids_q[self.a[k]], int(self.iq[k]), ids_c[self.b[k]], int(self.ic[k]),
                               int(self.dist[k])) for k in np.flatnonzero(mask)]


def _set_poses(T_cq: Pose, pool):
    """Per-set central relative pose ``X_c[b]^-1 * T_cq * X_q[a]`` as (R, t) stacks."""
    R, t = T_cq.R, T_cq.p
    Rs, ts = [], []
    for a, b in pool.keys:
        Xq, Xc = pool.rig_q.extrinsics[a], pool.rig_c.extrinsics[b]
        RcT = Xc.R.T
        Rs.append(RcT @ R @ Xq.R)
        ts.append(RcT @ (R @ Xq.p + t - Xc.p))
    return np.array(Rs).reshape(-1, 3, 3), np.array(ts).reshape(-1, 3)


def induced_errors(T_cq: Pose, pool, signed: bool = False) -> np.ndarray:
    """Angular epipolar error of every correspondence under rig-to-rig pose ``T_cq``.

    Each camera pair is tested centrally with the relative pose
    ``X_c[b]^-1 * T_cq * X_q[a]`` induced by the rig extrinsics.
    """
    n = len(pool.set_id)
    if n == 0:
        return np.zeros(0)
    Rs, ts = _set_poses(T_cq, pool)
    Es = np.einsum("sij,sjk->sik", np.array([skew(t) for t in ts]).reshape(-1, 3, 3), Rs)
    E = Es[pool.set_id]
    f1, f2 = pool.f_q, pool.f_c
    Ef1 = np.einsum("nij,nj->ni", E, f1)
    Etf2 = np.einsum("nji,nj->ni", E, f2)
    r = np.einsum("ij,ij->i", f2, Ef1)
    g2 = Ef1 - f2 * r[:, None]
    g1 = Etf2 - f1 * r[:, None]
    den = np.sqrt(np.einsum("ij,ij->i", g1, g1) + np.einsum("ij,ij->i", g2, g2))
    err = r / np.maximum(den, 1e-15)
    if not signed:
        err = np.abs(err)
    central = np.linalg.norm(ts, axis=1) < 1e-9
    if central.any():
        for i in np.flatnonzero(central):
            sel = pool.set_id == i
            err[sel] = pair_error(Rs[i], ts[i], f1[sel], f2[sel])
    return err


def positive_depth(T_cq: Pose, pool, min_parallax_rad: float = np.deg2rad(1.0)) -> np.ndarray:
    """True where the midpoint triangulation lies in front of both cameras.

    Correspondences with less than ``min_parallax_rad`` between the two rays
    cannot be tested reliably and pass. This removes the twisted-pair mirror of
    the true pose, which satisfies every epipolar constraint when all camera
    centres are nearly collinear.
    """
    n = len(pool.set_id)
    if n == 0:
        return np.zeros(0, bool)
    Rs, ts = _set_poses(T_cq, pool)
    a = np.einsum("nij,nj->ni", Rs[pool.set_id], pool.f_q)
    b = pool.f_c
    t = ts[pool.set_id]
    c = np.einsum("ij,ij->i", a, b)
    det = 1.0 - c * c
    at, bt = np.einsum("ij,ij->i", a, t), np.einsum("ij,ij->i", b, t)
    ok = det > np.sin(min_parallax_rad) ** 2
    safe = np.where(ok, det, 1.0)
    l1 = (-at + c * bt) / safe
    l2 = (bt - c * at) / safe
    return ~ok | ((l1 > 0) & (l2 > 0))


def inlier_mask(T_cq: Pose, pool, threshold: float) -> np.ndarray:
    """Angular error below ``threshold`` (rad) and no cheirality violation."""
    return (induced_errors(T_cq, pool) < threshold) & positive_depth(T_cq, pool)


def stratified_sample(strata, rng: np.random.Generator, size: int = MIN_CORRESPONDENCES,
                      per_set: int = 2) -> np.ndarray:
    """``per_set`` draws from every nonempty stratum, the rest uniformly from what is left."""
    chosen = [rng.choice(s, min(per_set, len(s)), replace=False) for s in strata if len(s)]
    chosen = np.concatenate(chosen) if chosen else np.zeros(0, np.int64)
    pool = np.setdiff1d(np.concatenate([s for s in strata]) if strata else chosen, chosen)
    rest = size - len(chosen)
    if rest > 0:
        if rest > len(pool):
            raise DegenerateConfiguration("not enough correspondences to sample")
        chosen = np.concatenate([chosen, rng.choice(pool, rest, replace=False)])
    return chosen


def fit_pose(pool: PooledMatches, idx, near: Pose | None = None) -> Pose:
    """Best-residual 17-point solution, or the candidate closest to ``near``."""
    cands = solve_17pt(*pool.lines(idx), pairs=pool.set_id[idx])
    if near is None or len(cands) == 1:
        return cands[0]
    return min(cands, key=lambda T: np.linalg.norm(pose_delta_vector(near, T)))


def refine_pose(T_cq: Pose, pool: PooledMatches, mask, loss_scale: float | None = None) -> Pose:
    """Nonlinear polish of ``T_cq`` minimizing the induced angular errors of ``mask``.

    With ``loss_scale`` (radians) the errors pass through a Cauchy loss.
    """
    idx = np.flatnonzero(mask)
    sub = _Subset(pool, idx)

    def fun(x):
        T = Pose(quat_mul(T_cq.q, quat_exp(x[:3])), T_cq.p + x[3:])
        return induced_errors(T, sub, signed=True)

    if loss_scale is None:
        sol = least_squares(fun, np.zeros(6), method="lm", xtol=1e-12, ftol=1e-12)
    else:
        sol = least_squares(fun, np.zeros(6), method="trf", loss="cauchy", f_scale=loss_scale,
                            xtol=1e-12, ftol=1e-12)
    x = sol.x
    return Pose(quat_mul(T_cq.q, quat_exp(x[:3])), T_cq.p + x[3:])


def robust_cost(T_cq: Pose, pool, mask, scale: float) -> float:
    e = induced_errors(T_cq, pool)[mask] / scale
    return float(np.sum(np.log1p(e**2)))


class _Subset:
    def __init__(self, pool, idx):
        self.rig_q, self.rig_c, self.keys = pool.rig_q, pool.rig_c, pool.keys
        self.set_id = pool.set_id[idx]
        self.f_q, self.f_c = pool.f_q[idx], pool.f_c[idx]


@dataclass
class RelPoseResult:
    T_cq: Pose
    inlier_mask: np.ndarray
    set_inliers: dict
    iterations: int
    pool: PooledMatches = field(repr=False)

    @property
    def n_inliers(self) -> int:
        return int(self.inlier_mask.sum())

    @property
    def inliers(self) -> list[Correspondence]:
        return self.pool.correspondences(self.inlier_mask)

    @property
    def inlier_indices(self) -> np.ndarray:
        return np.flatnonzero(self.inlier_mask)


def ransac_17pt(pool: PooledMatches, rng: np.random.Generator, *, threshold_deg: float = 0.35,
                confidence: float = 0.99, max_iterations: int = 500,
                min_inliers: int = MIN_LOOP_INLIERS, refine: bool = True) -> RelPoseResult:
    """Stratified 17-point RANSAC; raises VerificationFailed below ``min_inliers``."""
    thr = np.deg2rad(threshold_deg)
    n = len(pool)
    if n < MIN_CORRESPONDENCES:
        raise VerificationFailed(f"{n} correspondences, below the 17-point minimum", 0)
    strata = pool.set_indices()
    best_mask, best_T = np.zeros(n, bool), None
    needed, it = max_iterations, 0
    while it < needed:
        it += 1
        idx = stratified_sample(strata, rng)
        try:
            cands = solve_17pt(*pool.lines(idx), pairs=pool.set_id[idx])
        except DegenerateConfiguration:
            continue
        for T in cands:
            mask = inlier_mask(T, pool, thr)
            if mask.sum() > best_mask.sum():
                best_mask, best_T = mask, T
                needed = ransac_iterations(mask.mean(), MIN_CORRESPONDENCES, confidence, max_iterations)
    if best_T is None:
        raise VerificationFailed("no non-degenerate sample", 0)

    # re-fit on all inliers, then polish; the mask is re-derived from the final pose
    T = best_T
    try:
        T_lin = fit_pose(pool, np.flatnonzero(best_mask), near=T)
        if robust_cost(T_lin, pool, best_mask, thr / 3) < robust_cost(T, pool, best_mask, thr / 3):
            T = T_lin
    except DegenerateConfiguration:
        pass
    mask = best_mask
    if refine:
        for _ in range(3):
            T = refine_pose(T, pool, mask, loss_scale=thr / 3)
            new_mask = inlier_mask(T, pool, thr)
            if np.array_equal(new_mask, mask) or new_mask.sum() < MIN_CORRESPONDENCES:
                mask = new_mask
                break
            mask = new_mask
    best_T = T
    best_mask = inlier_mask(T, pool, thr)

    if best_mask.sum() < min_inliers:
        raise VerificationFailed(f"{int(best_mask.sum())} inliers < {min_inliers}", int(best_mask.sum()))
    counts = {k: int(best_mask[pool.set_id == i].sum()) for i, k in enumerate(pool.keys)}
    return RelPoseResult(best_T, best_mask, counts, it, pool)
