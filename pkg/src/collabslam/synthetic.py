"""Synthetic rig pairs with known ground truth, for verification tests and demos."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, compose, inverse, quat_exp, quat_mul
from .keyframe import DEFAULT_CAMERA, Keyframe, PinholeCamera
from .relpose.rig import MultiCameraRig


def look_pose(position, yaw: float = 0.0, pitch: float = 0.0) -> Pose:
    """Camera pose (z forward, y down) at ``position`` turned by yaw about world -y."""
    q = quat_exp([0.0, yaw, 0.0])
    if pitch:
        q = quat_mul(q, quat_exp([pitch, 0.0, 0.0]))
    return Pose(q, position)


@dataclass
class RigPair:
    rig_q: MultiCameraRig
    rig_c: MultiCameraRig
    sets: dict                 # (a, b) -> (M, 3) int array of (kp_q, kp_c, dist)
    inlier_labels: dict        # (a, b) -> (M,) bool, True for true matches
    T_cq: Pose                 # ground truth
    world_q: list              # true camera poses of the query rig members
    world_c: list


def _project(cam: PinholeCamera, T_wc: Pose, pts, min_depth=0.3):
    pc = inverse(T_wc).apply(pts)
    z = pc[:, 2]
    ok = z > min_depth
    uv = np.full((len(pts), 2), -1.0)
    uv[ok] = np.column_stack([cam.fx * pc[ok, 0] / z[ok] + cam.cx, cam.fy * pc[ok, 1] / z[ok] + cam.cy])
    ok &= cam.in_bounds(uv)
    return uv, ok


def make_rig_pair(rng: np.random.Generator, *, n_per_pair: int = 40, noise_px: float = 0.0,
                  outlier_frac: float = 0.0, n_landmarks: int = 600, baseline: float = 0.3,
                  depth=(2.0, 7.0), camera: PinholeCamera = DEFAULT_CAMERA,
                  T_w_q: Pose | None = None, T_w_c: Pose | None = None,
                  rig_noise: float = 0.0) -> RigPair:
    """Two rigs (2 and 3 members) viewing a common landmark field.

    ``outlier_frac`` replaces that fraction of each set with random keypoint
    pairings. ``rig_noise`` perturbs the odometry extrinsics (radians / meters).
    """
    if T_w_c is None:
        T_w_c = look_pose([0.0, 0.0, 0.0])
    if T_w_q is None:
        T_w_q = look_pose([rng.uniform(-0.8, 0.8), rng.uniform(-0.2, 0.2), rng.uniform(-0.5, 0.5)],
                          yaw=rng.uniform(-0.3, 0.3))
    step = Pose(quat_exp([0.0, 0.03, 0.0]), [baseline, 0.0, 0.05])
    world_q = [T_w_q, compose(T_w_q, inverse(step))]
    world_c = [T_w_c, compose(T_w_c, inverse(step)), compose(T_w_c, step)]

    half = 0.8 * camera.width / 2 / camera.fx
    z = rng.uniform(*depth, n_landmarks)
    x = rng.uniform(-half, half, n_landmarks) * z
    y = rng.uniform(-half * camera.height / camera.width, half * camera.height / camera.width,
                    n_landmarks) * z
    pts = T_w_c.apply(np.column_stack([x, y, z]))

    def make_kfs(world, agent):
        kfs, vis = [], []
        for s, T in enumerate(world):
            uv, ok = _project(camera, T, pts)
            uv = uv + rng.normal(0.0, noise_px, uv.shape) * ok[:, None]
            lm_ids = np.flatnonzero(ok)
            n_extra = len(lm_ids)  # random keypoints available for outlier pairings
            extra = np.column_stack([rng.uniform(0, camera.width, n_extra),
                                     rng.uniform(0, camera.height, n_extra)])
            kps = np.vstack([uv[lm_ids], extra]).astype(np.float32)
            descs = rng.integers(0, 256, (len(kps), 32), dtype=np.uint8)
            kf = Keyframe(agent, s, s, T, camera, kps, descs)
            kfs.append(kf)
            vis.append({int(l): i for i, l in enumerate(lm_ids)})
        return kfs, vis

    kq, vis_q = make_kfs(world_q, 0)
    kc, vis_c = make_kfs(world_c, 1)
    if rig_noise:
        def noisy(world):
            out = [world[0]]
            for T in world[1:]:
                out.append(compose(T, Pose(quat_exp(rng.normal(0, rig_noise, 3)), rng.normal(0, rig_noise, 3))))
            return out
        rig_q = MultiCameraRig.from_poses(kq, noisy(world_q))
        rig_c = MultiCameraRig.from_poses(kc, noisy(world_c))
    else:
        rig_q = MultiCameraRig.from_poses(kq, world_q)
        rig_c = MultiCameraRig.from_poses(kc, world_c)

    sets, labels = {}, {}
    for a in range(2):
        for b in range(3):
            common = sorted(set(vis_q[a]) & set(vis_c[b]))
            chosen = rng.permutation(common)[:n_per_pair]
            m = np.array([[vis_q[a][l], vis_c[b][l], 0] for l in chosen], dtype=np.int64).reshape(-1, 3)
            lab = np.ones(len(m), bool)
            n_out = int(round(outlier_frac * len(m)))
            if n_out:
                # random keypoints of the extra pool; never true matches
                nq = len(vis_q[a])
                nc = len(vis_c[b])
                rows = rng.choice(len(m), n_out, replace=False)
                m[rows, 0] = nq + rng.integers(0, nq, n_out)
                m[rows, 1] = nc + rng.integers(0, nc, n_out)
                lab[rows] = False
            sets[(a, b)] = m
            labels[(a, b)] = lab
    T_cq = compose(inverse(T_w_c), T_w_q)
    return RigPair(rig_q, rig_c, sets, labels, T_cq, world_q, world_c)
