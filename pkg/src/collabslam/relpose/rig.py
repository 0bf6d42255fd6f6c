"""Multi-camera rigs built from a keyframe and its temporal neighbours."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import InsufficientNeighbors
from ..geometry import Pose, compose, inverse, plucker_from_camera


@dataclass(frozen=True, eq=False)
class MultiCameraRig:
    """A reference keyframe plus neighbours, treated as one generalized camera.

    ``extrinsics[i]`` is ``T_ref_member`` from odometry; member 0 is the reference.
    """

    keyframes: tuple
    extrinsics: tuple

    @property
    def reference_kf_id(self):
        return self.keyframes[0].kf_id

    @property
    def member_ids(self):
        return [kf.kf_id for kf in self.keyframes]

    @property
    def rays(self):
        return [kf.rays for kf in self.keyframes]

    def __len__(self):
        return len(self.keyframes)

    def plucker(self, member: int, rays):
        return plucker_from_camera(rays, self.extrinsics[member])

    @classmethod
    def from_poses(cls, keyframes, poses) -> "MultiCameraRig":
        """Rig whose extrinsics are ``poses[0]^-1 * poses[i]``."""
        ref_inv = inverse(poses[0])
        ext = [Pose.identity()] + [compose(ref_inv, p) for p in poses[1:]]
        return cls(tuple(keyframes), tuple(ext))


def neighbor_order(index: int, count: int, n_neighbors: int) -> list[int]:
    """Temporal neighbours of position ``index`` in a sequence of ``count``.

    Preference alternates predecessor, successor, second predecessor, ...;
    a missing side is filled from the other one.
    """
    preds = list(range(index - 1, -1, -1))
    succs = list(range(index + 1, count))
    out = []
    while len(out) < n_neighbors and (preds or succs):
        k = len(out)
        take_pred = (k % 2 == 0 and preds) or not succs
        out.append(preds.pop(0) if take_pred else succs.pop(0))
    if len(out) < n_neighbors:
        raise InsufficientNeighbors(
            f"need {n_neighbors} neighbours, trajectory has only {count - 1} other keyframes")
    return out


def build_rig(trajectory, center_kf_id, n_neighbors: int) -> MultiCameraRig:
    """Rig around ``center_kf_id`` from one agent's keyframes ordered by seq.

    Extrinsics come from the keyframes' odometry poses.
    """
    ids = [kf.kf_id for kf in trajectory]
    try:
        idx = ids.index(center_kf_id)
    except ValueError:
        raise KeyError(f"keyframe {center_kf_id} not in trajectory") from None
    members = [idx] + neighbor_order(idx, len(trajectory), n_neighbors)
    kfs = [trajectory[i] for i in members]
    return MultiCameraRig.from_poses(kfs, [kf.T_ws_odom for kf in kfs])


def rig_extrinsics_array(rig: MultiCameraRig):
    R = np.stack([x.R for x in rig.extrinsics])
    t = np.stack([x.p for x in rig.extrinsics])
    return R, t
