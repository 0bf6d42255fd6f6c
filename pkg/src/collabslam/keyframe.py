"""Keyframe and camera records shared by the wire format, the map and the verifier."""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .geometry import Pose, pixel_to_ray, project_ray

DESCRIPTOR_BINARY256 = 0


@dataclass(frozen=True)
class PinholeCamera:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def ray(self, uv) -> np.ndarray:
        uv = np.asarray(uv, dtype=float)
        return pixel_to_ray(uv[..., 0], uv[..., 1], self.fx, self.fy, self.cx, self.cy)

    def project(self, rays) -> np.ndarray:
        return project_ray(rays, self.fx, self.fy, self.cx, self.cy)

    def in_bounds(self, uv) -> np.ndarray:
        uv = np.asarray(uv)
        return (uv[..., 0] >= 0) & (uv[..., 0] < self.width) & (uv[..., 1] >= 0) & (uv[..., 1] < self.height)


DEFAULT_CAMERA = PinholeCamera(380.0, 380.0, 320.0, 240.0, 640, 480)


@dataclass(frozen=True, eq=False)
class Keyframe:
    """A keyframe as sent by an agent: odometry pose, undistorted keypoints, descriptors."""

    agent_id: int
    seq: int
    timestamp_ns: int
    T_ws_odom: Pose
    camera: PinholeCamera
    keypoints: np.ndarray                    # (N, 2) float32 pixels
    descriptors: np.ndarray                  # (N, L) uint8
    descriptor_type: int = DESCRIPTOR_BINARY256
    meta: dict = field(default_factory=dict, compare=False)

    @property
    def kf_id(self) -> tuple[int, int]:
        return (self.agent_id, self.seq)

    @property
    def descriptor_len(self) -> int:
        return int(self.descriptors.shape[1]) if self.descriptors.ndim == 2 else 0

    @cached_property
    def rays(self) -> np.ndarray:
        if len(self.keypoints) == 0:
            return np.zeros((0, 3))
        return self.camera.ray(self.keypoints.astype(float))

    def __len__(self):
        return len(self.keypoints)
