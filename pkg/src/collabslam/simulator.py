"""Synthetic agents: trajectories, landmark fields, drifting odometry, motion-based
keyframe selection and wire-format streams.

World frame is z-up. Cameras look along the direction of travel with image y
pointing down. Odometry is ground truth composed with per-step noise, so it
drifts continuously away from the truth.
"""
from __future__ import annotations

import json
import os
import socket
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConnectionLost, InvalidScenario
from .geometry import Pose, compose, inverse, quat_exp, quat_from_matrix, rotation_angle
from .keyframe import Keyframe, PinholeCamera
from .evaluation import write_tum
from .wire import HelloMessage, encode_hello, encode_kf, keyframe_payload_size, write_log

TRAJECTORY_TYPES = ("circle", "figure-eight", "polyline")
PROFILES = ("vio", "tracking-camera")


# ---------------------------------------------------------------------------
# scenario description
# ---------------------------------------------------------------------------

@dataclass
class TrajectorySpec:
    type: str = "figure-eight"
    center: list = field(default_factory=lambda: [0.0, 0.0])
    size: list = field(default_factory=lambda: [8.0, 8.0])     # circle: radius in size[0]
    waypoints: list = field(default_factory=list)               # polyline only, [[x, y], ...]
    height: float = 1.5
    speed: float = 0.5                                          # m/s
    phase: float = 0.0                                          # fraction of one lap
    laps: float = 1.0
    direction: int = 1
    lateral_offset: float = 0.0     # shift along the path normal, m
    bob_amplitude: float = 0.0      # vertical oscillation, m
    bob_wavelength: float = 3.0     # m of path per oscillation
    weave_amplitude: float = 0.0    # lateral oscillation, m
    weave_wavelength: float = 5.0


@dataclass
class DriftSpec:
    rate: float = 0.005            # translational drift per meter travelled
    yaw_rate_deg: float = 0.0      # heading bias, degrees per meter
    sigma_t: float = 0.0           # random-walk translation, m per sqrt(m)
    sigma_r_deg: float = 0.0       # random-walk rotation, degrees per sqrt(m)


@dataclass
class AgentSpec:
    agent_id: int
    trajectory: TrajectorySpec = field(default_factory=TrajectorySpec)
    profile: str = "vio"
    drift: DriftSpec = field(default_factory=DriftSpec)
    keypoint_sigma_px: float | None = None
    start_time: float = 0.0
    odom_frame: list | None = None      # [qw,qx,qy,qz,px,py,pz]: odometry world frame in the shared frame


@dataclass
class LandmarkSpec:
    count: int = 6000
    distribution: str = "room"          # room | box
    extent: list = field(default_factory=lambda: [12.0, 8.0, 4.0])   # half-x, half-y, height
    clutter_fraction: float = 0.2


@dataclass
class CameraSpec:
    fx: float = 380.0
    fy: float = 380.0
    cx: float = 320.0
    cy: float = 240.0
    width: int = 640
    height: int = 480
    min_range: float = 0.5
    max_range: float = 15.0


@dataclass
class Scenario:
    agents: list
    landmarks: LandmarkSpec = field(default_factory=LandmarkSpec)
    camera: CameraSpec = field(default_factory=CameraSpec)
    keypoint_sigma_px: float = 0.5
    descriptor_flip_p: float = 0.02
    max_keypoints: int = 300
    kf_distance: float = 0.3
    kf_angle_deg: float = 10.0
    sample_dt: float = 0.05
    seed: int = 0

    # -- (de)serialization --------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Scenario":
        d = dict(d)
        try:
            agents = []
            for a in d.pop("agents"):
                a = dict(a)
                a["trajectory"] = TrajectorySpec(**a.get("trajectory", {}))
                a["drift"] = DriftSpec(**a.get("drift", {}))
                agents.append(AgentSpec(**a))
            sc = cls(agents=agents, landmarks=LandmarkSpec(**d.pop("landmarks", {})),
                     camera=CameraSpec(**d.pop("camera", {})), **d)
        except KeyError as e:
            raise InvalidScenario(str(e.args[0]), "missing required field") from e
        except TypeError as e:
            raise InvalidScenario("scenario", str(e)) from e
        sc.validate()
        return sc

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2)

    @classmethod
    def load(cls, path) -> "Scenario":
        try:
            with open(path) as f:
                d = json.load(f)
        except json.JSONDecodeError as e:
            raise InvalidScenario("file", f"not valid JSON: {e}") from e
        return cls.from_dict(d)

    def validate(self):
        if not self.agents:
            raise InvalidScenario("agents", "at least one agent required")
        ids = [a.agent_id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise InvalidScenario("agents.agent_id", "agent ids must be unique")
        for a in self.agents:
            t = a.trajectory
            if t.type not in TRAJECTORY_TYPES:
                raise InvalidScenario("trajectory.type", f"{t.type!r} not in {TRAJECTORY_TYPES}")
            if t.speed <= 0:
                raise InvalidScenario("trajectory.speed", "must be positive")
            if t.laps <= 0:
                raise InvalidScenario("trajectory.laps", "must be positive")
            if t.type == "polyline" and len(t.waypoints) < 2:
                raise InvalidScenario("trajectory.waypoints", "polyline needs at least 2 waypoints")
            if t.type != "polyline" and min(t.size) <= 0:
                raise InvalidScenario("trajectory.size", "must be positive")
            if a.profile not in PROFILES:
                raise InvalidScenario("profile", f"{a.profile!r} not in {PROFILES}")
            if a.drift.rate < 0 or a.drift.sigma_t < 0 or a.drift.sigma_r_deg < 0:
                raise InvalidScenario("drift", "drift magnitudes must be non-negative")
        if self.landmarks.count <= 0:
            raise InvalidScenario("landmarks.count", "must be positive")
        if self.landmarks.distribution not in ("room", "box"):
            raise InvalidScenario("landmarks.distribution", "expected 'room' or 'box'")
        if not 0 <= self.descriptor_flip_p < 0.5:
            raise InvalidScenario("descriptor_flip_p", "must be in [0, 0.5)")
        if self.keypoint_sigma_px < 0:
            raise InvalidScenario("keypoint_sigma_px", "must be non-negative")
        if not 0 < self.max_keypoints <= 65535:
            raise InvalidScenario("max_keypoints", "must be in 1..65535")
        if self.kf_distance <= 0 or self.kf_angle_deg <= 0:
            raise InvalidScenario("kf_distance", "keyframe thresholds must be positive")
        c = self.camera
        if c.fx <= 0 or c.fy <= 0 or c.width <= 0 or c.height <= 0:
            raise InvalidScenario("camera", "focal lengths and image size must be positive")


def default_scenario(n_agents: int = 3, seed: int = 0, drift_rate: float = 0.005,
                     flip_p: float = 0.02, tracking_camera_agent: int | None = None,
                     laps: float = 1.15) -> Scenario:
    """Overlapping figure-eights in a 24 x 16 m room, one phase offset per agent."""
    agents = []
    for i in range(n_agents):
        aid = i + 1
        prof = "tracking-camera" if aid == tracking_camera_agent else "vio"
        drift = DriftSpec(rate=drift_rate, sigma_t=0.002, sigma_r_deg=0.02)
        if prof == "tracking-camera":
            drift = DriftSpec(rate=drift_rate * 0.6, yaw_rate_deg=0.02, sigma_t=0.004, sigma_r_deg=0.04)
        traj = TrajectorySpec(phase=i / n_agents * 0.5, laps=laps, lateral_offset=0.3 * ((i + 1) // 2) * (-1) ** i,
                              bob_amplitude=0.15, bob_wavelength=2.7 + 0.4 * i,
                              weave_amplitude=0.2, weave_wavelength=4.3 + 0.7 * i)
        agents.append(AgentSpec(aid, traj, prof, drift,
                                keypoint_sigma_px=1.0 if prof == "tracking-camera" else None))
    return Scenario(agents, descriptor_flip_p=flip_p, seed=seed)


# ---------------------------------------------------------------------------
# trajectories
# ---------------------------------------------------------------------------

def camera_pose(position, heading: float) -> Pose:
    """Camera at ``position`` looking horizontally along ``heading``."""
    c, s = np.cos(heading), np.sin(heading)
    R = np.array([[s, 0.0, c], [-c, 0.0, s], [0.0, -1.0, 0.0]])   # columns: right, down, forward
    return Pose.from_Rt(R, position)


def _dense_path(t: TrajectorySpec, n: int = 4000) -> np.ndarray:
    cx, cy = t.center
    if t.type == "circle":
        th = np.linspace(0, 2 * np.pi, n, endpoint=False)
        xy = np.column_stack([cx + t.size[0] * np.cos(th), cy + t.size[0] * np.sin(th)])
        closed = True
    elif t.type == "figure-eight":
        th = np.linspace(0, 2 * np.pi, n, endpoint=False)
        a, b = t.size
        xy = np.column_stack([cx + a * np.sin(th), cy + b * np.sin(th) * np.cos(th)])
        closed = True
    else:
        xy = np.asarray(t.waypoints, dtype=float)
        closed = False
    if t.direction < 0:
        xy = xy[::-1]
    return xy, closed


def sample_trajectory(t: TrajectorySpec, dt: float):
    """Ground-truth poses of a trajectory at a fixed rate; returns (times, poses, arclength)."""
    xy, closed = _dense_path(t)
    pts = np.vstack([xy, xy[:1]]) if closed else xy
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    lap = cum[-1]
    total = lap * t.laps if closed else lap
    start = (t.phase % 1.0) * lap if closed else 0.0
    s = np.arange(0.0, total + 1e-9, t.speed * dt)
    ss = (start + s) % lap if closed else s

    def at(u):
        x = np.interp(u, cum, pts[:, 0])
        y = np.interp(u, cum, pts[:, 1])
        return np.column_stack([x, y])

    p = at(ss)
    ahead = at((ss + 0.05) % lap if closed else np.minimum(ss + 0.05, lap))
    behind = at((ss - 0.05) % lap if closed else np.maximum(ss - 0.05, 0))
    d = ahead - behind
    heading = np.unwrap(np.arctan2(d[:, 1], d[:, 0]))
    # handheld-style deviations keep consecutive camera centres off a single line
    normal = np.column_stack([-np.sin(heading), np.cos(heading)])
    lateral = t.lateral_offset + t.weave_amplitude * np.sin(2 * np.pi * s / t.weave_wavelength)
    p = p + normal * lateral[:, None]
    z = t.height + t.bob_amplitude * np.sin(2 * np.pi * s / t.bob_wavelength)
    poses = [camera_pose([x, y, h_z], h) for (x, y), h_z, h in zip(p, z, heading)]
    return s / t.speed, poses, s


def select_keyframes(poses, arclength, min_distance=0.3, min_angle_deg=10.0) -> list[int]:
    """Indices where travelled distance or rotation since the last keyframe exceeds a threshold."""
    out = [0]
    ang = np.deg2rad(min_angle_deg)
    for i in range(1, len(poses)):
        last = out[-1]
        if arclength[i] - arclength[last] >= min_distance - 1e-12 or \
                rotation_angle(inverse(poses[last]).R @ poses[i].R) >= ang:
            out.append(i)
    return out


# ---------------------------------------------------------------------------
# odometry drift
# ---------------------------------------------------------------------------

def drift_odometry(gt: list, arclength, drift: DriftSpec, rng: np.random.Generator,
                   profile: str = "vio", frame: Pose | None = None) -> list:
    """Odometry = truth with per-step noise composed onto every relative motion.

    ``vio``: translational bias of ``rate`` per meter along a fixed random
    horizontal world direction plus random-walk noise. ``tracking-camera``:
    bias along the direction of travel (scale error) and a heading bias of
    ``yaw_rate_deg`` per meter, plus noise.
    """
    frame = frame or Pose.identity()
    ang = rng.uniform(0, 2 * np.pi)
    bias_dir = np.array([np.cos(ang), np.sin(ang), 0.0])
    odom = [compose(frame, gt[0])]
    for k in range(1, len(gt)):
        ds = float(arclength[k] - arclength[k - 1])
        delta = compose(inverse(gt[k - 1]), gt[k])
        R_prev = gt[k - 1].R
        if profile == "tracking-camera":
            b_body = delta.p * drift.rate
        else:
            b_body = R_prev.T @ bias_dir * drift.rate * ds
        n_t = rng.normal(size=3) * drift.sigma_t * np.sqrt(ds)
        w = rng.normal(size=3) * np.deg2rad(drift.sigma_r_deg) * np.sqrt(ds)
        # yaw bias acts about world z, expressed in the camera frame
        w = w + R_prev.T @ np.array([0.0, 0.0, 1.0]) * np.deg2rad(drift.yaw_rate_deg) * ds
        noisy = Pose(delta.q, delta.p + b_body + n_t)
        noisy = compose(noisy, Pose(quat_exp(w), np.zeros(3)))
        odom.append(compose(odom[-1], noisy))
    return odom


# ---------------------------------------------------------------------------
# landmarks and observations
# ---------------------------------------------------------------------------

@dataclass
class LandmarkField:
    points: np.ndarray          # (M, 3)
    descriptors: np.ndarray     # (M, 32) uint8 identity descriptors
    saliency: np.ndarray        # (M,) detector preference; higher is kept first


def make_landmarks(spec: LandmarkSpec, rng: np.random.Generator) -> LandmarkField:
    hx, hy, hz = spec.extent
    n = spec.count
    if spec.distribution == "box":
        pts = rng.uniform([-hx, -hy, 0], [hx, hy, hz], size=(n, 3))
    else:
        n_clutter = int(n * spec.clutter_fraction)
        n_wall = n - n_clutter
        per = rng.choice(4, n_wall, p=np.array([hx, hx, hy, hy]) / (2 * (hx + hy)))
        u = rng.uniform(-1, 1, n_wall)
        z = rng.uniform(0, hz, n_wall)
        x = np.where(per < 2, u * hx, np.where(per == 2, -hx, hx))
        y = np.where(per < 2, np.where(per == 0, -hy, hy), u * hy)
        wall = np.column_stack([x, y, z]) + rng.normal(0, 0.05, (n_wall, 3))
        clutter = rng.uniform([-hx, -hy, 0], [hx, hy, hz], size=(n_clutter, 3))
        pts = np.vstack([wall, clutter])
    descs = rng.integers(0, 256, size=(len(pts), 32), dtype=np.uint8)
    return LandmarkField(pts, descs, rng.random(len(pts)))


def observe(camera: CameraSpec, T_wc: Pose, lm: LandmarkField, max_keypoints: int):
    """Ids and exact pixels of the landmarks visible from ``T_wc`` (most salient first)."""
    pc = inverse(T_wc).apply(lm.points)
    z = pc[:, 2]
    dist = np.linalg.norm(pc, axis=1)
    ok = (z > 1e-6) & (dist >= camera.min_range) & (dist <= camera.max_range)
    uv = np.full((len(pc), 2), -1.0)
    uv[ok, 0] = camera.fx * pc[ok, 0] / z[ok] + camera.cx
    uv[ok, 1] = camera.fy * pc[ok, 1] / z[ok] + camera.cy
    m = 2.0   # keep a margin so noisy keypoints stay in the image
    ok &= (uv[:, 0] >= m) & (uv[:, 0] <= camera.width - m) & (uv[:, 1] >= m) & (uv[:, 1] <= camera.height - m)
    ids = np.flatnonzero(ok)
    ids = ids[np.argsort(-lm.saliency[ids], kind="stable")][:max_keypoints]
    ids = np.sort(ids)
    return ids, uv[ids]


def flip_bits(descs: np.ndarray, p: float, rng: np.random.Generator) -> np.ndarray:
    if p <= 0:
        return descs.copy()
    bits = np.unpackbits(descs, axis=1)
    flips = rng.random(bits.shape) < p
    return np.packbits(bits ^ flips, axis=1)


# ---------------------------------------------------------------------------
# generation
# ---------------------------------------------------------------------------

@dataclass
class AgentTruth:
    agent_id: int
    timestamps_ns: list
    poses: list                 # true T_ws per keyframe, shared world frame
    odometry: list              # odometry T_ws per keyframe, agent odometry frame
    landmark_ids: list          # per keyframe, landmark id of every keypoint
    odom_frame: Pose            # odometry world frame expressed in the shared frame
    path_length: float = 0.0


@dataclass
class GroundTruthLog:
    agents: dict                # agent_id -> AgentTruth
    landmarks: LandmarkField

    def inter_agent_transform(self, a: int, b: int) -> Pose:
        """True transform from agent b's odometry frame to agent a's."""
        return compose(inverse(self.agents[a].odom_frame), self.agents[b].odom_frame)


@dataclass
class AgentStream:
    agent_id: int
    label: str
    frames: list                # encoded frames, HELLO first
    timestamps_ns: list         # send time per frame (HELLO carries the first KF's stamp)
    keyframes: list

    @property
    def payload_bytes(self) -> int:
        return sum(len(f) - 4 for f in self.frames)


def generate(scenario: Scenario):
    """Build every agent's message stream and the matching ground truth."""
    scenario.validate()
    root = np.random.SeedSequence(scenario.seed)
    lm_seed, *agent_seeds = root.spawn(1 + len(scenario.agents))
    lm = make_landmarks(scenario.landmarks, np.random.default_rng(lm_seed))
    c = scenario.camera
    cam = PinholeCamera(float(np.float32(c.fx)), float(np.float32(c.fy)), float(np.float32(c.cx)),
                        float(np.float32(c.cy)), c.width, c.height)
    streams, truth = {}, {}
    for spec, ss in zip(scenario.agents, agent_seeds):
        rng = np.random.default_rng(ss)
        times, gt, arc = sample_trajectory(spec.trajectory, scenario.sample_dt)
        frame = Pose(np.array(spec.odom_frame[:4]), np.array(spec.odom_frame[4:])) \
            if spec.odom_frame else Pose.identity()
        odom_all = drift_odometry(gt, arc, spec.drift, rng, spec.profile, inverse(frame))
        sel = select_keyframes(gt, arc, scenario.kf_distance, scenario.kf_angle_deg)
        sigma = scenario.keypoint_sigma_px if spec.keypoint_sigma_px is None else spec.keypoint_sigma_px
        kfs, ts_list, lids = [], [], []
        for seq, i in enumerate(sel):
            ids, uv = observe(c, gt[i], lm, scenario.max_keypoints)
            uv = uv + rng.normal(0, sigma, uv.shape) if sigma > 0 else uv
            uv = np.clip(uv, 0, [c.width, c.height]).astype(np.float32)
            descs = flip_bits(lm.descriptors[ids], scenario.descriptor_flip_p, rng)
            ts = int(round((spec.start_time + times[i]) * 1e9))
            kfs.append(Keyframe(spec.agent_id, seq, ts, odom_all[i], cam, uv, descs))
            ts_list.append(ts)
            lids.append(ids)
        label = "tracking-camera" if spec.profile == "tracking-camera" else "vio"
        frames = [encode_hello(HelloMessage(spec.agent_id, label))] + [encode_kf(k) for k in kfs]
        streams[spec.agent_id] = AgentStream(spec.agent_id, label, frames, [ts_list[0]] + ts_list, kfs)
        truth[spec.agent_id] = AgentTruth(spec.agent_id, ts_list, [gt[i] for i in sel],
                                          [odom_all[i] for i in sel], lids, frame,
                                          float(arc[sel[-1]]))
    return streams, GroundTruthLog(truth, lm)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def write_outputs(out_dir, scenario: Scenario, streams: dict, truth: GroundTruthLog, vocab=None):
    """Logs, ground truth and odometry per agent, plus a summary JSON."""
    os.makedirs(out_dir, exist_ok=True)
    summary = {"seed": scenario.seed, "agents": {}}
    for aid, st in streams.items():
        write_log(os.path.join(out_dir, f"agent_{aid}.cglog"), st.frames)
        tr = truth.agents[aid]
        write_tum(os.path.join(out_dir, f"gt_agent_{aid}.tum"), tr.timestamps_ns, tr.poses)
        write_tum(os.path.join(out_dir, f"odom_agent_{aid}.tum"), tr.timestamps_ns, tr.odometry)
        np.savez_compressed(os.path.join(out_dir, f"landmark_ids_agent_{aid}.npz"),
                            *[np.asarray(x, dtype=np.int64) for x in tr.landmark_ids])
        summary["agents"][str(aid)] = {"label": st.label, "keyframes": len(st.keyframes),
                                       "bytes": st.payload_bytes, "path_length_m": tr.path_length,
                                       "odom_frame": tr.odom_frame.as_array().tolist()}
    scenario.save(os.path.join(out_dir, "scenario.json"))
    if vocab is not None:
        vocab.save(os.path.join(out_dir, "vocabulary.bin"))
    with open(os.path.join(out_dir, "summary.json"), "w") as f:
        json.dump(summary, f, indent=2)
    return summary


def vocabulary_corpus(streams: dict, max_docs: int = 200, seed: int = 0) -> list:
    """Per-keyframe descriptor documents sampled from the streams, for vocabulary training."""
    kfs = [k for s in streams.values() for k in s.keyframes]
    rng = np.random.default_rng(seed)
    pick = rng.choice(len(kfs), min(max_docs, len(kfs)), replace=False)
    return [kfs[i].descriptors for i in sorted(pick)]


# ---------------------------------------------------------------------------
# playback
# ---------------------------------------------------------------------------

@dataclass
class TransmissionReport:
    frames_sent: int = 0
    bytes_sent: int = 0
    wall_time_s: float = 0.0
    frames_total: int = 0


def parse_address(addr) -> tuple[str, int]:
    if isinstance(addr, tuple):
        return addr
    host, _, port = str(addr).rpartition(":")
    return (host or "127.0.0.1", int(port))


def play(frames, server_address, realtime_factor: float = 0.0, timestamps_ns=None,
         timeout: float = 10.0, drain_timeout: float = 300.0) -> TransmissionReport:
    """Send frames over TCP, spacing them by timestamp deltas times ``realtime_factor``.

    After the last frame the write side is shut down and we wait up to
    ``drain_timeout`` for the server to close, since a server applying
    back-pressure only reads the end of stream once its queue has room.
    Raises ConnectionLost (with the partial report) if the connection drops.
    """
    frames = list(frames)
    if timestamps_ns is None:
        from .wire import decode_frame
        timestamps_ns = []
        for fr in frames:
            m = decode_frame(fr)
            timestamps_ns.append(getattr(m, "timestamp_ns", timestamps_ns[-1] if timestamps_ns else 0))
    rep = TransmissionReport(frames_total=len(frames))
    t_start = time.monotonic()
    try:
        sock = socket.create_connection(parse_address(server_address), timeout=timeout)
    except OSError as e:
        raise ConnectionLost(f"cannot connect to {server_address}: {e}", rep) from e
    try:
        with sock:
            t0 = timestamps_ns[0] if timestamps_ns else 0
            for fr, ts in zip(frames, timestamps_ns):
                if realtime_factor > 0:
                    due = t_start + (ts - t0) / 1e9 * realtime_factor
                    delay = due - time.monotonic()
                    if delay > 0:
                        time.sleep(delay)
                sock.sendall(fr)
                rep.frames_sent += 1
                rep.bytes_sent += len(fr)
            sock.shutdown(socket.SHUT_WR)
            # wait for the server to close its side so every frame is known to be read
            sock.settimeout(drain_timeout)
            while sock.recv(4096):
                pass
    except OSError as e:
        rep.wall_time_s = time.monotonic() - t_start
        raise ConnectionLost(f"connection lost after {rep.frames_sent} frames: {e}", rep) from e
    rep.wall_time_s = time.monotonic() - t_start
    return rep


def expected_payload_size(n_keypoints: int, descriptor_len: int = 32) -> int:
    return keyframe_payload_size(n_keypoints, descriptor_len)
