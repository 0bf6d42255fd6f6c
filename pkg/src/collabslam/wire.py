"""Length-prefixed binary framing for agent -> server traffic.

Every frame is ``u32 length`` followed by ``length`` payload bytes; all fields
are little-endian. Keyframe payload::

    u8 type=0x01 | "CGKF" | u8 version=1 | u32 agent_id | u64 kf_seq | u64 timestamp_ns
    7 x f64 pose (qw qx qy qz px py pz) | u8 camera model (0 = pinhole)
    4 x f32 fx fy cx cy | 2 x u16 width height | u8 descriptor_type | u8 descriptor_len
    u16 N | N x (f32 u, f32 v) | N x descriptor_len bytes

so a keyframe payload is ``107 + N * (8 + descriptor_len)`` bytes. Hello payload::

    u8 type=0x02 | "CGHL" | u8 version=1 | u32 agent_id | u8 label_len | label (UTF-8)
"""
from __future__ import annotations

import collections
import struct
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import BadMagic, InvariantViolation, LengthMismatch, ProtocolError, TooManyKeypoints, UnsupportedVersion
from .geometry import Pose
from .keyframe import Keyframe, PinholeCamera

VERSION = 1
MSG_KEYFRAME = 0x01
MSG_HELLO = 0x02
MAGIC = {MSG_KEYFRAME: b"CGKF", MSG_HELLO: b"CGHL"}
CAMERA_PINHOLE = 0
MAX_KEYPOINTS = 65535
MAX_LABEL = 64

_LEN = struct.Struct("<I")
_KF_HEADER = struct.Struct("<B4sBIQQ7dB4f2HBBH")
KF_HEADER_SIZE = _KF_HEADER.size          # 107
_HELLO_HEADER = struct.Struct("<B4sBIB")
MAX_FRAME = KF_HEADER_SIZE + MAX_KEYPOINTS * (8 + 255)

KeyframeMessage = Keyframe


@dataclass(frozen=True)
class HelloMessage:
    agent_id: int
    front_end_label: str = ""
    version: int = VERSION


def keyframe_payload_size(n_keypoints: int, descriptor_len: int) -> int:
    return KF_HEADER_SIZE + n_keypoints * (8 + descriptor_len)


# ---------------------------------------------------------------------------
# encoding
# ---------------------------------------------------------------------------

def encode_kf_payload(kf: Keyframe) -> bytes:
    n = len(kf.keypoints)
    if n > MAX_KEYPOINTS:
        raise TooManyKeypoints(f"{n} keypoints, at most {MAX_KEYPOINTS} fit in a frame")
    L = kf.descriptor_len if n else int(kf.descriptors.shape[1]) if kf.descriptors.ndim == 2 else 0
    c, T = kf.camera, kf.T_ws_odom
    head = _KF_HEADER.pack(MSG_KEYFRAME, MAGIC[MSG_KEYFRAME], VERSION, kf.agent_id, kf.seq, kf.timestamp_ns,
                           *T.q, *T.p, CAMERA_PINHOLE, c.fx, c.fy, c.cx, c.cy, c.width, c.height,
                           kf.descriptor_type, L, n)
    kps = np.ascontiguousarray(kf.keypoints, dtype="<f4").tobytes()
    descs = np.ascontiguousarray(kf.descriptors, dtype=np.uint8).tobytes()
    return head + kps + descs


def encode_hello_payload(msg: HelloMessage) -> bytes:
    label = msg.front_end_label.encode("utf-8")
    if len(label) > MAX_LABEL:
        raise InvariantViolation("front_end_label", f"{len(label)} bytes > {MAX_LABEL}")
    return _HELLO_HEADER.pack(MSG_HELLO, MAGIC[MSG_HELLO], msg.version, msg.agent_id, len(label)) + label


def frame(payload: bytes) -> bytes:
    return _LEN.pack(len(payload)) + payload


def encode_kf(kf: Keyframe) -> bytes:
    """Full frame (length prefix + payload) for a keyframe."""
    return frame(encode_kf_payload(kf))


def encode_hello(msg: HelloMessage) -> bytes:
    return frame(encode_hello_payload(msg))


def encode(msg) -> bytes:
    return encode_hello(msg) if isinstance(msg, HelloMessage) else encode_kf(msg)


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _check_magic(payload: bytes):
    if len(payload) < 6:
        raise LengthMismatch(f"payload of {len(payload)} bytes is shorter than any header")
    mtype = payload[0]
    if mtype not in MAGIC or payload[1:5] != MAGIC[mtype]:
        raise BadMagic(f"type {mtype:#04x} / magic {payload[1:5]!r}")
    if payload[5] != VERSION:
        raise UnsupportedVersion(f"version {payload[5]}")
    return mtype


def decode_payload(payload: bytes):
    """Validate and decode one payload (without its length prefix)."""
    payload = bytes(payload)
    mtype = _check_magic(payload)
    if mtype == MSG_HELLO:
        if len(payload) < _HELLO_HEADER.size:
            raise LengthMismatch("truncated hello header")
        _, _, ver, agent, n = _HELLO_HEADER.unpack_from(payload)
        if len(payload) != _HELLO_HEADER.size + n:
            raise LengthMismatch(f"hello label length {n} does not match payload")
        if n > MAX_LABEL:
            raise InvariantViolation("front_end_label", f"{n} bytes > {MAX_LABEL}")
        try:
            label = payload[_HELLO_HEADER.size:].decode("utf-8")
        except UnicodeDecodeError as e:
            raise InvariantViolation("front_end_label", "not valid UTF-8") from e
        return HelloMessage(agent, label, ver)

    if len(payload) < KF_HEADER_SIZE:
        raise LengthMismatch(f"truncated keyframe header ({len(payload)} < {KF_HEADER_SIZE})")
    f = _KF_HEADER.unpack_from(payload)
    agent, seq, ts = f[3], f[4], f[5]
    q, p = np.array(f[6:10]), np.array(f[10:13])
    model = f[13]
    fx, fy, cx, cy = f[14:18]
    width, height, dtype, L, n = f[18:23]
    if len(payload) != keyframe_payload_size(n, L):
        raise LengthMismatch(f"payload {len(payload)} bytes, header implies {keyframe_payload_size(n, L)}")
    if model != CAMERA_PINHOLE:
        raise InvariantViolation("camera_model", f"unknown camera model {model}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise InvariantViolation("pose", "non-finite value")
    if abs(np.linalg.norm(q) - 1.0) > 1e-6:
        raise InvariantViolation("pose", f"quaternion norm {np.linalg.norm(q):.6g}")
    if not (np.isfinite([fx, fy, cx, cy]).all() and fx > 0 and fy > 0):
        raise InvariantViolation("intrinsics", "focal lengths must be positive and finite")
    if width == 0 or height == 0:
        raise InvariantViolation("image_size", "zero width or height")
    off = KF_HEADER_SIZE
    kps = np.frombuffer(payload, dtype="<f4", count=2 * n, offset=off).reshape(n, 2).astype(np.float32)
    off += 8 * n
    descs = np.frombuffer(payload, dtype=np.uint8, count=n * L, offset=off).reshape(n, L).copy()
    if n and not (np.isfinite(kps).all() and (kps[:, 0] >= 0).all() and (kps[:, 0] <= width).all()
                  and (kps[:, 1] >= 0).all() and (kps[:, 1] <= height).all()):
        raise InvariantViolation("keypoints", "keypoint outside image bounds")
    cam = PinholeCamera(fx, fy, cx, cy, width, height)
    return Keyframe(agent, seq, ts, Pose(q, p), cam, kps, descs, dtype)


def decode_frame(data: bytes):
    """Decode exactly one frame: ``u32 length`` + payload."""
    data = bytes(data)
    if len(data) < 4:
        raise LengthMismatch("missing length prefix")
    (n,) = _LEN.unpack_from(data)
    if len(data) - 4 != n:
        raise LengthMismatch(f"length prefix says {n} bytes, frame carries {len(data) - 4}")
    return decode_payload(data[4:])


def messages_equal(a, b) -> bool:
    if type(a) is not type(b):
        return False
    if isinstance(a, HelloMessage):
        return a == b
    return (a.agent_id == b.agent_id and a.seq == b.seq and a.timestamp_ns == b.timestamp_ns
            and np.array_equal(a.T_ws_odom.as_array(), b.T_ws_odom.as_array())
            and a.camera == b.camera and a.descriptor_type == b.descriptor_type
            and np.array_equal(a.keypoints, b.keypoints) and np.array_equal(a.descriptors, b.descriptors)
            and a.descriptor_len == b.descriptor_len)


class FrameReader:
    """Incremental stream decoder.

    ``feed`` returns a list of ``(payload_len, message_or_error)``. A frame
    whose payload fails validation is consumed whole and reported as the
    exception; an implausible length prefix makes the reader scan forward for
    the next position that looks like a frame start.
    """

    def __init__(self):
        self._buf = bytearray()
        self.bytes_consumed = 0
        self.resyncs = 0

    def _plausible(self, i: int) -> bool:
        b = self._buf
        if len(b) < i + 9:
            return True   # not enough bytes to refute; wait for more
        (n,) = _LEN.unpack_from(b, i)
        t = b[i + 4]
        return 6 <= n <= MAX_FRAME and t in MAGIC and bytes(b[i + 5:i + 9]) == MAGIC[t]

    def feed(self, data: bytes) -> list:
        self._buf.extend(data)
        out = []
        while len(self._buf) >= 4:
            (n,) = _LEN.unpack_from(self._buf)
            if not self._plausible(0):
                # drop bytes until a plausible header appears
                i = 1
                while i + 4 <= len(self._buf) and not self._plausible(i):
                    i += 1
                out.append((0, BadMagic(f"resynchronized after skipping {i} bytes")))
                del self._buf[:i]
                self.bytes_consumed += i
                self.resyncs += 1
                continue
            if len(self._buf) < 4 + n:
                break
            payload = bytes(self._buf[4:4 + n])
            del self._buf[:4 + n]
            self.bytes_consumed += 4 + n
            try:
                out.append((n, decode_payload(payload)))
            except ProtocolError as e:
                out.append((n, e))
        return out

    @property
    def pending(self) -> int:
        return len(self._buf)


# ---------------------------------------------------------------------------
# message logs
# ---------------------------------------------------------------------------

def write_log(path, frames):
    """``frames``: iterable of encoded frames or messages."""
    with open(path, "wb") as f:
        for fr in frames:
            f.write(fr if isinstance(fr, (bytes, bytearray)) else encode(fr))


def read_log_frames(path) -> list[bytes]:
    """Split a log into its raw frames (length prefix included)."""
    data = open(path, "rb").read()
    frames, off = [], 0
    while off < len(data):
        if off + 4 > len(data):
            raise LengthMismatch(f"dangling {len(data) - off} bytes at end of log")
        (n,) = _LEN.unpack_from(data, off)
        if off + 4 + n > len(data):
            raise LengthMismatch(f"frame at offset {off} runs past end of log")
        frames.append(data[off:off + 4 + n])
        off += 4 + n
    return frames


def read_log(path) -> list:
    return [decode_frame(f) for f in read_log_frames(path)]


# ---------------------------------------------------------------------------
# traffic accounting
# ---------------------------------------------------------------------------

@dataclass
class AgentTraffic:
    total_bytes: int = 0
    messages: int = 0
    window: collections.deque = field(default_factory=collections.deque)  # (t, bytes)


class TrafficCounter:
    """Per-agent byte counters with a sliding-window rate in kB/s (1 kB = 1000 B).

    Frames are accounted by their payload length (the value carried in the
    length prefix).
    """

    def __init__(self, window_s: float = 5.0, clock=time.monotonic):
        self.window_s = window_s
        self.clock = clock
        self.agents: dict[int, AgentTraffic] = {}

    def account(self, agent_id: int, frame_len: int, now: float | None = None):
        now = self.clock() if now is None else now
        a = self.agents.setdefault(agent_id, AgentTraffic())
        a.total_bytes += int(frame_len)
        a.messages += 1
        a.window.append((now, int(frame_len)))
        self._trim(a, now)
        return self

    def _trim(self, a: AgentTraffic, now: float):
        while a.window and a.window[0][0] <= now - self.window_s:
            a.window.popleft()

    def rate_kBps(self, agent_id: int, now: float | None = None) -> float:
        a = self.agents.get(agent_id)
        if a is None:
            return 0.0
        now = self.clock() if now is None else now
        self._trim(a, now)
        return sum(b for _, b in a.window) / self.window_s / 1000.0

    def total_bytes(self, agent_id: int) -> int:
        a = self.agents.get(agent_id)
        return a.total_bytes if a else 0

    def messages(self, agent_id: int) -> int:
        a = self.agents.get(agent_id)
        return a.messages if a else 0
