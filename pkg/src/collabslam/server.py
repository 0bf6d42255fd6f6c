"""TCP back-end: agent sessions, per-agent ingest queues, one processing worker.

Each connection gets a reader thread that decodes frames and appends
keyframes to its agent's bounded FIFO. A single worker pops keyframes and
hands them to the map registry under its lock, so registry mutations are
serialized. A connection whose first bytes are ``STATUS\\n`` instead gets the
plain-text status report and is closed.

Two queue disciplines are available:

``arrival``    keyframes are processed in the order they arrived; a full
               queue drops the newest keyframe and counts it.
``timestamp``  the worker waits until every live session has a keyframe
               queued (or has closed) and processes the oldest timestamp
               first; readers block on a full queue instead of dropping.
               Results then no longer depend on network interleaving.
"""
from __future__ import annotations

import configparser
import json
import logging
import os
import signal
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .errors import BindFailure, CollabSlamError, ProtocolError
from .keyframe import Keyframe
from .map_manager import LoopClosed, LoopRejected, ManagerConfig, MapRegistry, MapsFused
from .place_recognition import Vocabulary
from .stats import PipelineStats
from .wire import FrameReader, HelloMessage, TrafficCounter, decode_frame

log = logging.getLogger("collabslam.server")

CONFIG_VERSION = 1
STATUS_REQUEST = b"STATUS\n"


@dataclass
class ServerConfig:
    queue_capacity: int = 64
    ordering: str = "arrival"          # arrival | timestamp
    expected_agents: int = 0           # timestamp ordering waits for this many HELLOs
    traffic_window_s: float = 5.0
    vocabulary: str | None = None
    export_dir: str | None = None
    manager: ManagerConfig = field(default_factory=ManagerConfig)


_THRESHOLDS = {
    # key: (object path, type)
    "min_prefilter_inliers": ("verification", int),
    "min_loop_inliers": ("verification", int),
    "prefilter_threshold_deg": ("verification", float),
    "ransac_threshold_deg": ("verification", float),
    "prefilter_max_iterations": ("verification", int),
    "ransac_max_iterations": ("verification", int),
    "max_hamming": ("verification", int),
    "covariance_samples": ("verification", int),
    "q": ("manager", int),
    "top_k": ("manager", int),
    "min_loop_gap": ("manager", int),
    "min_score_ratio": ("manager", float),
    "exclusion_recent": ("manager", int),
    "seed": ("manager", int),
    "cauchy_scale": ("optimizer", float),
    "max_pgo_iterations": ("optimizer", int),
}


def _target(cfg: ServerConfig, where: str):
    m = cfg.manager
    return {"manager": m, "verification": m.verification, "optimizer": m.optimizer}[where]


def _attr(key: str) -> str:
    return "max_iterations" if key == "max_pgo_iterations" else key


def load_config(path) -> ServerConfig:
    """Read an INI file. Unknown keys are errors so typos do not pass silently."""
    cp = configparser.ConfigParser()
    if not cp.read(path):
        raise FileNotFoundError(path)
    return config_from_parser(cp, str(path))


def config_from_parser(cp: configparser.ConfigParser, source: str = "<config>") -> ServerConfig:
    version = cp.getint("collabslam", "version", fallback=None)
    if version != CONFIG_VERSION:
        raise ValueError(f"{source}: [collabslam] version must be {CONFIG_VERSION}, got {version}")
    cfg = ServerConfig()
    if cp.has_section("server"):
        s = cp["server"]
        for key in s:
            if key == "queue_capacity":
                cfg.queue_capacity = s.getint(key)
            elif key == "ordering":
                cfg.ordering = s[key].strip()
            elif key == "expected_agents":
                cfg.expected_agents = s.getint(key)
            elif key == "traffic_window_s":
                cfg.traffic_window_s = s.getfloat(key)
            elif key == "vocabulary":
                cfg.vocabulary = s[key].strip()
            elif key == "export_dir":
                cfg.export_dir = s[key].strip()
            else:
                raise ValueError(f"{source}: unknown key [server] {key}")
    if cp.has_section("thresholds"):
        for key, raw in cp["thresholds"].items():
            if key not in _THRESHOLDS:
                raise ValueError(f"{source}: unknown key [thresholds] {key}")
            where, typ = _THRESHOLDS[key]
            setattr(_target(cfg, where), _attr(key), typ(raw))
    for sec in cp.sections():
        if sec.startswith("front_end "):
            label = sec[len("front_end "):].strip()
            cfg.manager.front_end_sigmas[label] = (cp.getfloat(sec, "sigma_p"), cp.getfloat(sec, "sigma_rot_deg"))
        elif sec == "odometry":
            cfg.manager.default_sigma_p = cp.getfloat(sec, "sigma_p", fallback=cfg.manager.default_sigma_p)
            cfg.manager.default_sigma_rot_deg = cp.getfloat(sec, "sigma_rot_deg",
                                                            fallback=cfg.manager.default_sigma_rot_deg)
    validate_config(cfg)
    return cfg


def config_to_ini(cfg: ServerConfig) -> str:
    cp = configparser.ConfigParser()
    cp["collabslam"] = {"version": str(CONFIG_VERSION)}
    srv = {"queue_capacity": cfg.queue_capacity, "ordering": cfg.ordering,
           "expected_agents": cfg.expected_agents, "traffic_window_s": cfg.traffic_window_s}
    if cfg.vocabulary:
        srv["vocabulary"] = cfg.vocabulary
    if cfg.export_dir:
        srv["export_dir"] = cfg.export_dir
    cp["server"] = {k: str(v) for k, v in srv.items()}
    cp["thresholds"] = {k: str(getattr(_target(cfg, w), _attr(k))) for k, (w, _) in _THRESHOLDS.items()}
    cp["odometry"] = {"sigma_p": str(cfg.manager.default_sigma_p),
                      "sigma_rot_deg": str(cfg.manager.default_sigma_rot_deg)}
    for label, (sp, sr) in sorted(cfg.manager.front_end_sigmas.items()):
        cp[f"front_end {label}"] = {"sigma_p": str(sp), "sigma_rot_deg": str(sr)}
    from io import StringIO
    buf = StringIO()
    cp.write(buf)
    return buf.getvalue()


def validate_config(cfg: ServerConfig):
    if cfg.ordering not in ("arrival", "timestamp"):
        raise ValueError(f"ordering must be 'arrival' or 'timestamp', got {cfg.ordering!r}")
    if cfg.queue_capacity < 1:
        raise ValueError("queue_capacity must be >= 1")
    v = cfg.manager.verification
    if v.min_prefilter_inliers < 8 or v.min_loop_inliers < 17:
        raise ValueError("inlier gates below the minimal solver sizes")
    if cfg.manager.q < 1 or cfg.manager.top_k < 1:
        raise ValueError("q and top_k must be >= 1")
    for label, (sp, sr) in cfg.manager.front_end_sigmas.items():
        if sp <= 0 or sr <= 0:
            raise ValueError(f"front end {label!r}: sigmas must be positive")


# ---------------------------------------------------------------------------
# sessions
# ---------------------------------------------------------------------------

@dataclass
class SessionState:
    peer: str
    agent_id: int | None = None
    state: str = "handshaking"     # handshaking | streaming | closed
    label: str = ""
    last_kf_seq: int | None = None
    frames: int = 0
    error: str = ""
    traffic: TrafficCounter | None = None


class _AgentQueue:
    def __init__(self):
        self.items: deque = deque()
        self.live = True


class Server:
    def __init__(self, vocab: Vocabulary, config: ServerConfig | None = None, bind=("127.0.0.1", 0)):
        self.config = config or ServerConfig()
        validate_config(self.config)
        self.stats = PipelineStats()
        self.registry = MapRegistry(vocab, self.config.manager, self.stats)
        self.traffic = TrafficCounter(self.config.traffic_window_s)
        self.bind = bind if isinstance(bind, tuple) else _parse_bind(bind)
        self.sessions: list[SessionState] = []
        self._queues: dict[int, _AgentQueue] = {}
        self._arrival = 0
        self._cv = threading.Condition()
        self._stop = threading.Event()
        self._threads: list[threading.Thread] = []
        self._sock: socket.socket | None = None
        self._busy = False
        self.events: list = []

    # -- lifecycle ---------------------------------------------------------
    @property
    def address(self) -> tuple[str, int]:
        return self._sock.getsockname()[:2]

    def start(self) -> "Server":
        try:
            s = socket.create_server(self.bind, reuse_port=False)
        except OSError as e:
            raise BindFailure(f"cannot bind {self.bind[0]}:{self.bind[1]}: {e}") from e
        s.settimeout(0.2)
        self._sock = s
        for target, name in ((self._accept_loop, "accept"), (self._worker, "worker")):
            t = threading.Thread(target=target, name=f"collabslam-{name}", daemon=True)
            t.start()
            self._threads.append(t)
        log.info("listening on %s:%d", *self.address)
        return self

    def shutdown(self, drain: bool = True, timeout: float = 60.0) -> list[str]:
        """Stop accepting, optionally finish queued keyframes, write exports."""
        if drain:
            self.wait_idle(timeout)
        self._stop.set()
        with self._cv:
            self._cv.notify_all()
        for t in self._threads:
            t.join(timeout=5)
        if self._sock is not None:
            self._sock.close()
        paths = []
        if self.config.export_dir:
            with self.registry.lock:
                paths = self.registry.export_all(self.config.export_dir)
            p = os.path.join(self.config.export_dir, "stats.json")
            with open(p, "w") as f:
                json.dump(self.status_snapshot(), f, indent=1, default=str)
            paths.append(p)
            log.info("exports written to %s", self.config.export_dir)
        return paths

    def wait_idle(self, timeout: float = 60.0, settle: float = 0.0) -> bool:
        """Block until every session has closed and all queues are empty."""
        deadline = time.monotonic() + timeout
        with self._cv:
            while True:
                idle = (not self._busy and all(not q.items for q in self._queues.values())
                        and all(s.state == "closed" for s in self.sessions))
                if idle:
                    break
                left = deadline - time.monotonic()
                if left <= 0:
                    return False
                self._cv.wait(min(left, 0.1))
        if settle:
            time.sleep(settle)
        return True

    # -- network -----------------------------------------------------------
    def _accept_loop(self):
        while not self._stop.is_set():
            try:
                conn, peer = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                break
            t = threading.Thread(target=self._session, args=(conn, f"{peer[0]}:{peer[1]}"), daemon=True)
            t.start()

    def _session(self, conn: socket.socket, peer: str):
        sess = SessionState(peer, traffic=self.traffic)
        reader = FrameReader()
        conn.settimeout(0.5)
        first = b""
        try:
            with conn:
                # sniff for the status request before treating bytes as frames
                while len(first) < len(STATUS_REQUEST) and STATUS_REQUEST.startswith(first):
                    chunk = self._recv(conn)
                    if chunk is None:
                        return
                    if not chunk:
                        break
                    first += chunk
                if first.startswith(STATUS_REQUEST):
                    conn.sendall(self.status_text().encode())
                    return
                with self._cv:
                    self.sessions.append(sess)
                data = first
                while data:
                    for n, msg in reader.feed(data):
                        if not self._handle(sess, n, msg):
                            return
                    data = self._recv(conn)
        except OSError as e:
            sess.error = sess.error or f"connection error: {e}"
        except Exception as e:      # a broken session must not take the server down
            log.exception("session %s failed", peer)
            sess.error = f"{type(e).__name__}: {e}"
        finally:
            self._close_session(sess)

    def _recv(self, conn):
        while not self._stop.is_set():
            try:
                return conn.recv(65536)
            except socket.timeout:
                continue
        return None

    def _handle(self, sess: SessionState, n: int, msg) -> bool:
        """Process one decoded frame; False closes the session."""
        if isinstance(msg, Exception):
            return self._protocol_error(sess, f"{type(msg).__name__}: {msg}")
        sess.frames += 1
        if isinstance(msg, HelloMessage):
            if sess.state != "handshaking":
                return self._protocol_error(sess, "duplicate HELLO")
            with self._cv:
                live = {s.agent_id for s in self.sessions if s.state == "streaming"}
                if msg.agent_id in live:
                    return self._protocol_error(sess, f"agent_id {msg.agent_id} already connected")
                sess.agent_id, sess.label, sess.state = msg.agent_id, msg.front_end_label, "streaming"
                q = self._queues.setdefault(msg.agent_id, _AgentQueue())
                q.live = True
                self._cv.notify_all()
            with self.registry.lock:
                self.registry.register_agent(msg.agent_id, msg.front_end_label)
            self.traffic.account(msg.agent_id, n)
            log.info("agent %d (%s) connected from %s", msg.agent_id, msg.front_end_label, sess.peer)
            return True
        if sess.state != "streaming":
            return self._protocol_error(sess, "keyframe before HELLO")
        if msg.agent_id != sess.agent_id:
            return self._protocol_error(sess, f"keyframe for agent {msg.agent_id} on session of {sess.agent_id}")
        self.traffic.account(sess.agent_id, n)
        sess.last_kf_seq = msg.seq
        self._enqueue(sess, msg)
        return True

    def _protocol_error(self, sess: SessionState, why: str) -> bool:
        sess.error = why
        log.warning("closing session %s: %s", sess.peer, why)
        return False

    def _close_session(self, sess: SessionState):
        with self._cv:
            sess.state = "closed"
            if sess.agent_id is not None and sess.agent_id in self._queues:
                if not any(s.agent_id == sess.agent_id and s.state == "streaming" for s in self.sessions):
                    self._queues[sess.agent_id].live = False
            self._cv.notify_all()

    def _enqueue(self, sess: SessionState, kf: Keyframe):
        cap = self.config.queue_capacity
        with self._cv:
            q = self._queues[sess.agent_id]
            if self.config.ordering == "timestamp":
                while len(q.items) >= cap and not self._stop.is_set():
                    self._cv.wait(0.1)
            elif len(q.items) >= cap:
                self.stats.count("keyframes_dropped")
                log.debug("agent %d queue full, dropping kf %d", sess.agent_id, kf.seq)
                return
            q.items.append((self._arrival, kf))
            self._arrival += 1
            self._cv.notify_all()

    # -- processing --------------------------------------------------------
    def _next_item(self):
        """Pop the next keyframe per the ordering discipline, or None if nothing is ready."""
        qs = self._queues
        if self.config.ordering == "arrival":
            heads = [(q.items[0][0], a) for a, q in qs.items() if q.items]
        else:
            if len(qs) < self.config.expected_agents:
                return None
            if any(q.live and not q.items for q in qs.values()):
                return None
            heads = [(q.items[0][1].timestamp_ns, a) for a, q in qs.items() if q.items]
        if not heads:
            return None
        _, a = min(heads)
        return qs[a].items.popleft()[1]

    def _worker(self):
        while not self._stop.is_set():
            with self._cv:
                kf = self._next_item()
                while kf is None:
                    if self._stop.is_set():
                        return
                    self._cv.wait(0.1)
                    kf = self._next_item()
                self._busy = True
                self._cv.notify_all()
            try:
                with self.registry.lock:
                    events = self.registry.ingest_keyframe(kf)
                for ev in events:
                    if isinstance(ev, MapsFused):
                        log.info("fused map %d into %d via %s-%s (%d inliers)", ev.absorbed_map,
                                 ev.reference_map, ev.query_kf, ev.candidate_kf, ev.n_inliers)
                    elif isinstance(ev, LoopClosed):
                        log.info("loop %s-%s in map %d (%d inliers)", ev.query_kf, ev.candidate_kf,
                                 ev.map_id, ev.n_inliers)
                    elif isinstance(ev, LoopRejected):
                        log.debug("rejected %s-%s: %s", ev.query_kf, ev.candidate_kf, ev.reason)
                self.events.extend(events)
            except CollabSlamError as e:
                log.error("keyframe %s failed: %s", kf.kf_id, e)
            finally:
                with self._cv:
                    self._busy = False
                    self._cv.notify_all()

    # -- status ------------------------------------------------------------
    def status_snapshot(self) -> dict:
        with self.registry.lock:
            summ = self.registry.summary()
        with self._cv:
            sessions = [{"peer": s.peer, "agent_id": s.agent_id, "state": s.state, "label": s.label,
                         "last_kf_seq": s.last_kf_seq, "error": s.error} for s in self.sessions]
            queued = {a: len(q.items) for a, q in self._queues.items()}
        agents = sorted(set(summ["keyframes"]) | set(self.traffic.agents))
        return {
            "maps": summ["maps"],
            "agents": len(agents),
            "keyframes": {a: summ["keyframes"].get(a, 0) for a in agents},
            "queued": queued,
            "loops": summ["loops"],
            "fusions": summ["fusions"],
            "traffic_kBps": {a: self.traffic.rate_kBps(a) for a in agents},
            "traffic_bytes": {a: self.traffic.total_bytes(a) for a in agents},
            "sessions": sessions,
            "stats": self.stats.snapshot(),
        }

    def status_text(self) -> str:
        return format_status(self.status_snapshot())


def format_status(snap: dict) -> str:
    """One ``name value`` pair per line."""
    st = snap["stats"]
    lines = [f"maps {snap['maps']}", f"agents {snap['agents']}",
             f"live_sessions {sum(s['state'] == 'streaming' for s in snap['sessions'])}",
             f"loops_detected {st['loops_detected']}", f"loops_accepted {st['loops_accepted']}",
             f"loops_rejected {st['loops_rejected']}", f"loops_rate_limited {st['loops_rate_limited']}",
             f"fusions {st['fusions']}", f"keyframes_processed {st['keyframes_processed']}",
             f"keyframes_dropped {st['keyframes_dropped']}"]
    for a, n in snap["keyframes"].items():
        lines.append(f"agent_{a}_keyframes {n}")
        lines.append(f"agent_{a}_traffic_kBps {snap['traffic_kBps'].get(a, 0.0):.3f}")
    for stage, s in st["latency"].items():
        lines.append(f"latency_{stage}_count {s['count']}")
        lines.append(f"latency_{stage}_mean_ms {s['mean_ms']:.3f}")
        lines.append(f"latency_{stage}_median_ms {s['median_ms']:.3f}")
    return "\n".join(lines) + "\n"


def query_status(address, timeout: float = 5.0) -> dict:
    """Fetch the text status endpoint and parse it into a dict."""
    from .simulator import parse_address
    with socket.create_connection(parse_address(address), timeout=timeout) as s:
        s.sendall(STATUS_REQUEST)
        chunks = []
        while True:
            c = s.recv(65536)
            if not c:
                break
            chunks.append(c)
    out = {}
    for line in b"".join(chunks).decode().splitlines():
        k, _, v = line.partition(" ")
        try:
            out[k] = int(v)
        except ValueError:
            out[k] = float(v)
    return out


def _parse_bind(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    return (host or "0.0.0.0", int(port))


def serve(bind_address, config: ServerConfig, vocab: Vocabulary):
    """Run until SIGINT/SIGTERM, then flush exports."""
    srv = Server(vocab, config, bind_address).start()
    stop = threading.Event()

    def _on_signal(signum, _frame):
        log.info("signal %d, shutting down", signum)
        stop.set()

    old = {s: signal.signal(s, _on_signal) for s in (signal.SIGINT, signal.SIGTERM)}
    try:
        while not stop.wait(0.5):
            pass
    finally:
        for s, h in old.items():
            signal.signal(s, h)
        srv.shutdown(drain=False)
    return srv


# ---------------------------------------------------------------------------
# offline processing
# ---------------------------------------------------------------------------

def merged_frames(streams: dict):
    """(timestamp_ns, agent_id, frame) over all agents, oldest first; HELLOs lead each agent."""
    rows = []
    for aid, st in streams.items():
        for i, (ts, fr) in enumerate(zip(st.timestamps_ns, st.frames)):
            rows.append((int(ts), int(aid), i, fr))
    rows.sort(key=lambda r: r[:3])
    return [(ts, aid, fr) for ts, aid, _, fr in rows]


def process_streams(registry: MapRegistry, streams: dict) -> list:
    """Decode and ingest every agent's frames in global timestamp order (no network)."""
    events = []
    for _, _, fr in merged_frames(streams):
        t0 = time.perf_counter()
        msg = decode_frame(fr)
        registry.stats.record("decode", time.perf_counter() - t0)
        if isinstance(msg, HelloMessage):
            registry.register_agent(msg.agent_id, msg.front_end_label)
            continue
        events.extend(registry.ingest_keyframe(msg))
    return events


def process_log_files(registry: MapRegistry, paths) -> list:
    """Same as :func:`process_streams` for message logs on disk."""
    from .simulator import AgentStream
    from .wire import read_log_frames
    streams = {}
    for p in paths:
        frames = read_log_frames(p)
        msgs = [decode_frame(f) for f in frames]
        kfs = [m for m in msgs if not isinstance(m, HelloMessage)]
        ts = [kfs[0].timestamp_ns if kfs else 0]
        ts += [k.timestamp_ns for k in kfs]
        hello = msgs[0]
        streams[hello.agent_id] = AgentStream(hello.agent_id, getattr(hello, "front_end_label", ""),
                                              frames, ts[:len(frames)], kfs)
    return process_streams(registry, streams)
