"""Map registry: per-keyframe place recognition, verification, loop closure and map fusion.

Every agent starts in its own map. A verified loop between two maps fuses
them into the older one; a verified loop inside one map adds a loop edge.
Either way the affected map is optimized right away.
"""
from __future__ import annotations

import csv
import os
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import (CollabSlamError, DegenerateSamples, DuplicateLoop, InsufficientNeighbors, LoopTooRecent,
                     SameMap, SetRejected, VerificationFailed)
from .geometry import Pose, compose, inverse, rotation_angle
from .keyframe import Keyframe
from .place_recognition import KeyframeDatabase, Vocabulary
from .pose_graph import (MapGraph, OptimizationReport, OptimizerConfig, add_keyframe_node, add_loop_edge,
                         odometry_information, optimize)
from .relpose.covariance import LoopConstraint
from .relpose.rig import build_rig
from .relpose.verify import VerificationConfig, job_seed, save_job, verify_loop
from .stats import PipelineStats


@dataclass
class ManagerConfig:
    q: int = 4
    top_k: int = 3
    min_score_ratio: float = 0.5
    exclusion_recent: int = 20
    min_loop_gap: int = 10
    query_neighbors: int = 1          # 2-member query rig
    candidate_neighbors: int = 2      # 3-member candidate rig
    seed: int = 0
    default_sigma_p: float = 0.05
    default_sigma_rot_deg: float = 0.5
    front_end_sigmas: dict = field(default_factory=dict)   # label -> (sigma_p, sigma_rot_deg)
    verification: VerificationConfig = field(default_factory=VerificationConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    job_dir: str | None = None        # dump every verification job here when set


# -- events -------------------------------------------------------------------

@dataclass
class LoopClosed:
    map_id: int
    query_kf: tuple
    candidate_kf: tuple
    n_inliers: int
    report: OptimizationReport


@dataclass
class MapsFused:
    reference_map: int
    absorbed_map: int
    query_kf: tuple
    candidate_kf: tuple
    T_w1w2: Pose
    n_inliers: int
    report: OptimizationReport


@dataclass
class LoopRejected:
    query_kf: tuple
    candidate_kf: tuple
    reason: str
    inliers: int = 0


@dataclass
class LoopRecord:
    query_kf: tuple
    candidate_kf: tuple
    n_inliers: int
    T_cq: Pose
    covariance_trace: float
    kind: str             # intra | fusion
    timestamp_ns: int
    wall_time: float


class MapRegistry:
    """Owner of all maps. Not internally locked: callers serialize ``ingest_keyframe``."""

    def __init__(self, vocab: Vocabulary, config: ManagerConfig | None = None,
                 stats: PipelineStats | None = None):
        self.config = config or ManagerConfig()
        self.vocab = vocab
        self.database = KeyframeDatabase(vocab)
        self.stats = stats or PipelineStats()
        self.maps: dict[int, MapGraph] = {}
        self.agent_to_map: dict[int, int] = {}
        self.agent_labels: dict[int, str] = {}
        self.keyframes: dict[tuple, Keyframe] = {}
        self.trajectories: dict[int, list] = {}        # agent -> keyframes in arrival order
        self.loop_log: list[LoopRecord] = []
        self.last_loop_index: dict[int, int] = {}      # agent -> trajectory index at last accepted loop
        self.pgo_runs = 0
        self.fusion_events = 0
        self._next_map = 0
        self.lock = threading.RLock()

    # -- bookkeeping -------------------------------------------------------
    def register_agent(self, agent_id: int, label: str = ""):
        self.agent_labels.setdefault(agent_id, label)

    def odometry_information(self, agent_id: int) -> np.ndarray:
        label = self.agent_labels.get(agent_id, "")
        sp, sr = self.config.front_end_sigmas.get(
            label, (self.config.default_sigma_p, self.config.default_sigma_rot_deg))
        return odometry_information(sp, sr)

    def map_of(self, kf_id) -> int:
        return self.agent_to_map[kf_id[0]]

    def _new_map(self, agent_id: int) -> MapGraph:
        g = MapGraph(self._next_map)
        self._next_map += 1
        self.maps[g.map_id] = g
        self.agent_to_map[agent_id] = g.map_id
        return g

    def kf_since_last_loop(self, agent_id: int) -> int | None:
        last = self.last_loop_index.get(agent_id)
        if last is None:
            return None
        return len(self.trajectories[agent_id]) - 1 - last

    def _check_gap(self, agent_id: int):
        gap = self.kf_since_last_loop(agent_id)
        if gap is not None and gap < self.config.min_loop_gap:
            raise LoopTooRecent(f"agent {agent_id}: {gap} keyframes since last loop, "
                                f"need {self.config.min_loop_gap}")

    # -- ingestion ---------------------------------------------------------
    def ingest_keyframe(self, kf: Keyframe) -> list:
        """Insert ``kf``, query the database and verify candidates oldest map first."""
        cfg = self.config
        aid = kf.agent_id
        if aid not in self.agent_to_map:
            self.register_agent(aid)
            self._new_map(aid)
        g = self.maps[self.agent_to_map[aid]]
        add_keyframe_node(g, kf.kf_id, kf.T_ws_odom, cfg.q, self.odometry_information(aid), kf.timestamp_ns)
        self.keyframes[kf.kf_id] = kf
        traj = self.trajectories.setdefault(aid, [])
        traj.append(kf)
        self.stats.count("keyframes_processed")

        t0 = time.perf_counter()
        recent = [k.kf_id for k in traj[-cfg.exclusion_recent:]]
        vec = self.database.add_keyframe(kf.kf_id, kf.descriptors)
        candidates = self.database.query(vec, cfg.top_k, exclusion=recent, min_score_ratio=cfg.min_score_ratio)
        self.stats.record("bow", time.perf_counter() - t0)
        if not candidates:
            return []
        gap = self.kf_since_last_loop(aid)
        if gap is not None and gap < cfg.min_loop_gap:
            self.stats.count("rate_limited")
            return []

        order = sorted(candidates, key=lambda c: (self.map_of(c[0]), -c[1]))
        events = []
        for cand_id, _score in order:
            ev = self._try_candidate(kf.kf_id, cand_id)
            if ev is None:
                continue
            events.append(ev)
            if not isinstance(ev, LoopRejected):
                break
        return events

    def _rigs(self, query_id, cand_id):
        rig_q = build_rig(self.trajectories[query_id[0]], query_id, self.config.query_neighbors)
        rig_c = build_rig(self.trajectories[cand_id[0]], cand_id, self.config.candidate_neighbors)
        return rig_q, rig_c

    def _try_candidate(self, query_id, cand_id):
        cfg = self.config
        same_map = self.map_of(query_id) == self.map_of(cand_id)
        if same_map and self.maps[self.map_of(query_id)].has_edge(query_id, cand_id):
            return None
        try:
            rig_q, rig_c = self._rigs(query_id, cand_id)
        except InsufficientNeighbors:
            return None
        seed = job_seed(cfg.seed, query_id, cand_id)
        rng = np.random.default_rng(seed)
        t0 = time.perf_counter()
        try:
            constraint, result, timings = verify_loop(rig_q, rig_c, cfg.verification, rng)
        except (SetRejected, VerificationFailed, DegenerateSamples) as e:
            self.stats.loop_result(False)
            self.stats.record("loop_total", time.perf_counter() - t0)
            self._dump_job(rig_q, rig_c, seed, "rejected")
            return LoopRejected(query_id, cand_id, f"{type(e).__name__}: {e}", getattr(e, "inliers", 0))
        for stage, dt in timings.items():
            self.stats.record(stage, dt)
        self.stats.loop_result(True)
        self._dump_job(rig_q, rig_c, seed, "accepted", result, constraint)
        if same_map:
            ev = self.apply_loop(constraint)
        else:
            ev = self.fuse_maps(constraint)
        self.stats.record("loop_total", time.perf_counter() - t0)
        return ev

    def _dump_job(self, rig_q, rig_c, seed, tag, result=None, constraint=None):
        if not self.config.job_dir:
            return
        os.makedirs(self.config.job_dir, exist_ok=True)
        q, c = rig_q.reference_kf_id, rig_c.reference_kf_id
        path = os.path.join(self.config.job_dir, f"job_{tag}_{q[0]}-{q[1]}_{c[0]}-{c[1]}.npz")
        save_job(path, rig_q, rig_c, self.config.verification, seed, result=result, constraint=constraint)

    # -- loop application --------------------------------------------------
    def _record(self, constraint: LoopConstraint, kind: str):
        q = constraint.query_kf_id
        self.loop_log.append(LoopRecord(q, constraint.candidate_kf_id, constraint.n_inliers, constraint.T_cq,
                                        float(np.trace(constraint.covariance)), kind,
                                        self.keyframes[q].timestamp_ns if q in self.keyframes else 0,
                                        time.time()))
        self.last_loop_index[q[0]] = len(self.trajectories[q[0]]) - 1

    def _optimize(self, g: MapGraph) -> OptimizationReport:
        t0 = time.perf_counter()
        rep = optimize(g, self.config.optimizer)
        self.stats.record("pgo", time.perf_counter() - t0)
        self.pgo_runs += 1
        return rep

    def apply_loop(self, constraint: LoopConstraint) -> LoopClosed:
        q, c = constraint.query_kf_id, constraint.candidate_kf_id
        if self.map_of(q) != self.map_of(c):
            raise CollabSlamError("keyframes are in different maps; use fuse_maps")
        self._check_gap(q[0])
        g = self.maps[self.map_of(q)]
        if g.has_edge(q, c) and any(e.kind == "loop" and {e.from_kf, e.to_kf} == {q, c} for e in g.edges):
            raise DuplicateLoop(f"loop {c} -> {q} already in map {g.map_id}")
        add_loop_edge(g, c, q, constraint.T_cq, constraint.information)
        rep = self._optimize(g)
        self._record(constraint, "intra")
        return LoopClosed(g.map_id, q, c, constraint.n_inliers, rep)

    def fuse_maps(self, constraint: LoopConstraint) -> MapsFused:
        q, c = constraint.query_kf_id, constraint.candidate_kf_id
        mq, mc = self.map_of(q), self.map_of(c)
        if mq == mc:
            raise SameMap(f"{q} and {c} are both in map {mq}")
        self._check_gap(q[0])
        ref_id, abs_id = min(mq, mc), max(mq, mc)
        ref, absorbed = self.maps[ref_id], self.maps[abs_id]
        # T_w1w2 = T_w1,x * T_xy * T_w2,y^-1 with x in the reference and y in the absorbed map
        if ref_id == mc:
            T = compose(compose(ref.nodes[c].T_ws, constraint.T_cq), inverse(absorbed.nodes[q].T_ws))
        else:
            T = compose(compose(ref.nodes[q].T_ws, inverse(constraint.T_cq)), inverse(absorbed.nodes[c].T_ws))
        for k, n in absorbed.nodes.items():
            n.T_ws = compose(T, n.T_ws)
            ref.nodes[k] = n
        ref.edges.extend(absorbed.edges)
        for agent, chain in absorbed.chains.items():
            ref.chains[agent] = chain
            self.agent_to_map[agent] = ref_id
        del self.maps[abs_id]
        add_loop_edge(ref, c, q, constraint.T_cq, constraint.information)
        rep = self._optimize(ref)
        self._record(constraint, "fusion")
        self.fusion_events += 1
        self.stats.count("fusions")
        return MapsFused(ref_id, abs_id, q, c, T, constraint.n_inliers, rep)

    # -- views and exports -------------------------------------------------
    def agent_poses(self, agent_id: int):
        """(timestamps_ns, current pose estimates) of an agent's keyframes."""
        g = self.maps[self.agent_to_map[agent_id]]
        ids = g.chains.get(agent_id, [])
        return [g.nodes[k].timestamp_ns for k in ids], [g.nodes[k].T_ws for k in ids]

    def agent_odometry(self, agent_id: int):
        traj = self.trajectories.get(agent_id, [])
        return [k.timestamp_ns for k in traj], [k.T_ws_odom for k in traj]

    def export_trajectories(self, out_dir, prefix: str = "traj", odometry: bool = False) -> list[str]:
        """One TUM file per agent; ``odometry`` writes the poses as received instead."""
        from .evaluation import write_tum
        os.makedirs(out_dir, exist_ok=True)
        paths = []
        for aid in sorted(self.agent_to_map):
            ts, poses = self.agent_odometry(aid) if odometry else self.agent_poses(aid)
            p = os.path.join(out_dir, f"{prefix}_agent_{aid}.tum")
            write_tum(p, ts, poses)
            paths.append(p)
        return paths

    def export_loop_log(self, path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["query_kf", "candidate_kf", "inliers", "tx", "ty", "tz", "translation_m",
                        "rotation_deg", "covariance_trace", "kind", "timestamp_ns"])
            for r in self.loop_log:
                w.writerow([f"{r.query_kf[0]}:{r.query_kf[1]}", f"{r.candidate_kf[0]}:{r.candidate_kf[1]}",
                            r.n_inliers, *(f"{x:.6f}" for x in r.T_cq.p), f"{np.linalg.norm(r.T_cq.p):.6f}",
                            f"{np.rad2deg(rotation_angle(r.T_cq.R)):.6f}", f"{r.covariance_trace:.6e}",
                            r.kind, r.timestamp_ns])

    def export_all(self, out_dir) -> list[str]:
        paths = self.export_trajectories(out_dir)
        paths += self.export_trajectories(out_dir, "odom", odometry=True)
        lp = os.path.join(out_dir, "loops.csv")
        self.export_loop_log(lp)
        from .pose_graph import export_g2o
        for mid, g in self.maps.items():
            gp = os.path.join(out_dir, f"map_{mid}.g2o")
            export_g2o(g, gp)
            paths.append(gp)
        return paths + [lp]

    def summary(self) -> dict:
        return {"maps": len(self.maps), "agents": len(self.agent_to_map),
                "keyframes": {a: len(t) for a, t in sorted(self.trajectories.items())},
                "loops": len(self.loop_log), "fusions": self.fusion_events, "pgo_runs": self.pgo_runs}
