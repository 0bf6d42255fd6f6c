import numpy as np
import pytest

from collabslam.errors import CollabSlamError, DuplicateLoop, LoopTooRecent, SameMap
from collabslam.evaluation import Trajectory, joint_ate, read_tum
from collabslam.geometry import Pose, compose, inverse, quat_exp
from collabslam.map_manager import LoopClosed, LoopRejected, ManagerConfig, MapRegistry, MapsFused
from collabslam.pose_graph import LOOP, import_g2o
from collabslam.relpose.covariance import LoopConstraint
from collabslam.server import process_streams
from collabslam.simulator import AgentSpec, DriftSpec, Scenario, TrajectorySpec, generate


@pytest.fixture(scope="module")
def small_run(small_world):
    sc, streams, truth, vocab = small_world
    reg = MapRegistry(vocab)
    events = process_streams(reg, streams)
    return reg, events, truth


def test_two_agents_fuse_into_one_map(small_run):
    reg, events, _ = small_run
    fused = [e for e in events if isinstance(e, MapsFused)]
    assert len(fused) == 1 and len(reg.maps) == 1
    assert set(reg.agent_to_map.values()) == {fused[0].reference_map}
    assert fused[0].reference_map < fused[0].absorbed_map
    assert len(reg.maps) == len(reg.agent_to_map) - reg.fusion_events


def test_every_accepted_loop_is_one_edge_and_one_pgo(small_run):
    reg, events, _ = small_run
    accepted = [e for e in events if isinstance(e, (LoopClosed, MapsFused))]
    g = next(iter(reg.maps.values()))
    assert len(g.loop_edges()) == len(accepted) == len(reg.loop_log) == reg.pgo_runs
    for r in reg.loop_log:
        assert r.query_kf in g.nodes and r.candidate_kf in g.nodes


def test_min_loop_gap_respected(small_run):
    reg, _, _ = small_run
    per_agent = {}
    for r in reg.loop_log:
        per_agent.setdefault(r.query_kf[0], []).append(r.query_kf[1])
    for seqs in per_agent.values():
        assert all(b - a >= reg.config.min_loop_gap for a, b in zip(seqs, seqs[1:]))


def test_optimized_trajectories_beat_odometry(small_run):
    reg, _, truth = small_run
    est, gt, odo = [], [], []
    for a in sorted(truth.agents):
        ts, P = reg.agent_poses(a)
        tr = truth.agents[a]
        n = len(ts)
        est.append(Trajectory.from_poses(ts, P))
        gt.append(Trajectory.from_poses(tr.timestamps_ns[:n], tr.poses[:n]))
        odo.append(Trajectory.from_poses(tr.timestamps_ns[:n], tr.odometry[:n]))
    assert joint_ate(est, gt) < joint_ate(odo, gt)


def test_exports(small_run, tmp_path):
    reg, _, _ = small_run
    paths = reg.export_all(tmp_path)
    for a in reg.agent_to_map:
        tr = read_tum(tmp_path / f"traj_agent_{a}.tum")
        ts, P = reg.agent_poses(a)
        np.testing.assert_allclose(tr.positions, [T.p for T in P], atol=1e-8)
        assert len(read_tum(tmp_path / f"odom_agent_{a}.tum")) == len(ts)
    rows = (tmp_path / "loops.csv").read_text().strip().splitlines()
    assert len(rows) == 1 + len(reg.loop_log)
    g = import_g2o(tmp_path / "map_0.g2o")
    assert len(g.nodes) == sum(reg.summary()["keyframes"].values())
    assert len([e for e in g.edges if e.kind == LOOP]) == len(reg.loop_log)
    assert all(str(p).startswith(str(tmp_path)) for p in paths)


# -- hand-driven registry ------------------------------------------------------

FRAMES = {1: Pose(quat_exp([0, 0, 0.4]), [2.0, -1.0, 0.0]), 2: Pose(quat_exp([0, 0, -1.1]), [-3.0, 4.0, 0.5])}


@pytest.fixture(scope="module")
def exact_world(small_world):
    """Noise-free, drift-free agents with different odometry frames."""
    vocab = small_world[3]
    agents = [AgentSpec(a, TrajectorySpec("circle", size=[4.0, 4.0], laps=0.6, phase=0.2 * a), drift=DriftSpec(0.0),
                        odom_frame=FRAMES[a].as_array().tolist()) for a in (1, 2)]
    sc = Scenario(agents, keypoint_sigma_px=0.0, descriptor_flip_p=0.0, max_keypoints=60, seed=5)
    streams, truth = generate(sc)
    return vocab, streams, truth


def silent_registry(vocab, streams, n=None):
    """Registry fed with keyframes but no place-recognition candidates."""
    reg = MapRegistry(vocab, ManagerConfig(top_k=0))
    for a, st in streams.items():
        for kf in st.keyframes[:n]:
            assert reg.ingest_keyframe(kf) == []
    return reg


def gt_constraint(truth, q, c, inliers=500):
    T_cq = compose(inverse(truth.agents[c[0]].poses[c[1]]), truth.agents[q[0]].poses[q[1]])
    return LoopConstraint(q, c, T_cq, np.eye(6) * 1e4, np.eye(6) * 1e-4, inliers)


def test_first_keyframe_creates_a_map(exact_world):
    vocab, streams, _ = exact_world
    reg = MapRegistry(vocab)
    assert reg.ingest_keyframe(streams[1].keyframes[0]) == []
    assert len(reg.maps) == 1 and reg.agent_to_map == {1: 0}


def test_fusion_with_true_constraint_recovers_ground_truth(exact_world):
    vocab, streams, truth = exact_world
    reg = silent_registry(vocab, streams)
    n1, n2 = len(reg.trajectories[1]), len(reg.trajectories[2])
    ev = reg.fuse_maps(gt_constraint(truth, (2, 10), (1, 12)))
    g = reg.maps[ev.reference_map]
    assert len(g.nodes) == n1 + n2 and reg.agent_to_map == {1: 0, 2: 0}
    # the reference frame is agent 1's odometry frame
    to_ref = inverse(FRAMES[1])
    for a in (1, 2):
        for k, T in enumerate(truth.agents[a].poses):
            assert g.nodes[(a, k)].T_ws.allclose(compose(to_ref, T), atol=1e-9)
    assert ev.T_w1w2.allclose(compose(inverse(FRAMES[1]), FRAMES[2]), atol=1e-9)


def test_fusion_moves_absorbed_map_rigidly(exact_world):
    vocab, streams, truth = exact_world
    reg = silent_registry(vocab, streams)
    before = {k: n.T_ws for k, n in reg.maps[1].nodes.items()}
    c = gt_constraint(truth, (2, 10), (1, 12))
    c.T_cq = compose(c.T_cq, Pose(quat_exp([0.0, 0.0, 0.05]), [0.3, 0.0, 0.0]))   # a wrong but consistent offset
    reg.config.optimizer.max_iterations = 0
    ev = reg.fuse_maps(c)
    g = reg.maps[0]
    for k, T in before.items():
        assert g.nodes[k].T_ws.allclose(compose(ev.T_w1w2, T), atol=1e-12)
    # starting state matches the constraint exactly at the fused pair
    got = compose(inverse(g.nodes[(1, 12)].T_ws), g.nodes[(2, 10)].T_ws)
    assert got.allclose(c.T_cq, atol=1e-9)


def test_same_map_and_cross_map_misuse(exact_world):
    vocab, streams, truth = exact_world
    reg = silent_registry(vocab, streams, 30)
    with pytest.raises(SameMap):
        reg.fuse_maps(gt_constraint(truth, (1, 25), (1, 2)))
    with pytest.raises(CollabSlamError):
        reg.apply_loop(gt_constraint(truth, (2, 25), (1, 2)))


def test_loop_gap_boundary_and_duplicates(exact_world):
    vocab, streams, truth = exact_world
    reg = silent_registry(vocab, {1: streams[1]}, 30)
    g = reg.maps[0]
    ev = reg.apply_loop(gt_constraint(truth, (1, 29), (1, 2)))
    assert isinstance(ev, LoopClosed) and reg.kf_since_last_loop(1) == 0
    kfs = streams[1].keyframes
    for kf in kfs[30:30 + reg.config.min_loop_gap - 1]:
        reg.ingest_keyframe(kf)
    assert reg.kf_since_last_loop(1) == reg.config.min_loop_gap - 1
    n_edges = len(g.edges)
    with pytest.raises(LoopTooRecent):
        reg.apply_loop(gt_constraint(truth, (1, 38), (1, 5)))
    assert len(g.edges) == n_edges
    reg.ingest_keyframe(kfs[30 + reg.config.min_loop_gap - 1])
    n_edges = len(g.edges)
    reg.apply_loop(gt_constraint(truth, (1, 39), (1, 5)))
    assert len(g.edges) == n_edges + 1 and reg.pgo_runs == 2
    for kf in kfs[40:50]:
        reg.ingest_keyframe(kf)
    with pytest.raises(DuplicateLoop):
        reg.apply_loop(gt_constraint(truth, (1, 39), (1, 5)))


def test_front_end_sigmas_select_odometry_information(small_world):
    reg = MapRegistry(small_world[3], ManagerConfig(front_end_sigmas={"tracking-camera": (0.1, 1.0)}))
    reg.register_agent(1, "vio")
    reg.register_agent(2, "tracking-camera")
    assert reg.odometry_information(1)[0, 0] == pytest.approx(1 / 0.05**2)
    assert reg.odometry_information(2)[0, 0] == pytest.approx(1 / 0.1**2)
    assert reg.odometry_information(2)[5, 5] == pytest.approx(1 / np.deg2rad(1.0) ** 2)


def test_rejections_are_events_not_errors(small_run):
    _, events, _ = small_run
    rej = [e for e in events if isinstance(e, LoopRejected)]
    assert rej and all(e.reason for e in rej)
