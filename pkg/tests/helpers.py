"""Shared builders for graph tests."""
import numpy as np

from collabslam.evaluation import Trajectory, ate_rmse, align_se3
from collabslam.geometry import Pose, compose, inverse, quat_exp
from collabslam.simulator import DriftSpec, drift_odometry
from collabslam.pose_graph import MapGraph, add_keyframe_node, add_loop_edge

LOOP_INFO = np.diag([1 / 0.02**2] * 3 + [1 / np.deg2rad(0.2) ** 2] * 3)


def circle_truth(n=50, radius=5.0):
    """Keyframes on a horizontal circle, heading along the tangent."""
    out = []
    for k in range(n):
        a = 2 * np.pi * k / n * 0.95
        out.append(Pose(quat_exp([0.0, 0.0, a + np.pi / 2]), [radius * np.cos(a), radius * np.sin(a), 0.1 * k / n]))
    return out


def line_truth(n=50, step=0.5):
    return [Pose(np.array([1.0, 0.0, 0.0, 0.0]), [step * k, 0.0, 0.0]) for k in range(n)]


def drifted_odometry(truth, rng, drift=None, profile="vio"):
    """Odometry from the simulator's drift model (0.5 %/m by default)."""
    arc = np.concatenate([[0.0], np.cumsum([np.linalg.norm(b.p - a.p) for a, b in zip(truth[:-1], truth[1:])])])
    drift = drift or DriftSpec(rate=0.005, sigma_t=0.002, sigma_r_deg=0.02)
    return drift_odometry(truth, arc, drift, rng, profile)


def chain_graph(truth, odo, loops=(), outliers=(), agent=1):
    g = MapGraph(0)
    for k, T in enumerate(odo):
        add_keyframe_node(g, (agent, k), T, timestamp_ns=k * 10**9)
    for i, j in loops:
        add_loop_edge(g, (agent, i), (agent, j), compose(inverse(truth[i]), truth[j]), LOOP_INFO)
    for i, j, offset in outliers:
        T = compose(inverse(truth[i]), truth[j])
        add_loop_edge(g, (agent, i), (agent, j), Pose(T.q, T.p + np.asarray(offset, float)), LOOP_INFO)
    return g


def graph_ate(g, truth, agent=1):
    ids = [(agent, k) for k in range(len(truth))]
    ts = [k * 10**9 for k in range(len(truth))]
    est = Trajectory.from_poses(ts, [g.nodes[i].T_ws for i in ids])
    return ate_rmse(align_se3(est, Trajectory.from_poses(ts, truth)))


def random_message(r):
    """A random HELLO or keyframe message inside the wire format's domain."""
    from collabslam.keyframe import Keyframe, PinholeCamera
    from collabslam.wire import HelloMessage
    if r.random() < 0.1:
        label = "".join(r.choice(list("abcxyz-_ 01éλ"), r.integers(0, 20)))
        return HelloMessage(int(r.integers(0, 2**32)), label)
    w, h = int(r.integers(1, 4000)), int(r.integers(1, 4000))
    f32 = lambda x: float(np.float32(x))
    cam = PinholeCamera(f32(r.uniform(50, 2000)), f32(r.uniform(50, 2000)), f32(r.uniform(0, w)), f32(r.uniform(0, h)), w, h)
    n, L = int(r.integers(0, 400)), int(r.integers(1, 64))
    kps = np.column_stack([r.uniform(0, w, n), r.uniform(0, h, n)]).astype(np.float32)
    descs = r.integers(0, 256, (n, L), dtype=np.uint8)
    T = Pose(quat_exp(r.normal(0, 2, 3)), r.normal(0, 100, 3))
    return Keyframe(int(r.integers(0, 2**32)), int(r.integers(0, 2**63)), int(r.integers(0, 2**63)), T, cam, kps,
                    descs, int(r.integers(0, 256)))


def horn_alignment(src, dst):
    """Closed-form rigid alignment via Horn's unit-quaternion method (an oracle independent of SVD)."""
    src, dst = np.asarray(src, float), np.asarray(dst, float)
    ms, md = src.mean(0), dst.mean(0)
    S = (src - ms).T @ (dst - md)
    (xx, xy, xz), (yx, yy, yz), (zx, zy, zz) = S
    N = np.array([[xx + yy + zz, yz - zy, zx - xz, xy - yx],
                  [yz - zy, xx - yy - zz, xy + yx, zx + xz],
                  [zx - xz, xy + yx, -xx + yy - zz, yz + zy],
                  [xy - yx, zx + xz, yz + zy, -xx - yy + zz]])
    w, V = np.linalg.eigh(N)
    q0, qx, qy, qz = V[:, -1]
    R = np.array([[q0*q0 + qx*qx - qy*qy - qz*qz, 2*(qx*qy - q0*qz), 2*(qx*qz + q0*qy)],
                  [2*(qy*qx + q0*qz), q0*q0 - qx*qx + qy*qy - qz*qz, 2*(qy*qz - q0*qx)],
                  [2*(qz*qx - q0*qy), 2*(qz*qy + q0*qx), q0*q0 - qx*qx - qy*qy + qz*qz]])
    return R, md - R @ ms


def random_pose(r, rot=0.5, trans=1.0):
    return Pose(quat_exp(r.normal(0, rot, 3)), r.normal(0, trans, 3))


def bearing_pairs(r, n, R, t):
    X = r.uniform(-3, 3, (n, 3)) + [0, 0, 6]
    f1 = X / np.linalg.norm(X, axis=1, keepdims=True)
    X2 = X @ R.T + t
    return f1, X2 / np.linalg.norm(X2, axis=1, keepdims=True)


def plucker_problem(r, n=17, central_pairs=False):
    """Noise-free rays of a 2-camera and a 3-camera rig, built without the package's rig code."""
    Xq = [Pose.identity(), random_pose(r, 0.2, 0.3)]
    Xc = [Pose.identity(), random_pose(r, 0.2, 0.3), random_pose(r, 0.2, 0.3)]
    T = random_pose(r)
    a, b = r.integers(0, 2, n), r.integers(0, 3, n)
    if central_pairs:
        a[:], b[:] = 0, 0
    else:
        a[:2], b[:2] = [0, 1], [0, 2]
    P = r.uniform(-4, 4, (n, 3)) + [0, 0, 6]
    out = []
    for k in range(n):
        cq, cc = Xq[a[k]].p, Xc[b[k]].p
        d = (P[k] - cq) / np.linalg.norm(P[k] - cq)
        e = T.apply(P[k]) - cc
        e /= np.linalg.norm(e)
        out.append((d, np.cross(cq, d), e, np.cross(cc, e)))
    dq, mq, dc, mc = (np.array(x) for x in zip(*out))
    return (dq, mq, dc, mc), a * 3 + b, T
