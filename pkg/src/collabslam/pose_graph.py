"""Keyframe pose graph with windowed odometry edges and robust loop edges.

Each edge ``i -> j`` with measurement ``T_ij`` contributes

    e_ij = [p_ij - p_ij_hat ; 2 vec(q_ij^-1 * q_ij_hat)]

with ``T_ij = T_wi^-1 T_wj``. Odometry edges enter the cost as plain squared
Mahalanobis norms, loop edges through a Cauchy loss. Optimization is
Levenberg-Marquardt over ``p <- p + dp`` (world frame) and
``q <- q * exp(dtheta)`` (body frame), with the anchor node held fixed.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import DuplicateNode, NonPSDInformation, NotConnected
from .geometry import Pose, compose, inverse, quat_canonical

ODOMETRY = "odometry"
LOOP = "loop"


# ---------------------------------------------------------------------------
# graph containers
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class KeyframeNode:
    kf_id: tuple
    T_ws: Pose
    T_ws_odom: Pose
    timestamp_ns: int = 0


@dataclass(eq=False)
class GraphEdge:
    from_kf: tuple
    to_kf: tuple
    kind: str
    measurement: Pose
    information: np.ndarray

    @property
    def robust(self) -> bool:
        return self.kind == LOOP


def odometry_information(sigma_p: float = 0.05, sigma_rot_deg: float = 0.5) -> np.ndarray:
    return np.diag([1 / sigma_p**2] * 3 + [1 / np.deg2rad(sigma_rot_deg) ** 2] * 3)


@dataclass(eq=False)
class MapGraph:
    map_id: int
    nodes: dict = field(default_factory=dict)
    edges: list = field(default_factory=list)
    anchor_kf: tuple | None = None
    chains: dict = field(default_factory=dict)   # agent_id -> kf ids in arrival order

    def __contains__(self, kf_id):
        return kf_id in self.nodes

    def __len__(self):
        return len(self.nodes)

    @property
    def agents(self):
        return list(self.chains)

    def loop_edges(self):
        return [e for e in self.edges if e.kind == LOOP]

    def has_edge(self, a, b) -> bool:
        return any({e.from_kf, e.to_kf} == {a, b} for e in self.edges)

    def poses(self) -> dict:
        return {k: n.T_ws for k, n in self.nodes.items()}

    def copy(self) -> "MapGraph":
        g = MapGraph(self.map_id, dict((k, KeyframeNode(n.kf_id, n.T_ws, n.T_ws_odom, n.timestamp_ns))
                                       for k, n in self.nodes.items()),
                     list(self.edges), self.anchor_kf, {a: list(c) for a, c in self.chains.items()})
        return g


def add_keyframe_node(graph: MapGraph, kf_id, T_ws_odom: Pose, q: int = 4,
                      odom_information: np.ndarray | None = None, timestamp_ns: int = 0,
                      state: Pose | None = None) -> KeyframeNode:
    """Insert a keyframe with edges to up to ``q`` preceding keyframes of its agent.

    The edge to the k-th previous keyframe carries the composed odometry delta
    and ``odom_information / k``. The state is propagated from the previous
    keyframe's state by the odometry delta unless ``state`` is given.
    """
    if kf_id in graph.nodes:
        raise DuplicateNode(f"keyframe {kf_id} already in map {graph.map_id}")
    W = odometry_information() if odom_information is None else np.asarray(odom_information, float)
    agent = kf_id[0]
    chain = graph.chains.setdefault(agent, [])
    if state is None:
        if chain:
            prev = graph.nodes[chain[-1]]
            state = compose(prev.T_ws, compose(inverse(prev.T_ws_odom), T_ws_odom))
        else:
            state = T_ws_odom
    node = KeyframeNode(kf_id, state, T_ws_odom, timestamp_ns)
    for gap, prev_id in enumerate(reversed(chain[-q:] if q > 0 else []), start=1):
        prev = graph.nodes[prev_id]
        meas = compose(inverse(prev.T_ws_odom), T_ws_odom)
        graph.edges.append(GraphEdge(prev_id, kf_id, ODOMETRY, meas, W / gap))
    graph.nodes[kf_id] = node
    chain.append(kf_id)
    if graph.anchor_kf is None:
        graph.anchor_kf = kf_id
    return node


def add_loop_edge(graph: MapGraph, candidate_kf, query_kf, T_cq: Pose, information) -> GraphEdge:
    e = GraphEdge(candidate_kf, query_kf, LOOP, T_cq, np.asarray(information, float))
    graph.edges.append(e)
    return e


# ---------------------------------------------------------------------------
# residuals and Jacobians (batched over edges)
# ---------------------------------------------------------------------------

def _qmul(a, b):
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack([aw * bw - ax * bx - ay * by - az * bz,
                     aw * bx + ax * bw + ay * bz - az * by,
                     aw * by - ax * bz + ay * bw + az * bx,
                     aw * bz + ax * by - ay * bx + az * bw], axis=-1)


def _qconj(q):
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def _qmat(q):
    w, x, y, z = np.moveaxis(q, -1, 0)
    return np.stack([
        np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
        np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
        np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
    ], -2)


def _skew(v):
    z = np.zeros(v.shape[:-1])
    x, y, w = v[..., 0], v[..., 1], v[..., 2]
    return np.stack([np.stack([z, -w, y], -1), np.stack([w, z, -x], -1), np.stack([-y, x, z], -1)], -2)


def _qexp(w):
    th = np.linalg.norm(w, axis=-1, keepdims=True)
    small = th < 1e-12
    s = np.where(small, 0.5, np.sin(th / 2) / np.where(small, 1.0, th))
    q = np.concatenate([np.cos(th / 2), s * w], axis=-1)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def batch_residuals(Qi, Pi, Qj, Pj, Qm, Pm, jacobians: bool = False):
    """Residuals (E, 6) and optionally Jacobians w.r.t. node i and j, each (E, 6, 6)."""
    Ri = _qmat(Qi)
    RiT = np.swapaxes(Ri, -1, -2)
    p_ij = np.einsum("eab,eb->ea", RiT, Pj - Pi)
    e_p = p_ij - Pm
    q_ij = _qmul(_qconj(Qi), Qj)
    r = _qmul(_qconj(q_ij), Qm)
    r = np.where(r[:, :1] < 0, -r, r)
    e = np.concatenate([e_p, 2.0 * r[:, 1:]], axis=1)
    if not jacobians:
        return e
    n = len(e)
    rw = r[:, 0][:, None, None]
    rv = _skew(r[:, 1:])
    I3 = np.eye(3)
    Ji = np.zeros((n, 6, 6))
    Jj = np.zeros((n, 6, 6))
    Ji[:, :3, :3] = -RiT
    Ji[:, :3, 3:] = _skew(p_ij)
    Ji[:, 3:, 3:] = (rw * I3 + rv) @ np.swapaxes(_qmat(Qm), -1, -2)
    Jj[:, :3, :3] = RiT
    Jj[:, 3:, 3:] = -(rw * I3 - rv)
    return e, Ji, Jj


def residual(edge: GraphEdge, state_i: Pose, state_j: Pose) -> np.ndarray:
    """Edge error for the given endpoint states."""
    m = edge.measurement
    return batch_residuals(state_i.q[None], state_i.p[None], state_j.q[None], state_j.p[None],
                           m.q[None], m.p[None])[0]


def residual_jacobians(edge: GraphEdge, state_i: Pose, state_j: Pose):
    m = edge.measurement
    e, Ji, Jj = batch_residuals(state_i.q[None], state_i.p[None], state_j.q[None], state_j.p[None],
                                m.q[None], m.p[None], jacobians=True)
    return e[0], Ji[0], Jj[0]


def retract(state: Pose, delta) -> Pose:
    """Apply a local update ``[dp (world), dtheta (body)]``."""
    delta = np.asarray(delta, float)
    return Pose(_qmul(state.q, _qexp(delta[3:])), state.p + delta[:3])


# ---------------------------------------------------------------------------
# optimization
# ---------------------------------------------------------------------------

@dataclass
class OptimizerConfig:
    cauchy_scale: float = 1.0
    robust_loops: bool = True
    max_iterations: int = 100
    gradient_tolerance: float = 1e-8
    relative_cost_tolerance: float = 1e-9
    initial_lambda: float = 1e-4


@dataclass
class OptimizationReport:
    initial_cost: float
    final_cost: float
    iterations: int
    accepted_steps: int
    cost_history: list
    termination: str


def check_connected(graph: MapGraph):
    parent = {k: k for k in graph.nodes}

    def find(x):
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    for e in graph.edges:
        parent[find(e.from_kf)] = find(e.to_kf)
    roots = {find(k) for k in graph.nodes}
    if len(roots) > 1:
        raise NotConnected(f"map {graph.map_id} has {len(roots)} components")


class _Problem:
    def __init__(self, graph: MapGraph, config: OptimizerConfig):
        self.ids = list(graph.nodes)
        index = {k: i for i, k in enumerate(self.ids)}
        self.anchor = index[graph.anchor_kf]
        self.I = np.array([index[e.from_kf] for e in graph.edges], dtype=np.int64)
        self.J = np.array([index[e.to_kf] for e in graph.edges], dtype=np.int64)
        self.Qm = np.array([e.measurement.q for e in graph.edges]).reshape(-1, 4)
        self.Pm = np.array([e.measurement.p for e in graph.edges]).reshape(-1, 3)
        self.W = np.array([e.information for e in graph.edges]).reshape(-1, 6, 6)
        self.robust = np.array([e.robust for e in graph.edges], dtype=bool) & config.robust_loops
        self.c2 = config.cauchy_scale ** 2
        # variable slot of each node; the anchor has none
        self.slot = -np.ones(len(self.ids), dtype=np.int64)
        free = [i for i in range(len(self.ids)) if i != self.anchor]
        self.slot[free] = np.arange(len(free))
        self.n_free = len(free)

    def cost_terms(self, Q, P):
        e = batch_residuals(Q[self.I], P[self.I], Q[self.J], P[self.J], self.Qm, self.Pm)
        s = np.einsum("ea,eab,eb->e", e, self.W, e)
        return e, s

    def cost(self, Q, P) -> float:
        _, s = self.cost_terms(Q, P)
        rob = self.c2 * np.log1p(s / self.c2)
        return 0.5 * float(np.sum(np.where(self.robust, rob, s)))

    def linearize(self, Q, P):
        e, Ji, Jj = batch_residuals(Q[self.I], P[self.I], Q[self.J], P[self.J], self.Qm, self.Pm,
                                    jacobians=True)
        s = np.einsum("ea,eab,eb->e", e, self.W, e)
        w = np.where(self.robust, 1.0 / (1.0 + s / self.c2), 1.0)
        Ww = self.W * w[:, None, None]
        WJi = Ww @ Ji
        WJj = Ww @ Jj
        blocks = {
            "ii": np.swapaxes(Ji, -1, -2) @ WJi, "jj": np.swapaxes(Jj, -1, -2) @ WJj,
            "ij": np.swapaxes(Ji, -1, -2) @ WJj,
        }
        gi = np.einsum("eba,eb->ea", WJi, e)
        gj = np.einsum("eba,eb->ea", WJj, e)
        n = self.n_free * 6
        g = np.zeros(n)
        si, sj = self.slot[self.I], self.slot[self.J]
        rows, cols, vals = [], [], []
        ar = np.arange(6)
        rr = np.repeat(ar, 6)
        cc = np.tile(ar, 6)

        def put(sa, sb, B):
            ok = (sa >= 0) & (sb >= 0)
            if not ok.any():
                return
            rows.append((sa[ok, None] * 6 + rr[None]).ravel())
            cols.append((sb[ok, None] * 6 + cc[None]).ravel())
            vals.append(B[ok].reshape(-1, 36).ravel())

        put(si, si, blocks["ii"])
        put(sj, sj, blocks["jj"])
        put(si, sj, blocks["ij"])
        put(sj, si, np.swapaxes(blocks["ij"], -1, -2))
        for sl, gg in ((si, gi), (sj, gj)):
            ok = sl >= 0
            np.add.at(g, (sl[ok, None] * 6 + ar[None]).ravel(), gg[ok].ravel())
        H = sp.coo_matrix((np.concatenate(vals) if vals else np.zeros(0),
                           (np.concatenate(rows) if rows else np.zeros(0, int),
                            np.concatenate(cols) if cols else np.zeros(0, int))), shape=(n, n)).tocsc()
        return H, g

    def apply(self, Q, P, delta):
        d = np.zeros((len(self.ids), 6))
        free = self.slot >= 0
        d[free] = delta.reshape(-1, 6)[self.slot[free]]
        Qn = _qmul(Q, _qexp(d[:, 3:]))
        Qn = np.where(Qn[:, :1] < 0, -Qn, Qn)
        return Qn, P + d[:, :3]


def _levenberg_marquardt(prob: "_Problem", Q, P, config: OptimizerConfig, report: OptimizationReport):
    """Returns (Q, P, cost, iterations, termination)."""
    cost = prob.cost(Q, P)
    lam = config.initial_lambda
    nu = 2.0
    termination = "max iterations"
    it = 0
    while it < config.max_iterations:
        H, g = prob.linearize(Q, P)
        if np.max(np.abs(g)) < config.gradient_tolerance:
            termination = "gradient tolerance"
            break
        it += 1
        diag = H.diagonal()
        accepted = False
        while not accepted:
            A = H + sp.diags(lam * np.maximum(diag, 1e-12), format="csc")
            try:
                # minimum-degree ordering on A^T + A suits the symmetric normal equations
                delta = spla.splu(A, permc_spec="MMD_AT_PLUS_A").solve(-g)
            except RuntimeError:
                delta = np.full(len(g), np.nan)
            if not np.all(np.isfinite(delta)):
                lam *= nu
                nu *= 2
                if lam > 1e16:
                    break
                continue
            Qn, Pn = prob.apply(Q, P, delta)
            new_cost = prob.cost(Qn, Pn)
            predicted = -(g @ delta) - 0.5 * delta @ (H @ delta)
            rho = (cost - new_cost) / predicted if predicted > 0 else -1.0
            if new_cost < cost and rho > 0:
                accepted = True
                lam *= max(1 / 3, 1 - (2 * rho - 1) ** 3)
                nu = 2.0
            else:
                lam *= nu
                nu *= 2
                if lam > 1e16:
                    break
        if not accepted:
            termination = "no decrease possible"
            break
        report.accepted_steps += 1
        rel = (cost - new_cost) / max(cost, 1e-300)
        Q, P, cost = Qn, Pn, new_cost
        report.cost_history.append(cost)
        if rel < config.relative_cost_tolerance:
            termination = "relative cost tolerance"
            break
    return Q, P, cost, it, termination


def optimize(graph: MapGraph, config: OptimizerConfig | None = None) -> OptimizationReport:
    """Levenberg-Marquardt on the graph, updating node states in place."""
    config = config or OptimizerConfig()
    if graph.anchor_kf is None or graph.anchor_kf not in graph.nodes:
        raise NotConnected("graph has no anchor")
    check_connected(graph)
    for e in graph.edges:
        W = e.information
        if not np.allclose(W, W.T, atol=1e-9 * max(1.0, np.abs(W).max())) or np.linalg.eigvalsh(W).min() <= 0:
            raise NonPSDInformation(f"edge {e.from_kf}->{e.to_kf} information is not SPD")

    prob = _Problem(graph, config)
    Q = np.array([graph.nodes[k].T_ws.q for k in prob.ids])
    P = np.array([graph.nodes[k].T_ws.p for k in prob.ids])
    cost = prob.cost(Q, P)
    report = OptimizationReport(cost, cost, 0, 0, [cost], "no free variables")
    if prob.n_free == 0 or not graph.edges:
        return report

    Q, P, cost, it, termination = _levenberg_marquardt(prob, Q, P, config, report)
    for i, k in enumerate(prob.ids):
        if i != prob.anchor:
            graph.nodes[k].T_ws = Pose(Q[i], P[i])
    report.final_cost = cost
    report.iterations = it
    report.termination = termination
    return report


def total_cost(graph: MapGraph, config: OptimizerConfig | None = None) -> float:
    config = config or OptimizerConfig()
    prob = _Problem(graph, config)
    Q = np.array([graph.nodes[k].T_ws.q for k in prob.ids])
    P = np.array([graph.nodes[k].T_ws.p for k in prob.ids])
    return prob.cost(Q, P)


# ---------------------------------------------------------------------------
# g2o text format
# ---------------------------------------------------------------------------

G2O_ID_STRIDE = 1_000_000
_LOOP_MARKER = "# loop-closure edges"
_D = np.diag([1.0, 1, 1, 2, 2, 2])  # g2o rotation error is vec(q), ours 2 vec(q)


def _g2o_id(kf_id) -> int:
    return int(kf_id[0]) * G2O_ID_STRIDE + int(kf_id[1])


def _kf_from_g2o(i: int) -> tuple:
    return (i // G2O_ID_STRIDE, i % G2O_ID_STRIDE)


def _pose_tokens(T: Pose) -> str:
    x, y, z = T.p
    w, qx, qy, qz = T.q
    return f"{x:.17g} {y:.17g} {z:.17g} {qx:.17g} {qy:.17g} {qz:.17g} {w:.17g}"


def export_g2o(graph: MapGraph, path):
    """Write VERTEX_SE3:QUAT / EDGE_SE3:QUAT records; ids are agent * 1e6 + seq."""
    lines = []
    for k, n in graph.nodes.items():
        lines.append(f"VERTEX_SE3:QUAT {_g2o_id(k)} {_pose_tokens(n.T_ws)}")
    if graph.anchor_kf is not None:
        lines.append(f"FIX {_g2o_id(graph.anchor_kf)}")

    def edge_line(e):
        W = _D @ e.information @ _D
        tri = " ".join(f"{W[r, c]:.17g}" for r in range(6) for c in range(r, 6))
        return f"EDGE_SE3:QUAT {_g2o_id(e.from_kf)} {_g2o_id(e.to_kf)} {_pose_tokens(e.measurement)} {tri}"

    lines += [edge_line(e) for e in graph.edges if e.kind == ODOMETRY]
    lines.append(_LOOP_MARKER)
    lines += [edge_line(e) for e in graph.edges if e.kind == LOOP]
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def import_g2o(path, map_id: int = 0) -> MapGraph:
    """Read a g2o file. Edges after the loop marker line are loop edges; files
    without the marker classify same-agent edges as odometry."""
    g = MapGraph(map_id)
    in_loops = False
    has_marker = False
    pending = []
    with open(path) as f:
        for raw in f:
            line = raw.strip()
            if line == _LOOP_MARKER:
                in_loops = has_marker = True
                continue
            if not line or line.startswith("#"):
                continue
            tok = line.split()
            if tok[0] == "VERTEX_SE3:QUAT":
                kf = _kf_from_g2o(int(tok[1]))
                x, y, z, qx, qy, qz, w = map(float, tok[2:9])
                T = Pose([w, qx, qy, qz], [x, y, z])
                g.nodes[kf] = KeyframeNode(kf, T, T)
                g.chains.setdefault(kf[0], []).append(kf)
            elif tok[0] == "FIX":
                g.anchor_kf = _kf_from_g2o(int(tok[1]))
            elif tok[0] == "EDGE_SE3:QUAT":
                a, b = _kf_from_g2o(int(tok[1])), _kf_from_g2o(int(tok[2]))
                x, y, z, qx, qy, qz, w = map(float, tok[3:10])
                vals = list(map(float, tok[10:31]))
                W = np.zeros((6, 6))
                W[np.triu_indices(6)] = vals
                W = W + np.triu(W, 1).T
                Dinv = np.linalg.inv(_D)
                pending.append((a, b, Pose([w, qx, qy, qz], [x, y, z]), Dinv @ W @ Dinv, in_loops))
    for a, b, T, W, loop in pending:
        if has_marker:
            kind = LOOP if loop else ODOMETRY
        else:
            kind = ODOMETRY if a[0] == b[0] else LOOP
        g.edges.append(GraphEdge(a, b, kind, T, W))
    for chain in g.chains.values():
        chain.sort(key=lambda k: k[1])
    if g.anchor_kf is None and g.nodes:
        g.anchor_kf = min(g.nodes, key=lambda k: (k[0], k[1]))
    return g
