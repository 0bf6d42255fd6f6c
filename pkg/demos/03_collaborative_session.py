# %% [markdown]
# # Three agents, one server
#
# Three simulated agents fly overlapping figure-eights with drifting
# odometry. Each streams keyframes (pose, keypoints, descriptors) over
# TCP. The server starts a map per agent, and merges maps the first time
# a loop links two agents. Later loops tighten the joint map through
# pose graph optimization.
#
# This is the full acceptance scenario; expect about half a minute on
# one core. Run with ``python3 demos/03_collaborative_session.py``.

# %%
import threading
import time

from collabslam.evaluation import Trajectory, joint_ate, per_agent_ate
from collabslam.map_manager import LoopClosed, MapsFused
from collabslam.place_recognition import train_vocabulary
from collabslam.server import Server, ServerConfig, format_status
from collabslam.simulator import default_scenario, generate, play, vocabulary_corpus

scenario = default_scenario(3, seed=0)
streams, truth = generate(scenario)
for aid, s in streams.items():
    print(f"agent {aid} ({s.label}): {len(s.keyframes)} keyframes, {s.payload_bytes / 1e6:.1f} MB")
vocab = train_vocabulary(vocabulary_corpus(streams, seed=0), seed=0)

# %% [markdown]
# ``timestamp`` ordering makes the server process keyframes oldest first
# across agents. The outcome then does not depend on how the sockets
# interleave, and it matches offline processing bit for bit.

# %%
server = Server(vocab, ServerConfig(ordering="timestamp", expected_agents=3)).start()
t0 = time.perf_counter()
senders = [threading.Thread(target=play, args=(s.frames, server.address, 0.0, s.timestamps_ns))
           for s in streams.values()]
for t in senders:
    t.start()
for t in senders:
    t.join()
server.wait_idle(300)
print(f"processed in {time.perf_counter() - t0:.1f} s")

for ev in server.events:
    if isinstance(ev, MapsFused):
        print(f"fusion: {ev.query_kf} <-> {ev.candidate_kf}, {ev.n_inliers} inliers, "
              f"map {ev.absorbed_map} into {ev.reference_map}")
print(sum(isinstance(e, LoopClosed) for e in server.events), "loops inside maps")

# %% [markdown]
# The status endpoint is plain text on the same port.

# %%
print(format_status(server.status_snapshot()).split("latency")[0])

# %% [markdown]
# Scoring against ground truth: one rigid alignment for all three agents
# together, so a misplaced agent shows up. Odometry is scored the same way.

# %%
est, gt, odo = [], [], []
for a in sorted(truth.agents):
    ts, poses = server.registry.agent_poses(a)
    tr = truth.agents[a]
    est.append(Trajectory.from_poses(ts, poses))
    gt.append(Trajectory.from_poses(tr.timestamps_ns, tr.poses))
    odo.append(Trajectory.from_poses(tr.timestamps_ns, tr.odometry))
print(f"joint ATE  estimate {joint_ate(est, gt):.4f} m   odometry {joint_ate(odo, gt):.4f} m")
print(f"per-agent  estimate {per_agent_ate(est, gt):.4f} m   odometry {per_agent_ate(odo, gt):.4f} m")
server.shutdown(drain=False)
