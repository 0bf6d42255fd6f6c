import threading
import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("repo", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)


@pytest.fixture
def report():
    """Record one pass/fail line for an acceptance criterion."""
    def _report(number: int, ok: bool, detail: str):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok
    return _report


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


class Run:
    """Outcome of one collaborative session plus what is needed to score it."""

    def __init__(self, streams, truth, registry, seconds, server=None):
        self.streams = streams
        self.truth = truth
        self.registry = registry
        self.seconds = seconds
        self.server = server

    def trajectories(self):
        from collabslam.evaluation import Trajectory
        est, gt, odom = [], [], []
        for a in sorted(self.truth.agents):
            ts, P = self.registry.agent_poses(a)
            est.append(Trajectory.from_poses(ts, P))
            tr = self.truth.agents[a]
            gt.append(Trajectory.from_poses(tr.timestamps_ns, tr.poses))
            odom.append(Trajectory.from_poses(tr.timestamps_ns, tr.odometry))
        return est, gt, odom


def run_over_tcp(scenario):
    """Generate, train the vocabulary and stream every agent to a server at full speed."""
    from collabslam.place_recognition import train_vocabulary
    from collabslam.server import Server, ServerConfig
    from collabslam.simulator import generate, play, vocabulary_corpus
    t0 = time.perf_counter()
    streams, truth = generate(scenario)
    vocab = train_vocabulary(vocabulary_corpus(streams, seed=scenario.seed), seed=scenario.seed)
    cfg = ServerConfig(ordering="timestamp", expected_agents=len(streams))
    srv = Server(vocab, cfg).start()
    errors = []

    def send(st):
        try:
            play(st.frames, srv.address, 0.0, st.timestamps_ns)
        except Exception as e:      # reported by the caller
            errors.append(e)

    threads = [threading.Thread(target=send, args=(s,)) for s in streams.values()]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    srv.wait_idle(300)
    srv.shutdown(drain=False)
    if errors:
        raise errors[0]
    return Run(streams, truth, srv.registry, time.perf_counter() - t0, srv)


def run_offline(scenario):
    from collabslam.map_manager import MapRegistry
    from collabslam.place_recognition import train_vocabulary
    from collabslam.server import process_streams
    from collabslam.simulator import generate, vocabulary_corpus
    t0 = time.perf_counter()
    streams, truth = generate(scenario)
    vocab = train_vocabulary(vocabulary_corpus(streams, seed=scenario.seed), seed=scenario.seed)
    reg = MapRegistry(vocab)
    process_streams(reg, streams)
    return Run(streams, truth, reg, time.perf_counter() - t0)


@pytest.fixture(scope="session")
def three_agent_run():
    from collabslam.simulator import default_scenario
    return run_over_tcp(default_scenario(3, seed=0))


@pytest.fixture(scope="session")
def tracking_camera_run():
    from collabslam.simulator import default_scenario
    return run_over_tcp(default_scenario(3, seed=0, tracking_camera_agent=2))


@pytest.fixture(scope="session")
def small_world():
    """Two agents, 70 keyframes each, for tests that need real streams but not a full run."""
    from collabslam.place_recognition import train_vocabulary
    from collabslam.simulator import default_scenario, generate, vocabulary_corpus
    sc = default_scenario(2, seed=3)
    streams, truth = generate(sc)
    for s in streams.values():
        s.frames = s.frames[:71]
        s.timestamps_ns = list(s.timestamps_ns[:71])
        s.keyframes = s.keyframes[:70]
    vocab = train_vocabulary(vocabulary_corpus(streams, seed=3), seed=3)
    return sc, streams, truth, vocab
