"""Centralized back-end for collaborative visual SLAM.

Agents stream keyframes (pose, keypoints, binary descriptors) to a server
that detects places seen before, verifies loops with a multi-camera
relative pose solver, fuses maps and optimizes the joint pose graph.
"""
from .geometry import Pose, compose, inverse, pose_error, relative
from .keyframe import Keyframe, PinholeCamera
from .map_manager import ManagerConfig, MapRegistry
from .place_recognition import KeyframeDatabase, Vocabulary, train_vocabulary
from .pose_graph import MapGraph, OptimizerConfig, optimize
from .relpose import LoopConstraint, MultiCameraRig, VerificationConfig, solve_17pt, verify_loop
from .server import Server, ServerConfig, load_config, process_streams
from .simulator import Scenario, default_scenario, generate, play
from .wire import HelloMessage, decode_frame, encode

__version__ = "0.1.0"

__all__ = [
    "HelloMessage", "Keyframe", "KeyframeDatabase", "LoopConstraint", "ManagerConfig", "MapGraph",
    "MapRegistry", "MultiCameraRig", "OptimizerConfig", "PinholeCamera", "Pose", "Scenario", "Server",
    "ServerConfig", "VerificationConfig", "Vocabulary", "compose", "decode_frame", "default_scenario",
    "encode", "generate", "inverse", "load_config", "optimize", "play", "pose_error", "process_streams",
    "relative", "solve_17pt", "train_vocabulary", "verify_loop",
]
