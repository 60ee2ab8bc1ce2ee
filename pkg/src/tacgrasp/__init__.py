"""Simulated tactile gripper with a learned grasping stack.

The package bundles a deterministic 160 Hz parallel-gripper simulation with
taxel sensing, a behavior-cloned initial-grasp generator, a Gaussian-mixture
stability estimator with ROC threshold selection, and a self-attention
in-grasp adapter, plus dataset tooling, a benchmark CLI, and a teleop
WebSocket server.
"""

__version__ = "0.1.0"
