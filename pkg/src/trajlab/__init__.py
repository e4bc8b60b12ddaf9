"""Desk-scale lab for autoregressive SE(3)-diffusion trajectory generation.

Subsystems:
  se3 / stmdio   rigid-frame algebra, trajectory containers, STMD v1 files
  schedule / igso3 / sde   forward corruption and reverse SDE sampling
  model          joint space-time causal denoiser (torch, float64)
  training       block-causal teacher forcing and the score-matching loop
  rollout        KV-cached autoregressive generation
  mz             memory-kernel inflation lab on linear block systems
  metrics        coverage, kinetic-fidelity, and validity evaluation
  costmodel      closed-form FLOP / KV-memory proxies
  synth / cli    synthetic data generation and the command-line harness
"""

__version__ = "0.1.0"
