"""Forward corruption and reverse Euler-Maruyama sampling on SE(3).

Translation forward marginal (scaled units):
    T_tau = sqrt(alpha) T_0 + sqrt(1 - alpha) eps,  eps ~ N(0, I).
Reverse step from tau to tau - dtau:
    T <- T + [beta/2 T + beta s] dtau + sqrt(beta dtau) z.

Rotations ride a Brownian clock sigma(tau)^2: the reverse step applies the
tangent increment g^2 s dtau + g sqrt(dtau) z and exp-maps, with
g^2 = d sigma^2 / d tau.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .igso3 import IGSO3Table
from .schedule import NoiseSchedule
from .se3 import FrameSet, Rotation, exp_so3

__all__ = [
    "ScoreValue",
    "forward_translations_scaled",
    "forward_translations",
    "forward_rotations",
    "reverse_translation_step_scaled",
    "reverse_rotation_step",
    "reverse_step",
]


@dataclass
class ScoreValue:
    """Per-residue score: translation part in scaled units (global frame),
    rotation part as a local tangent 3-vector."""

    translation: np.ndarray  # (N, 3)
    rotation: np.ndarray  # (N, 3)


def forward_translations_scaled(t0_scaled, tau, schedule: NoiseSchedule, rng):
    """Corrupt scaled translations; returns (t_tau_scaled, eps)."""
    t0 = np.asarray(t0_scaled, dtype=np.float64)
    alpha = schedule.alpha_bar(tau)
    eps = rng.standard_normal(t0.shape)
    return np.sqrt(alpha) * t0 + np.sqrt(1.0 - alpha) * eps, eps


def forward_translations(t0_angstrom, tau, schedule: NoiseSchedule, rng):
    """Angstrom-boundary wrapper; eps stays in scaled units."""
    noisy, eps = forward_translations_scaled(schedule.to_scaled(t0_angstrom), tau, schedule, rng)
    return schedule.to_angstrom(noisy), eps


def forward_rotations(rot: Rotation, tau, schedule: NoiseSchedule, table: IGSO3Table, rng):
    """IGSO3 corruption; returns (noisy rotation, relative tangent vector)."""
    sigma = float(schedule.sigma_of_tau(tau))
    batch = rot.quat.shape[:-1]
    count = int(np.prod(batch)) if batch else 1
    omega = table.sample_angles(sigma, count, rng)
    axis = rng.standard_normal((count, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    vec = (axis * omega[:, None]).reshape(batch + (3,))
    return rot.compose(exp_so3(vec)), vec


def reverse_translation_step_scaled(t_scaled, score, tau, dtau, schedule: NoiseSchedule, rng):
    """One Euler-Maruyama reverse step in scaled units (vectorized)."""
    t = np.asarray(t_scaled, dtype=np.float64)
    if dtau == 0.0:
        return t.copy()
    beta = float(schedule.beta(tau))
    drift = (0.5 * beta * t + beta * np.asarray(score)) * dtau
    noise = np.sqrt(beta * dtau) * rng.standard_normal(t.shape)
    return t + drift + noise


def reverse_rotation_step(rot: Rotation, score, tau, dtau, schedule: NoiseSchedule, rng):
    """Tangent-space Euler step followed by the exponential map."""
    if dtau == 0.0:
        return Rotation(rot.quat.copy())
    g2 = float(schedule.rotation_diffusion_rate(tau))
    batch = rot.quat.shape[:-1]
    z = rng.standard_normal(batch + (3,))
    step = g2 * np.asarray(score) * dtau + np.sqrt(g2 * dtau) * z
    return rot.compose(exp_so3(step))


def reverse_step(
    frames: FrameSet,
    score: ScoreValue,
    tau: float,
    dtau: float,
    schedule: NoiseSchedule,
    rng,
) -> FrameSet:
    """Advance one FrameSet from tau to tau - dtau (translations in angstrom).

    Raises on NaN scores: a poisoned score would silently corrupt the whole
    rollout otherwise.
    """
    if np.any(~np.isfinite(score.translation)) or np.any(~np.isfinite(score.rotation)):
        raise FloatingPointError(f"non-finite score at tau={tau:g}")
    if dtau == 0.0:
        return frames.copy()
    t_scaled = schedule.to_scaled(frames.translations)
    t_new = reverse_translation_step_scaled(t_scaled, score.translation, tau, dtau, schedule, rng)
    r_new = reverse_rotation_step(frames.rotations, score.rotation, tau, dtau, schedule, rng)
    return FrameSet(r_new.quat, schedule.to_angstrom(t_new))
