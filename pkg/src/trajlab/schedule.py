"""Noise schedules for the SE(3) forward/reverse diffusion.

Translations follow a variance-preserving SDE with a linear rate
beta(tau) = b_min + tau (b_max - b_min), so the signal level is
alpha(tau) = exp(-(b_min tau + (b_max - b_min) tau^2 / 2)). Rotations use a
log-linear sigma(tau) between sigma_min and sigma_max. Diffusion math runs
in scaled coordinates (angstrom * coordinate_scale); conversion happens at
the module boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["NoiseSchedule"]


@dataclass(frozen=True)
class NoiseSchedule:
    b_min: float = 0.1
    b_max: float = 20.0
    sigma_min: float = 0.1
    sigma_max: float = 1.5
    coordinate_scale: float = 0.1
    steps: int = 200
    tau_max: float = 1.0
    tau_min: float = 0.01

    def __post_init__(self):
        if not (0.0 < self.tau_min < self.tau_max <= 1.0):
            raise ValueError("need 0 < tau_min < tau_max <= 1")
        if not self.b_min < self.b_max:
            raise ValueError("need b_min < b_max")
        if not 0.0 < self.sigma_min < self.sigma_max:
            raise ValueError("need 0 < sigma_min < sigma_max")
        if self.coordinate_scale <= 0:
            raise ValueError("coordinate_scale must be positive")

    def _check_tau(self, tau):
        tau = np.asarray(tau, dtype=np.float64)
        if np.any(tau < 0.0) or np.any(tau > 1.0):
            raise ValueError("tau must lie in [0, 1]")
        return tau

    def beta(self, tau):
        tau = self._check_tau(tau)
        return self.b_min + tau * (self.b_max - self.b_min)

    def alpha_bar(self, tau):
        """Signal fraction alpha(tau); alpha(0) = 1, strictly decreasing."""
        tau = self._check_tau(tau)
        integral = self.b_min * tau + 0.5 * (self.b_max - self.b_min) * tau**2
        return np.exp(-integral)

    def sigma_of_tau(self, tau):
        """Rotation noise scale, log-linear between sigma_min and sigma_max."""
        tau = self._check_tau(tau)
        log_s = np.log(self.sigma_min) + tau * (np.log(self.sigma_max) - np.log(self.sigma_min))
        return np.exp(log_s)

    def rotation_diffusion_rate(self, tau):
        """g(tau)^2 = d sigma^2 / d tau for the rotational Brownian clock."""
        sig = self.sigma_of_tau(tau)
        return 2.0 * sig**2 * np.log(self.sigma_max / self.sigma_min)

    def tau_grid(self) -> np.ndarray:
        """Uniform reverse-time grid from tau_max down to tau_min (steps+1 points)."""
        return np.linspace(self.tau_max, self.tau_min, self.steps + 1)

    def to_scaled(self, x_angstrom):
        return np.asarray(x_angstrom, dtype=np.float64) * self.coordinate_scale

    def to_angstrom(self, x_scaled):
        return np.asarray(x_scaled, dtype=np.float64) / self.coordinate_scale
