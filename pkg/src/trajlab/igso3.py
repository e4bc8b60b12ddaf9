"""Isotropic Gaussian on SO(3): density, sampling, and score.

The density with respect to Haar measure, as a function of rotation angle
omega, is the SO(3) heat-kernel series

    f(omega; sigma) = sum_l (2l+1) exp(-l(l+1) sigma^2 / 2)
                      * sin((l + 1/2) omega) / sin(omega / 2),

truncated once the coefficient magnitude drops below 1e-12 (hard cap
l = 2000). pdf / cdf / d(log f)/d(omega) are tabulated on a 2048-point
omega grid crossed with a 64-point log-spaced sigma grid and linearly
interpolated. The angle marginal carries the Haar factor
(1 - cos omega) / pi. Tables are immutable after construction and safe to
share across threads; sampling takes an explicit numpy Generator.
"""

from __future__ import annotations

import numpy as np

from .se3 import Rotation, exp_so3, log_so3

__all__ = ["IGSO3Table", "igso3_expansion"]

_TRUNC_TOL = 1e-12
_L_CAP = 2000


def _l_max(sigma: float) -> int:
    # Coefficient (2l+1) exp(-l(l+1) sigma^2/2) below tolerance -> stop.
    ls = np.arange(_L_CAP + 1)
    coef = (2 * ls + 1) * np.exp(-ls * (ls + 1) * sigma**2 / 2.0)
    keep = np.nonzero(coef >= _TRUNC_TOL)[0]
    return int(keep[-1]) if keep.size else 1


def igso3_expansion(
    omega: np.ndarray, sigma: float, half_exponent: bool = True
) -> tuple[np.ndarray, np.ndarray]:
    """Heat-kernel series value f and its omega-derivative at one sigma.

    half_exponent selects exp(-l(l+1) sigma^2 / 2) (the heat-kernel clock,
    default) versus the exp(-l(l+1) sigma^2) convention some references use.
    """
    omega = np.asarray(omega, dtype=np.float64)
    scale = 0.5 if half_exponent else 1.0
    lmax = _l_max(sigma if half_exponent else sigma * np.sqrt(2.0))
    ls = np.arange(lmax + 1, dtype=np.float64)
    coef = (2 * ls + 1) * np.exp(-ls * (ls + 1) * sigma**2 * scale)
    half = ls + 0.5
    s_half = np.sin(np.outer(omega, half))
    c_half = np.cos(np.outer(omega, half))
    sin_o2 = np.sin(omega / 2.0)
    cos_o2 = np.cos(omega / 2.0)
    f = (s_half @ coef) / sin_o2
    # d/do [ sin((l+1/2)o) / sin(o/2) ]
    df = (c_half * half) @ coef / sin_o2 - 0.5 * (s_half @ coef) * cos_o2 / sin_o2**2
    return f, df


class IGSO3Table:
    """Precomputed pdf/cdf/score grids over (sigma, omega)."""

    def __init__(
        self,
        sigma_lo: float = 0.05,
        sigma_hi: float = 3.0,
        n_sigma: int = 64,
        n_omega: int = 2048,
        half_exponent: bool = True,
    ):
        self.half_exponent = half_exponent
        self.sigma_grid = np.exp(np.linspace(np.log(sigma_lo), np.log(sigma_hi), n_sigma))
        # Open interval (0, pi): endpoints are singular (omega=0) or a
        # measure-zero boundary (omega=pi).
        self.omega_grid = np.linspace(np.pi / (n_omega + 1), np.pi * n_omega / (n_omega + 1), n_omega)
        self._haar = (1.0 - np.cos(self.omega_grid)) / np.pi

        pdf = np.empty((n_sigma, n_omega))
        dlogf = np.empty((n_sigma, n_omega))
        for i, sig in enumerate(self.sigma_grid):
            f, df = igso3_expansion(self.omega_grid, sig, half_exponent)
            # where the series underflows (far tail of small sigma) the
            # density carries no mass and the log-derivative is meaningless
            ok = f > 1e-200
            pdf[i] = np.maximum(f, 1e-300)
            dlogf[i] = np.where(ok, df / np.maximum(f, 1e-300), 0.0)
        self.pdf = pdf
        self.dlogf = dlogf

        # Angle-marginal cdf via trapezoid, anchored at omega = 0 where the
        # Haar factor vanishes.
        marg = pdf * self._haar
        grid0 = np.concatenate([[0.0], self.omega_grid])
        marg0 = np.concatenate([np.zeros((n_sigma, 1)), marg], axis=1)
        cdf = np.concatenate(
            [
                np.zeros((n_sigma, 1)),
                np.cumsum(0.5 * (marg0[:, 1:] + marg0[:, :-1]) * np.diff(grid0), axis=1),
            ],
            axis=1,
        )[:, 1:]
        self.norm = cdf[:, -1].copy()
        self.cdf = cdf / self.norm[:, None]

    # -- sigma handling -------------------------------------------------

    @property
    def sigma_min(self) -> float:
        return float(self.sigma_grid[0])

    @property
    def sigma_max(self) -> float:
        return float(self.sigma_grid[-1])

    def _check_sigma(self, sigma: float) -> float:
        sigma = float(sigma)
        if not (self.sigma_min <= sigma <= self.sigma_max):
            raise ValueError(
                f"sigma={sigma:g} outside table coverage "
                f"[{self.sigma_min:g}, {self.sigma_max:g}]; no extrapolation"
            )
        return sigma

    def _sigma_weights(self, sigma: float) -> tuple[int, int, float]:
        logs = np.log(self.sigma_grid)
        x = np.log(sigma)
        j = int(np.clip(np.searchsorted(logs, x) - 1, 0, len(logs) - 2))
        w = (x - logs[j]) / (logs[j + 1] - logs[j])
        return j, j + 1, float(np.clip(w, 0.0, 1.0))

    def _interp_rows(self, grid: np.ndarray, sigma: float, omega: np.ndarray) -> np.ndarray:
        j0, j1, w = self._sigma_weights(sigma)
        row = (1 - w) * grid[j0] + w * grid[j1]
        return np.interp(omega, self.omega_grid, row)

    # -- public surface --------------------------------------------------

    def pdf_angle(self, omega, sigma: float) -> np.ndarray:
        """Density of the rotation-angle marginal (integrates to 1 on (0, pi))."""
        sigma = self._check_sigma(sigma)
        omega = np.asarray(omega, dtype=np.float64)
        j0, j1, w = self._sigma_weights(sigma)
        norm = (1 - w) * self.norm[j0] + w * self.norm[j1]
        f = self._interp_rows(self.pdf, sigma, omega)
        return f * (1.0 - np.cos(omega)) / np.pi / norm

    def pdf_haar(self, omega, sigma: float) -> np.ndarray:
        """Heat-kernel density f with respect to Haar measure."""
        sigma = self._check_sigma(sigma)
        return self._interp_rows(self.pdf, sigma, np.asarray(omega, dtype=np.float64))

    def score_angle(self, omega, sigma: float) -> np.ndarray:
        """d(log f)/d(omega) at the given angle(s)."""
        sigma = self._check_sigma(sigma)
        return self._interp_rows(self.dlogf, sigma, np.asarray(omega, dtype=np.float64))

    def sample_angles(self, sigma: float, n: int, rng: np.random.Generator) -> np.ndarray:
        """Inverse-CDF samples of the rotation angle.

        Below table coverage a tangent-space Gaussian branch takes over
        (the heat kernel converges to a folded 3D Gaussian as sigma -> 0).
        """
        if sigma < self.sigma_min:
            v = rng.standard_normal((n, 3)) * sigma
            return np.minimum(np.linalg.norm(v, axis=-1), np.pi - 1e-9)
        sigma = self._check_sigma(sigma)
        j0, j1, w = self._sigma_weights(sigma)
        cdf = (1 - w) * self.cdf[j0] + w * self.cdf[j1]
        u = rng.uniform(size=n)
        return np.interp(u, cdf, self.omega_grid)

    def sample(self, base: Rotation, sigma: float, rng: np.random.Generator, n: int | None = None) -> Rotation:
        """Draw rotations around `base`: base o exp(omega * axis), axis uniform."""
        batch = base.quat.shape[:-1]
        count = int(np.prod(batch)) if batch else (n or 1)
        if batch == () and n is not None:
            count = n
        omega = self.sample_angles(sigma, count, rng)
        axis = rng.standard_normal((count, 3))
        axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
        vec = axis * omega[:, None]
        if batch:
            vec = vec.reshape(batch + (3,))
        elif n is None:
            vec = vec[0]
        return base.compose(exp_so3(vec))

    def expected_score_sq(self, sigma: float) -> float:
        """E[(d log f / d omega)^2] under the angle marginal at this sigma."""
        sigma = self._check_sigma(sigma)
        j0, j1, w = self._sigma_weights(sigma)
        vals = []
        for j in (j0, j1):
            marg = self.pdf[j] * self._haar / self.norm[j]
            vals.append(np.trapezoid(marg * self.dlogf[j] ** 2, self.omega_grid))
        return float((1 - w) * vals[0] + w * vals[1])

    def score(self, relative: Rotation, sigma: float) -> np.ndarray:
        """Tangent-space score of IGSO3 at the relative rotation base^-1 R.

        Returns d(log f)/d(omega) * axis as a 3-vector (right-perturbation
        convention): for R = base o exp(v) the vector points back along -v.
        """
        v = log_so3(relative)
        omega = np.linalg.norm(v, axis=-1)
        safe = np.maximum(omega, 1e-12)
        # At omega -> 0 the score vanishes (f is even in omega).
        mag = np.where(
            omega > 1e-9,
            self.score_angle(np.maximum(omega, self.omega_grid[0]), sigma),
            0.0,
        )
        return v / safe[..., None] * mag[..., None]
