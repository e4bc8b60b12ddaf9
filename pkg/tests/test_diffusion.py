import numpy as np
import pytest
from scipy import stats

from trajlab import se3
from trajlab.schedule import NoiseSchedule
from trajlab.sde import (
    ScoreValue,
    forward_translations,
    forward_translations_scaled,
    reverse_rotation_step,
    reverse_step,
    reverse_translation_step_scaled,
)
from trajlab.se3 import FrameSet, Rotation


class ZeroNoise:
    """rng stub whose Gaussian draws are all zero."""

    def standard_normal(self, shape=()):
        return np.zeros(shape)


# -- schedule -----------------------------------------------------------------


def test_alpha_bar_endpoints_and_closed_form(schedule):
    assert schedule.alpha_bar(0.0) == 1.0
    # integral of linear beta: 0.1 + 19.9/2 = 10.05
    assert abs(schedule.alpha_bar(1.0) - np.exp(-10.05)) < 1e-15


def test_alpha_bar_monotone(schedule):
    taus = np.linspace(0.0, 1.0, 201)
    a = schedule.alpha_bar(taus)
    assert np.all(np.diff(a) < 0.0)
    assert np.all((a > 0) & (a <= 1.0))


def test_alpha_bar_domain_errors(schedule):
    with pytest.raises(ValueError):
        schedule.alpha_bar(-0.01)
    with pytest.raises(ValueError):
        schedule.alpha_bar(1.01)


def test_sigma_of_tau_values(schedule):
    assert abs(schedule.sigma_of_tau(0.0) - 0.1) < 1e-15
    assert abs(schedule.sigma_of_tau(1.0) - 1.5) < 1e-15
    # log-linear midpoint = geometric mean
    assert abs(schedule.sigma_of_tau(0.5) - np.sqrt(0.15)) < 1e-15


def test_schedule_validation():
    with pytest.raises(ValueError):
        NoiseSchedule(tau_min=0.5, tau_max=0.2)
    with pytest.raises(ValueError):
        NoiseSchedule(b_min=5.0, b_max=1.0)
    with pytest.raises(ValueError):
        NoiseSchedule(sigma_min=2.0, sigma_max=1.0)


# -- forward translations -------------------------------------------------------


def test_forward_at_tau_zero_is_identity(schedule, rng):
    t0 = rng.normal(0, 5, (6, 3))
    noisy, eps = forward_translations(t0, 0.0, schedule, rng)
    assert np.abs(noisy - t0).max() < 1e-12
    assert eps.shape == t0.shape


def test_forward_zero_signal_case(schedule):
    rng1 = np.random.default_rng(7)
    rng2 = np.random.default_rng(7)
    noisy, eps = forward_translations_scaled(np.zeros((5, 3)), 0.5, schedule, rng1)
    expected_eps = rng2.standard_normal((5, 3))
    alpha = schedule.alpha_bar(0.5)
    assert np.array_equal(eps, expected_eps)
    assert np.abs(noisy - np.sqrt(1 - alpha) * eps).max() == 0.0


def test_forward_variance_monte_carlo(schedule):
    rng = np.random.default_rng(11)
    noisy, _ = forward_translations_scaled(np.zeros((100_000, 1)), 1.0, schedule, rng)
    target = 1.0 - schedule.alpha_bar(1.0)
    assert abs(noisy.var() / target - 1.0) < 0.02


def test_forward_terminal_kolmogorov_smirnov(schedule):
    rng = np.random.default_rng(3)
    t0 = rng.normal(0.0, 1.5, (100_000, 1)) * schedule.coordinate_scale
    noisy, _ = forward_translations_scaled(t0, 1.0, schedule, rng)
    ks = stats.kstest(noisy.ravel(), "norm").statistic
    assert ks < 0.01


def test_angstrom_boundary_scaling(schedule, rng):
    t0 = rng.normal(0, 5, (4, 3))
    r1 = np.random.default_rng(5)
    r2 = np.random.default_rng(5)
    noisy_ang, eps_a = forward_translations(t0, 0.3, schedule, r1)
    noisy_scaled, eps_s = forward_translations_scaled(t0 * 0.1, 0.3, schedule, r2)
    assert np.abs(noisy_ang * 0.1 - noisy_scaled).max() < 1e-15
    assert np.array_equal(eps_a, eps_s)


# -- igso3 ----------------------------------------------------------------------


def test_igso3_normalization(igso3_table):
    om = igso3_table.omega_grid
    for sig in (0.1, 0.5, 1.5):
        total = np.trapezoid(igso3_table.pdf_angle(om, sig), om)
        assert abs(total - 1.0) <= 1e-3


def test_igso3_cdf_monotone(igso3_table):
    assert np.all(np.diff(igso3_table.cdf, axis=1) >= -1e-15)


def test_igso3_small_sigma_tangent_branch(igso3_table):
    rng = np.random.default_rng(21)
    sigma = 0.02  # below table coverage -> direct small-sigma branch
    angles = igso3_table.sample_angles(sigma, 100_000, rng)
    predicted = sigma * np.sqrt(8.0 / np.pi)  # mean norm of N(0, sigma^2 I_3)
    assert abs(angles.mean() / predicted - 1.0) < 0.05


def test_igso3_sigma_out_of_table_errors(igso3_table):
    with pytest.raises(ValueError, match="outside table"):
        igso3_table.pdf_angle(1.0, 10.0)
    with pytest.raises(ValueError, match="outside table"):
        igso3_table.sample_angles(10.0, 4, np.random.default_rng(0))


def test_igso3_score_zero_at_density_maximum(igso3_table):
    # the Haar density is maximal at omega -> 0 where the score vanishes
    scores = igso3_table.score_angle(igso3_table.omega_grid[:4], 0.5)
    typical = abs(igso3_table.score_angle(1.0, 0.5))
    assert np.abs(scores).max() < 0.02 * typical


def test_igso3_sample_statistics_match_pdf(igso3_table):
    rng = np.random.default_rng(4)
    om = igso3_table.omega_grid
    for sig in (0.1, 0.6, 1.4):
        angles = igso3_table.sample_angles(sig, 200_000, rng)
        pdf = igso3_table.pdf_angle(om, sig)
        mean_pdf = np.trapezoid(om * pdf, om)
        assert abs(angles.mean() - mean_pdf) < 0.01 * max(mean_pdf, 0.1)


def test_igso3_bi_invariance(igso3_table):
    """Relative-angle statistics must not depend on the base rotation."""
    rng = np.random.default_rng(6)
    edges = np.linspace(0, np.pi, 13)
    counts = []
    for _ in range(5):
        base = se3.random_rotation(rng, (4000,))
        sampled = igso3_table.sample(base, 0.8, rng)
        rel = base.inverse().compose(sampled)
        counts.append(np.histogram(rel.angle(), bins=edges)[0])
    _, p, _, _ = stats.chi2_contingency(np.stack(counts))
    assert p > 0.01


def test_igso3_score_direction(igso3_table):
    rng = np.random.default_rng(8)
    base = se3.random_rotation(rng, (64,))
    sampled = igso3_table.sample(base, 0.5, rng)
    rel = base.inverse().compose(sampled)
    score = igso3_table.score(rel, 0.5)
    v = se3.log_so3(rel)
    # the score points back toward the base rotation: opposite the offset
    dots = np.sum(score * v, axis=-1)
    assert np.all(dots <= 1e-12)
    assert np.all(np.isfinite(score))


# -- reverse steps ----------------------------------------------------------------


def test_reverse_translation_pure_drift(schedule):
    t = np.array([[1.0, -2.0, 0.5]])
    tau, dtau = 0.6, 0.005
    beta = schedule.beta(tau)
    out = reverse_translation_step_scaled(t, np.zeros_like(t), tau, dtau, schedule, ZeroNoise())
    assert np.abs(out - (t + 0.5 * beta * t * dtau)).max() < 1e-15


def test_reverse_step_zero_dtau(schedule, igso3_table, rng):
    fs = FrameSet(se3.random_rotation(rng, (4,)).quat, rng.normal(0, 3, (4, 3)))
    score = ScoreValue(rng.normal(0, 1, (4, 3)), rng.normal(0, 1, (4, 3)))
    out = reverse_step(fs, score, 0.5, 0.0, schedule, rng)
    assert np.array_equal(out.translations, fs.translations)
    assert np.array_equal(out.quats, fs.quats)


def test_reverse_step_rejects_nan(schedule, rng):
    fs = FrameSet(se3.random_rotation(rng, (3,)).quat, rng.normal(0, 3, (3, 3)))
    bad = ScoreValue(np.full((3, 3), np.nan), np.zeros((3, 3)))
    with pytest.raises(FloatingPointError):
        reverse_step(fs, bad, 0.5, 0.01, schedule, rng)


def test_reverse_rotation_drift_direction(schedule):
    # a deterministic tangent step: R <- R exp(g^2 s dtau)
    r = Rotation.identity((1,))
    s = np.array([[0.0, 0.0, 2.0]])
    tau, dtau = 0.5, 0.01
    out = reverse_rotation_step(r, s, tau, dtau, schedule, ZeroNoise())
    g2 = schedule.rotation_diffusion_rate(tau)
    expected = se3.exp_so3(np.array([0.0, 0.0, g2 * 2.0 * dtau]))
    assert out.allclose(expected, 1e-12)


def test_reverse_full_gaussian_target_variance(schedule):
    """Analytic-score oracle: reverse SDE must reproduce a known Gaussian."""
    rng = np.random.default_rng(9)
    mu0, s0 = 0.3, 0.8
    taus = schedule.tau_grid()
    a1 = schedule.alpha_bar(1.0)
    x = rng.normal(np.sqrt(a1) * mu0, np.sqrt(a1 * s0**2 + 1 - a1), (10_000, 3))
    for k in range(schedule.steps):
        tau_k, tau_n = float(taus[k]), float(taus[k + 1])
        a = schedule.alpha_bar(tau_k)
        score = -(x - np.sqrt(a) * mu0) / (a * s0**2 + 1 - a)
        x = reverse_translation_step_scaled(x, score, tau_k, tau_k - tau_n, schedule, rng)
    a_end = schedule.alpha_bar(schedule.tau_min)
    target_var = a_end * s0**2 + 1 - a_end
    target_mean = np.sqrt(a_end) * mu0
    assert abs(x.var() / target_var - 1.0) < 0.05
    assert abs(x.mean() - target_mean) < 0.05 * s0


def test_reverse_wasserstein_monotone_contraction(schedule):
    """W2 distance to the data law shrinks along the reverse flow."""
    rng = np.random.default_rng(10)
    mu0, s0 = 0.0, 0.6
    taus = schedule.tau_grid()
    a1 = schedule.alpha_bar(1.0)
    x = rng.normal(np.sqrt(a1) * mu0, np.sqrt(a1 * s0**2 + 1 - a1), (20_000, 1))
    checkpoints = {60: None, 130: None, 200: None}
    target_q = stats.norm.ppf(np.linspace(0.0005, 0.9995, 2000), loc=mu0, scale=s0)
    for k in range(schedule.steps):
        tau_k, tau_n = float(taus[k]), float(taus[k + 1])
        a = schedule.alpha_bar(tau_k)
        score = -(x - np.sqrt(a) * mu0) / (a * s0**2 + 1 - a)
        x = reverse_translation_step_scaled(x, score, tau_k, tau_k - tau_n, schedule, rng)
        if (k + 1) in checkpoints:
            sample_q = np.quantile(x.ravel(), np.linspace(0.0005, 0.9995, 2000))
            checkpoints[k + 1] = np.sqrt(np.mean((sample_q - target_q) ** 2))
    w = [checkpoints[60], checkpoints[130], checkpoints[200]]
    assert w[0] > w[1] > w[2]
