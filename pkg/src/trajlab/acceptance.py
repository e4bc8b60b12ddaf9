"""Acceptance battery: one callable per criterion, shared by the pytest
suite and the `trajlab selftest` command.

Each criterion function returns a CriterionResult with pass/fail, the
measured quantities, and its runtime. Tolerances are pinned here, not in
the callers.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

__all__ = ["CriterionResult", "CRITERIA", "run_all"]


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    elapsed_s: float = 0.0

    def as_dict(self) -> dict:
        return {
            "number": self.number,
            "name": self.name,
            "passed": bool(self.passed),
            "elapsed_s": round(self.elapsed_s, 3),
            "details": self.details,
        }


def _torch_setup():
    import torch

    torch.set_num_threads(1)
    return torch


# ---------------------------------------------------------------------------
# 1. KV-cache arithmetic


def criterion_1_kv_cache(seed: int = 0) -> CriterionResult:
    from .rollout import cache_memory_bytes

    singles = cache_memory_bytes(200, 32, 256, layers=1, bytes_per_scalar=4, variant="singles")
    pairs = cache_memory_bytes(200, 32, 256, layers=1, bytes_per_scalar=4, variant="singles_plus_pairs")
    ratio = pairs / singles
    details = {
        "singles_bytes": singles,
        "singles_plus_pairs_bytes": pairs,
        "ratio": ratio,
        "expected_singles": 6_553_600,
        "expected_pairs": 1_317_273_600,
    }
    passed = singles == 6_553_600 and pairs == 1_317_273_600 and 195.0 <= ratio <= 205.0
    return CriterionResult(1, "kv-cache arithmetic", passed, details)


# ---------------------------------------------------------------------------
# 2. complexity crossover


def criterion_2_crossover(seed: int = 0) -> CriterionResult:
    from .costmodel import crossover_L, flops

    checks = {
        "N=2": (crossover_L(2), 4.0),
        "N=100": (crossover_L(100), 10000.0 / 99.0),
        "N=1e6": (crossover_L(10**6) / 10**6, 1.0),
    }
    ok = abs(checks["N=2"][0] - 4.0) == 0.0
    ok &= abs(checks["N=100"][0] - 10000.0 / 99.0) < 1e-9
    ok &= abs(checks["N=1e6"][0] - 1.0) < 1e-5
    sweep_ok = True
    n_points = 0
    for n in (16, 32, 64, 128, 256, 512, 1024, 2048, 4096):
        L = 4
        while L <= n // 4:
            n_points += 1
            if not flops("st_joint", n, L) < flops("pairformer_single_temporal", n, L):
                sweep_ok = False
            L *= 2
    details = {k: v[0] for k, v in checks.items()}
    details["sweep_points"] = n_points
    details["sweep_all_st_joint_cheaper"] = sweep_ok
    return CriterionResult(2, "complexity crossover", ok and sweep_ok, details)


# ---------------------------------------------------------------------------
# 3. memory inflation (Proposition-level identity)


def criterion_3_inflation(seed: int = 0) -> CriterionResult:
    from . import mz

    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(50):
        sys_i = mz.random_stable_system(
            rng, int(rng.integers(1, 5)), int(rng.integers(2, 9)), with_kernels=bool(i % 2)
        )
        for _ in range(20):
            p = complex(rng.uniform(0.2, 3.0), rng.uniform(-2.0, 2.0))
            a = mz.inflate_kernel(sys_i, p)
            b = mz.schur_kernel_oracle(sys_i, p)
            worst = max(worst, float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), 1e-30)))

    hand = mz.BlockSystem(
        np.array([[0.0]]), np.array([[1.0]]), np.array([[1.0]]), np.array([[-1.0]])
    )
    t = np.linspace(0.0, 5.0, 501)
    k_err = float(np.max(np.abs(mz.kernel_time_closed_form(hand, t)[:, 0, 0] - np.exp(-t))))

    errs = []
    for dt in (2e-3, 1e-3):
        n = int(round(5.0 / dt))
        ks = mz.kernel_time_closed_form(hand, np.arange(n + 1) * dt)
        _, s_full, _ = mz.simulate_full(hand, np.array([1.0]), np.array([0.0]), 5.0, dt)
        _, s_gle = mz.simulate_gle(hand.omega_ss, ks, np.array([1.0]), 5.0, dt)
        errs.append(float(np.max(np.abs(s_gle[:, 0] - s_full[:, 0]))))
    ratio = errs[0] / errs[1]
    details = {
        "worst_inflation_residual": worst,
        "hand_kernel_max_err": k_err,
        "gle_full_errors": errs,
        "dt_halving_ratio": ratio,
    }
    passed = worst <= 1e-10 and k_err <= 1e-6 and 3.0 <= ratio <= 5.0
    return CriterionResult(3, "memory inflation identity", passed, details)


# ---------------------------------------------------------------------------
# 4. non-separability


def criterion_4_separability(seed: int = 0) -> CriterionResult:
    from . import mz

    rng = np.random.default_rng(seed + 1)
    t = np.linspace(0.0, 4.0, 81)
    u = rng.standard_normal((3, 3))
    rank1 = u[None, :, :] * np.exp(-1.3 * t)[:, None, None]
    svals1, verdict1 = mz.separability_test(rank1, tol=1e-6)
    rank1_ratio = float(svals1[1] / svals1[0])

    ratios = []
    for _ in range(20):
        sys_i = mz.random_stable_system(rng, 3, 6)
        svals, _ = mz.separability_test(mz.kernel_time_closed_form(sys_i, t))
        ratios.append(float(svals[1] / svals[0]))
    details = {
        "rank1_ratio": rank1_ratio,
        "rank1_verdict": verdict1,
        "coupled_min_ratio": min(ratios),
        "coupled_draws": len(ratios),
    }
    passed = rank1_ratio < 1e-12 and verdict1 == "separable" and min(ratios) > 1e-3
    return CriterionResult(4, "non-separable coupling", passed, details)


# ---------------------------------------------------------------------------
# 5. gradient exactness


def criterion_5_gradients(seed: int = 0) -> CriterionResult:
    torch = _torch_setup()
    from .igso3 import IGSO3Table
    from .model import Denoiser, DenoiserConfig
    from .schedule import NoiseSchedule
    from .synth import SynthConfig, synth_generate
    from .training import TrainConfig, dsm_loss, parallel_scores, sample_training_example

    sch = NoiseSchedule()
    table = IGSO3Table()
    rng = np.random.default_rng(seed + 2)
    model = Denoiser(DenoiserConfig(), sch).randomize(rng)
    traj = synth_generate(SynthConfig(n_residues=5), 64, seed=seed + 3)
    ex = sample_training_example(
        traj, TrainConfig(frames_per_sample=3), sch, table, np.random.default_rng(seed + 4)
    )
    eps = torch.from_numpy(ex.eps)
    rt = torch.from_numpy(ex.rot_target)
    taus = torch.from_numpy(ex.target_taus)

    def loss_fn():
        tp, rp = parallel_scores(model, ex)
        return dsm_loss(tp, rp, eps, rt, taus, sch)[0]

    loss = loss_fn()
    model.zero_grad()
    loss.backward()
    params = dict(model.named_parameters())
    per_tensor = max(3, int(np.ceil(200 / len(params))))
    h = 1e-5
    rng2 = np.random.default_rng(seed + 5)
    n_checked, n_pass, worst = 0, 0, 0.0
    worst_name = ""
    for name, p in params.items():
        flat = p.detach().reshape(-1)
        grad_flat = (
            p.grad.reshape(-1) if p.grad is not None else torch.zeros_like(flat)
        )
        idxs = rng2.choice(flat.numel(), size=min(per_tensor, flat.numel()), replace=False)
        for i in idxs:
            i = int(i)
            g_an = float(grad_flat[i])
            with torch.no_grad():
                flat[i] += h
            lp = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] -= 2 * h
            lm = float(loss_fn().detach())
            with torch.no_grad():
                flat[i] += h
            g_fd = (lp - lm) / (2 * h)
            # relative error with an absolute floor for near-zero gradients,
            # where the FD quotient is pure round-off
            rel = abs(g_fd - g_an) / max(abs(g_fd), abs(g_an), 1e-6)
            n_checked += 1
            if rel <= 1e-4:
                n_pass += 1
            if rel > worst:
                worst, worst_name = rel, name
    details = {
        "n_checked": n_checked,
        "n_passed": n_pass,
        "n_tensor_roles": len(params),
        "worst_rel_err": worst,
        "worst_tensor": worst_name,
    }
    return CriterionResult(5, "gradient exactness", n_checked >= 200 and n_pass == n_checked, details)


# ---------------------------------------------------------------------------
# 6. SE(3) equivariance


def criterion_6_equivariance(seed: int = 0) -> CriterionResult:
    torch = _torch_setup()
    from . import se3
    from .model import Denoiser, DenoiserConfig, denoiser_forward
    from .schedule import NoiseSchedule

    rng = np.random.default_rng(seed + 6)
    sch = NoiseSchedule()
    worst = 0.0
    model = None
    for c in range(50):
        if c % 10 == 0:
            model = Denoiser(DenoiserConfig(), sch).randomize(rng)
        L = int(rng.integers(1, 5))
        N = int(rng.integers(2, 9))
        quats = torch.from_numpy(se3.random_rotation(rng, (L, N)).quat)
        trans = torch.from_numpy(rng.normal(0.0, 5.0, (L, N, 3)))
        taus = torch.from_numpy(rng.uniform(sch.tau_min, 1.0, L))
        dts = torch.full((L,), float(rng.uniform(0.01, 10.0)), dtype=torch.float64)
        fidx = torch.arange(L)
        mask = torch.ones(L, L, dtype=torch.bool).tril()
        g = se3.random_rotation(rng)
        shift = torch.from_numpy(rng.normal(0.0, 10.0, 3))
        R = torch.from_numpy(g.as_matrix())
        quats_g = torch.from_numpy(se3.quat_multiply(g.quat, quats.numpy()))
        trans_g = torch.einsum("ab,fnb->fna", R, trans) + shift
        with torch.no_grad():
            ts, rs = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
            tsg, rsg = denoiser_forward(model, quats_g, trans_g, taus, dts, fidx, mask)
        err_t = float((tsg - torch.einsum("ab,fnb->fna", R, ts)).abs().max())
        err_r = float((rsg - rs).abs().max())
        worst = max(worst, err_t, err_r)
    details = {"configs": 50, "max_err": worst}
    return CriterionResult(6, "SE(3) equivariance", worst <= 1e-8, details)


# ---------------------------------------------------------------------------
# 7. block-causal / sequential consistency


def criterion_7_consistency(seed: int = 0) -> CriterionResult:
    torch = _torch_setup()
    from .igso3 import IGSO3Table
    from .model import Denoiser, DenoiserConfig
    from .rollout import RolloutConfig, generate, sequential_scores
    from .schedule import NoiseSchedule
    from .synth import SynthConfig, synth_generate
    from .training import TrainConfig, parallel_scores, sample_training_example

    sch = NoiseSchedule()
    table = IGSO3Table()
    rng = np.random.default_rng(seed + 7)
    model = Denoiser(DenoiserConfig(), sch).randomize(rng)
    traj = synth_generate(SynthConfig(), 512, seed=seed + 8)

    worst_par_seq = 0.0
    for L in (1, 2, 4, 8):
        ex = sample_training_example(
            traj, TrainConfig(frames_per_sample=L), sch, table, np.random.default_rng(seed + 10 + L)
        )
        with torch.no_grad():
            tp, rp = parallel_scores(model, ex)
        ts, rs = sequential_scores(model, ex)
        worst_par_seq = max(
            worst_par_seq, float((tp - ts).abs().max()), float((rp - rs).abs().max())
        )

    init = traj.frame_sets[0]
    t1, _ = generate(
        model, init, 2, 0.04, np.random.default_rng(seed + 20), schedule=sch, table=table,
        cfg=RolloutConfig(use_cache=True),
    )
    t2, _ = generate(
        model, init, 2, 0.04, np.random.default_rng(seed + 20), schedule=sch, table=table,
        cfg=RolloutConfig(use_cache=False),
    )
    cache_diff = max(
        float(np.abs(t1.translations() - t2.translations()).max()),
        float(np.abs(t1.quaternions() - t2.quaternions()).max()),
    )
    details = {"parallel_vs_sequential_max": worst_par_seq, "cached_vs_uncached_max": cache_diff}
    return CriterionResult(
        7, "teacher-forcing consistency", worst_par_seq <= 1e-10 and cache_diff <= 1e-9, details
    )


# ---------------------------------------------------------------------------
# 8. diffusion process


def criterion_8_diffusion(seed: int = 0) -> CriterionResult:
    from scipy import stats

    from .igso3 import IGSO3Table
    from .schedule import NoiseSchedule
    from .sde import forward_translations_scaled, reverse_translation_step_scaled

    sch = NoiseSchedule()
    table = IGSO3Table()
    rng = np.random.default_rng(seed + 30)

    norm_errs = {}
    for sig in (0.1, 0.5, 1.5):
        pa = table.pdf_angle(table.omega_grid, sig)
        norm_errs[sig] = float(abs(np.trapezoid(pa, table.omega_grid) - 1.0))

    t0 = rng.normal(0.0, 1.5, (100_000, 1)) * 0.1  # scaled units
    noisy, _ = forward_translations_scaled(t0, 1.0, sch, rng)
    ks = float(stats.kstest(noisy.ravel(), "norm").statistic)

    # reverse SDE with the analytic score of a Gaussian target
    mu0, s0 = 0.4, 0.7
    n_runs = 10_000
    taus = sch.tau_grid()
    alpha1 = float(sch.alpha_bar(1.0))
    x = rng.normal(
        np.sqrt(alpha1) * mu0, np.sqrt(alpha1 * s0**2 + 1.0 - alpha1), (n_runs, 3)
    )
    for k in range(sch.steps):
        tau_k, tau_n = float(taus[k]), float(taus[k + 1])
        a = float(sch.alpha_bar(tau_k))
        score = -(x - np.sqrt(a) * mu0) / (a * s0**2 + 1.0 - a)
        x = reverse_translation_step_scaled(x, score, tau_k, tau_k - tau_n, sch, rng)
    a_end = float(sch.alpha_bar(sch.tau_min))
    target_var = a_end * s0**2 + 1.0 - a_end
    var_rel_err = float(abs(x.var() - target_var) / target_var)

    details = {
        "igso3_norm_errs": norm_errs,
        "ks_statistic": ks,
        "terminal_var": float(x.var()),
        "target_var": target_var,
        "var_rel_err": var_rel_err,
    }
    passed = max(norm_errs.values()) <= 1e-3 and ks < 0.01 and var_rel_err < 0.05
    return CriterionResult(8, "diffusion process", passed, details)


# ---------------------------------------------------------------------------
# 9. metrics oracle suite


def criterion_9_metrics(seed: int = 0) -> CriterionResult:
    from .metrics import PCABasis, autocorr_curve, coverage, tica_correlation, vamp2_curve

    rng = np.random.default_rng(seed + 40)
    checks = {}

    x = rng.normal(0.0, 1.0, (400, 12))
    basis = PCABasis.fit(x, 12)
    cov = coverage(x, x, basis)
    checks["coverage_self"] = (cov["jsd"], cov["precision"], cov["recall"], cov["f1"])
    cov_ok = cov["jsd"] <= 1e-12 and cov["precision"] == cov["recall"] == cov["f1"] == 1.0

    ac0 = autocorr_curve(x, [0], PCABasis.fit(x, 12))[0]
    checks["autocorr_lag0"] = ac0
    ac0_ok = abs(ac0 - 1.0) <= 1e-12

    rho = 0.9
    n = 100_000
    ou = np.empty((n, 1))
    ou[0] = 0.0
    noise = rng.standard_normal(n)
    for i in range(1, n):
        ou[i] = rho * ou[i - 1] + noise[i]
    bas1 = PCABasis.fit(ou, 1)
    lags = list(range(1, 21))
    ac = autocorr_curve(ou, lags, bas1)
    ou_err = max(abs(ac[i] - rho ** lags[i]) for i in range(len(lags)))
    checks["ou_autocorr_max_err"] = ou_err
    ou_ok = ou_err <= 0.02

    w = rng.normal(0.0, 1.0, (100_000, 4))
    bas4 = PCABasis.fit(w, 4)
    v0 = vamp2_curve(w, [0], bas4)[0]
    v1 = vamp2_curve(w, [1, 5], bas4)
    checks["vamp2_lag0"] = v0
    checks["vamp2_white_noise"] = v1
    vamp_ok = abs(v0 - 4.0) <= 1e-6 and max(v1) <= 0.05

    y = rng.normal(0.0, 1.0, (200, 9))
    y[:, 0] += np.cumsum(rng.normal(0, 0.3, 200))  # a slow coordinate
    tc = tica_correlation(y, y, None, lags=[1])
    checks["tica_self_corr"] = tc["correlation"][0]
    tica_ok = tc["correlation"][0] is not None and abs(tc["correlation"][0] - 1.0) <= 1e-10

    y29 = y[:30]  # 29 lag-1 pairs
    tc29 = tica_correlation(y29, y, None, lags=[1])
    y30 = y[:31]
    tc30 = tica_correlation(y30, y, None, lags=[1])
    checks["tica_29_pairs"] = tc29["correlation"][0]
    checks["tica_30_pairs_defined"] = tc30["correlation"][0] is not None
    na_ok = tc29["correlation"][0] is None and tc30["correlation"][0] is not None

    passed = cov_ok and ac0_ok and ou_ok and vamp_ok and tica_ok and na_ok
    return CriterionResult(9, "metrics oracles", passed, checks)


# ---------------------------------------------------------------------------
# 10. end-to-end smoke


def criterion_10_end_to_end(seed: int = 0, steps: int = 5000) -> CriterionResult:
    torch = _torch_setup()
    from .igso3 import IGSO3Table
    from .metrics import PCABasis, autocorr_curve, coverage, validity
    from .model import Denoiser, DenoiserConfig
    from .rollout import RolloutConfig, generate
    from .schedule import NoiseSchedule
    from .se3 import kabsch_align
    from .synth import SynthConfig, synth_generate
    from .training import TrainConfig, train_loop

    sch = NoiseSchedule()
    table = IGSO3Table()
    scfg = SynthConfig(n_residues=8)
    train_traj = synth_generate(scfg, 4096, seed=seed + 50)
    rng = np.random.default_rng(seed + 51)
    model = Denoiser(DenoiserConfig(), sch).init_for_training(rng)
    model, curve = train_loop([train_traj], TrainConfig(steps=steps), model, rng, sch, table)

    details = {"train_steps": steps, "final_loss_trans": curve[-1][1], "final_loss_rot": curve[-1][2]}
    passed = True
    for label, mult in (("1x", 1), ("4x", 4)):
        stride = scfg.base_dt * mult
        ref = synth_generate(
            SynthConfig(n_residues=8, base_dt=stride), 64, seed=seed + 60 + mult
        )
        gen, _ = generate(
            model,
            ref.frame_sets[0],
            63,
            stride,
            np.random.default_rng(seed + 70 + mult),
            schedule=sch,
            table=table,
            cfg=RolloutConfig(),
        )
        ref_frame = ref.frame_sets[0]
        gen_al = kabsch_align(gen, ref_frame).trajectory
        ref_al = kabsch_align(ref, ref_frame).trajectory
        vmask = validity(gen_al)
        basis = PCABasis.fit(ref_al)
        cov = coverage(gen_al, ref_al, basis)
        lags = list(range(1, 11))
        ac_g = autocorr_curve(gen_al, lags, basis)
        ac_r = autocorr_curve(ref_al, lags, basis)
        ac_err = max(
            abs(a - b) for a, b in zip(ac_g, ac_r) if a is not None and b is not None
        )
        details[label] = {
            "validity_pct": vmask.percent_valid,
            "recall": cov["recall"],
            "jsd": cov["jsd"],
            "autocorr_max_abs_err": ac_err,
        }
        passed = passed and (
            vmask.percent_valid >= 95.0
            and cov["recall"] >= 0.5
            and cov["jsd"] <= 0.5
            and ac_err <= 0.15
        )
    return CriterionResult(10, "end-to-end smoke", passed, details)


CRITERIA = {
    1: criterion_1_kv_cache,
    2: criterion_2_crossover,
    3: criterion_3_inflation,
    4: criterion_4_separability,
    5: criterion_5_gradients,
    6: criterion_6_equivariance,
    7: criterion_7_consistency,
    8: criterion_8_diffusion,
    9: criterion_9_metrics,
    10: criterion_10_end_to_end,
}


def run_all(seed: int = 0, only=None, verbose: bool = False) -> list[CriterionResult]:
    results = []
    for num, fn in sorted(CRITERIA.items()):
        if only is not None and num not in only:
            continue
        t0 = time.perf_counter()
        res = fn(seed=seed)
        res.elapsed_s = time.perf_counter() - t0
        results.append(res)
        if verbose:
            status = "PASS" if res.passed else "FAIL"
            print(f"[{status}] criterion {num:2d} {res.name} ({res.elapsed_s:.1f}s)")
    return results
