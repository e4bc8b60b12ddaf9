"""Autoregressive generation with KV caching and context-noise re-injection.

Each new frame runs the full reverse SDE conditioned on the cache of
committed frames; the committed frame is then perturbed with a small
forward-diffusion draw (training marginal by default) and its keys/values
are appended. One generation stream is strictly sequential; independent
trajectories parallelize with independent caches and rng streams.

Generated translations are re-centered to zero centroid after every
reverse step: the score network is translation-invariant by construction,
so the centroid is an unobservable gauge that the plain reverse SDE would
otherwise inflate.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import torch

from .igso3 import IGSO3Table
from .model import Denoiser, KVCache, build_features
from .schedule import NoiseSchedule
from .se3 import FrameSet, Rotation, Trajectory, quat_normalize
from .sde import ScoreValue, forward_translations_scaled, reverse_step
from .training import TrainingExample, _perturb_rotations

__all__ = [
    "RolloutConfig",
    "GenerationError",
    "cache_memory_bytes",
    "generate",
    "sequential_scores",
]


def cache_memory_bytes(
    n_residues: int,
    n_frames: int,
    model_dim: int,
    layers: int = 1,
    bytes_per_scalar: int = 4,
    variant: str = "singles",
) -> int:
    """Closed-form KV-cache accounting (singles-only vs singles+pairs)."""
    if variant == "singles":
        per_layer = n_residues * n_frames * model_dim * bytes_per_scalar
    elif variant == "singles_plus_pairs":
        per_layer = (n_residues + n_residues**2) * n_frames * model_dim * bytes_per_scalar
    else:
        raise ValueError("variant must be 'singles' or 'singles_plus_pairs'")
    return layers * per_layer


@dataclass(frozen=True)
class RolloutConfig:
    ctx_noise: str = "resample"  # "resample" | "fixed" | "off"
    ctx_noise_max: float = 0.1
    ctx_noise_prob: float = 0.75
    ctx_fixed_tau: float = 0.05
    recenter: bool = True
    use_cache: bool = True
    # final noise-to-mean step at tau_min: the Euler chain stops at
    # tau_min > 0 and would otherwise hand back sqrt(1 - alpha(tau_min))
    # of leftover corruption
    final_denoise: bool = True
    # the per-frame global pose is an unobservable gauge for the invariant
    # score network; anchoring each committed frame onto its predecessor
    # (rigid Kabsch fit) stops orientation drift from accumulating over the
    # rollout, mirroring the aligned poses of consecutive training frames
    pose_anchor: bool = True

    def __post_init__(self):
        if self.ctx_noise not in ("resample", "fixed", "off"):
            raise ValueError("ctx_noise must be resample, fixed, or off")


class GenerationError(RuntimeError):
    def __init__(self, message: str, partial: Trajectory | None, info: dict):
        super().__init__(message)
        self.partial_trajectory = partial
        self.info = info


def _single_slot_tensors(quats_np, trans_np, tau, dt, frame_idx, prev):
    quats = torch.from_numpy(np.ascontiguousarray(quats_np)).unsqueeze(0)
    trans = torch.from_numpy(np.ascontiguousarray(trans_np)).unsqueeze(0)
    taus = torch.tensor([tau], dtype=torch.float64)
    dts = torch.tensor([max(dt, 1e-9)], dtype=torch.float64)
    fidx = torch.tensor([frame_idx])
    if prev is None:
        pq = torch.zeros_like(quats)
        pq[..., 0] = 1.0
        pt = torch.zeros_like(trans)
        pv = torch.zeros(1, dtype=torch.bool)
    else:
        pq = torch.from_numpy(np.ascontiguousarray(prev[0])).unsqueeze(0)
        pt = torch.from_numpy(np.ascontiguousarray(prev[1])).unsqueeze(0)
        pv = torch.ones(1, dtype=torch.bool)
    return quats, trans, (pq, pt, pv), taus, dts, fidx


def _full_history_mask(n_ctx: int) -> torch.Tensor:
    """[ctx 0..n_ctx-1 | current]: ctx i sees ctx <= i, current sees all."""
    F = n_ctx + 1
    m = torch.zeros(F, F, dtype=torch.bool)
    for i in range(n_ctx):
        m[i, : i + 1] = True
    m[n_ctx, :] = True
    return m


class _Conditioner:
    """Score evaluation against committed context, cached or re-encoded."""

    def __init__(self, model: Denoiser, dt: float, use_cache: bool):
        self.model = model
        self.dt = dt
        self.use_cache = use_cache
        self.cache = KVCache(model.cfg.n_layers)
        self.ctx_quats: list[np.ndarray] = []
        self.ctx_trans: list[np.ndarray] = []
        self.ctx_taus: list[float] = []

    @property
    def n_ctx(self) -> int:
        return len(self.ctx_quats)

    def _prev(self):
        if not self.ctx_quats:
            return None
        return self.ctx_quats[-1], self.ctx_trans[-1]

    def score(self, quats_np, trans_np, tau: float):
        model = self.model
        frame_idx = self.n_ctx
        quats, trans, prev, taus, dts, fidx = _single_slot_tensors(
            quats_np, trans_np, tau, self.dt, frame_idx, self._prev()
        )
        with torch.no_grad():
            if self.use_cache:
                single, pair = build_features(model.cfg, quats, trans, *prev)
                h = model.trunk(
                    single, pair, taus, dts, fidx,
                    mask=None, cache=self.cache if self.cache.n_frames else None,
                )
                ts, rs = model.head_scores(h, quats, taus)
            else:
                ts, rs = self._score_reencode(quats, trans, prev, taus, dts, fidx)
        return ts[0].numpy(), rs[0].numpy()

    def _score_reencode(self, quats, trans, prev, taus, dts, fidx):
        model = self.model
        n_ctx = self.n_ctx
        if n_ctx == 0:
            single, pair = build_features(model.cfg, quats, trans, *prev)
            h = model.trunk(single, pair, taus, dts, fidx, mask=None)
            return model.head_scores(h, quats, taus)
        cq = torch.from_numpy(np.stack(self.ctx_quats))
        ct = torch.from_numpy(np.stack(self.ctx_trans))
        all_q = torch.cat([cq, quats], dim=0)
        all_t = torch.cat([ct, trans], dim=0)
        pq = torch.zeros_like(all_q)
        pq[..., 0] = 1.0
        pt = torch.zeros_like(all_t)
        pv = torch.zeros(n_ctx + 1, dtype=torch.bool)
        pq[1:] = all_q[:n_ctx]
        pt[1:] = all_t[:n_ctx]
        pv[1:] = True
        taus_all = torch.cat([torch.tensor(self.ctx_taus, dtype=torch.float64), taus])
        dts_all = torch.full((n_ctx + 1,), float(dts[0]), dtype=torch.float64)
        fidx_all = torch.arange(n_ctx + 1)
        mask = _full_history_mask(n_ctx)
        single, pair = build_features(model.cfg, all_q, all_t, pq, pt, pv)
        h = model.trunk(single, pair, taus_all, dts_all, fidx_all, mask)
        ts, rs = model.head_scores(h, all_q, taus_all)
        return ts[-1:], rs[-1:]

    def commit(self, quats_np, trans_np, ctx_tau: float):
        """Run the committed frame through the trunk and append its K/V."""
        model = self.model
        frame_idx = self.n_ctx
        quats, trans, prev, taus, dts, fidx = _single_slot_tensors(
            quats_np, trans_np, ctx_tau, self.dt, frame_idx, self._prev()
        )
        if self.use_cache:
            with torch.no_grad():
                single, pair = build_features(model.cfg, quats, trans, *prev)
                _, keys, values = model.trunk(
                    single, pair, taus, dts, fidx,
                    mask=None, cache=self.cache if self.cache.n_frames else None,
                    collect_kv=True,
                )
            self.cache.append_frame(keys, values, frame_idx, ctx_tau)
        self.ctx_quats.append(np.array(quats_np))
        self.ctx_trans.append(np.array(trans_np))
        self.ctx_taus.append(float(ctx_tau))


def _denoise_to_mean(cond: "_Conditioner", fs: FrameSet, schedule: NoiseSchedule, recenter: bool) -> FrameSet:
    """Map the tau_min state to its posterior-mean clean structure.

    Translations use the Tweedie identity x0 = (x + (1-alpha) s) / sqrt(alpha);
    rotations apply the mean-reverting tangent step exp(sigma^2 s).
    """
    tau = schedule.tau_min
    ts, rs = cond.score(fs.quats, fs.translations, tau)
    if np.any(~np.isfinite(ts)) or np.any(~np.isfinite(rs)):
        raise FloatingPointError(f"non-finite score in final denoise at tau={tau:g}")
    alpha = float(schedule.alpha_bar(tau))
    x = schedule.to_scaled(fs.translations)
    x0 = (x + (1.0 - alpha) * ts) / np.sqrt(alpha)
    trans = schedule.to_angstrom(x0)
    if recenter:
        trans = trans - trans.mean(axis=0, keepdims=True)
    sigma = float(schedule.sigma_of_tau(tau))
    rot = Rotation(fs.quats).compose(_exp_tangent(sigma**2 * rs))
    return FrameSet(rot.quat, trans)


def _exp_tangent(v: np.ndarray):
    from .se3 import exp_so3

    return exp_so3(v)


def _anchor_pose(fs: FrameSet, prev: FrameSet) -> FrameSet:
    from .se3 import RigidFrame, kabsch_rotation

    rot, tvec, degenerate = kabsch_rotation(fs.translations, prev.translations)
    if degenerate:
        return fs
    from .se3 import Rotation as _Rotation

    return fs.transformed(RigidFrame(_Rotation.from_matrix(rot), tvec))


def _draw_ctx_tau(cfg: RolloutConfig, rng) -> float:
    if cfg.ctx_noise == "off":
        return 0.0
    if cfg.ctx_noise == "fixed":
        return float(cfg.ctx_fixed_tau)
    if rng.uniform() < cfg.ctx_noise_prob:
        return float(rng.uniform(0.0, cfg.ctx_noise_max))
    return 0.0


def _perturb_frame(quats, trans, ctx_tau, schedule, table, rng):
    if ctx_tau <= 0.0:
        return quats.copy(), trans.copy()
    noisy_scaled, _ = forward_translations_scaled(schedule.to_scaled(trans), ctx_tau, schedule, rng)
    p_trans = schedule.to_angstrom(noisy_scaled)
    p_quats, _, _, _ = _perturb_rotations(quats, float(schedule.sigma_of_tau(ctx_tau)), table, rng)
    return p_quats, p_trans


def generate(
    model: Denoiser,
    initial: FrameSet | None,
    n_frames: int,
    dt_ns: float,
    rng: np.random.Generator,
    n_residues: int | None = None,
    schedule: NoiseSchedule | None = None,
    table: IGSO3Table | None = None,
    cfg: RolloutConfig | None = None,
    dt_warn_range: tuple = (1.0e-2, 1.0e1),
) -> tuple[Trajectory, dict]:
    """Generate n_frames new frames after the (optional) initial frame.

    Returns (trajectory, info). The trajectory includes the initial frame
    when given; committed frames are never mutated by later generation. A
    non-finite score aborts with a GenerationError carrying the partial
    trajectory and diagnostics.
    """
    if n_frames < 1:
        raise ValueError("n_frames must be >= 1")
    schedule = schedule or model.schedule
    table = table or IGSO3Table()
    cfg = cfg or RolloutConfig()
    if not (dt_warn_range[0] <= dt_ns <= dt_warn_range[1]):
        import warnings

        warnings.warn(
            f"stride {dt_ns:g} ns outside the trained range {dt_warn_range}; extrapolating",
            stacklevel=2,
        )
    if initial is not None:
        n_residues = initial.n_residues
    if n_residues is None:
        raise ValueError("need n_residues when no initial frame is given")

    cond = _Conditioner(model, dt_ns, cfg.use_cache)
    frames: list[FrameSet] = []
    info = {
        "frames": 0,
        "stride_ns": float(dt_ns),
        "ctx_noise": cfg.ctx_noise,
        "cache_bytes_final": 0,
        "wall_time_s": 0.0,
    }
    t_start = time.perf_counter()

    if initial is not None:
        frames.append(initial.copy())
        ctx_tau = _draw_ctx_tau(cfg, rng)
        pq, pt = _perturb_frame(initial.quats, initial.translations, ctx_tau, schedule, table, rng)
        cond.commit(pq, pt, ctx_tau)

    taus = schedule.tau_grid()
    try:
        for _ in range(n_frames):
            trans_scaled = rng.standard_normal((n_residues, 3))
            if cfg.recenter:
                trans_scaled -= trans_scaled.mean(axis=0, keepdims=True)
            trans = schedule.to_angstrom(trans_scaled)
            q_raw = rng.standard_normal((n_residues, 4))
            norms = np.linalg.norm(q_raw, axis=-1, keepdims=True)
            # zero draws (deterministic test samplers) fall back to identity
            quats = np.where(norms < 1e-12, np.array([1.0, 0.0, 0.0, 0.0]), q_raw / np.maximum(norms, 1e-12))
            fs = FrameSet(quats, trans)
            for k in range(schedule.steps):
                tau_k, tau_next = float(taus[k]), float(taus[k + 1])
                ts, rs = cond.score(fs.quats, fs.translations, tau_k)
                fs = reverse_step(
                    fs, ScoreValue(ts, rs), tau_k, tau_k - tau_next, schedule, rng
                )
                if cfg.recenter:
                    centered = fs.translations - fs.translations.mean(axis=0, keepdims=True)
                    fs = FrameSet(fs.quats, centered)
            if cfg.final_denoise:
                fs = _denoise_to_mean(cond, fs, schedule, recenter=cfg.recenter)
            if cfg.pose_anchor and frames:
                fs = _anchor_pose(fs, frames[-1])
            frames.append(fs)
            ctx_tau = _draw_ctx_tau(cfg, rng)
            pq, pt = _perturb_frame(fs.quats, fs.translations, ctx_tau, schedule, table, rng)
            cond.commit(pq, pt, ctx_tau)
    except FloatingPointError as err:
        info["wall_time_s"] = time.perf_counter() - t_start
        info["frames"] = len(frames)
        info["error"] = str(err)
        partial = Trajectory(frames, dt_ns) if len(frames) else None
        raise GenerationError(f"generation aborted: {err}", partial, info) from err

    info["wall_time_s"] = time.perf_counter() - t_start
    info["frames"] = len(frames)
    info["cache_bytes_final"] = cache_memory_bytes(
        n_residues, cond.n_ctx, model.cfg.model_dim, model.cfg.n_layers, 4
    )
    return Trajectory(frames, dt_ns), info


def sequential_scores(model: Denoiser, example: TrainingExample):
    """Frame-by-frame KV-cached predictions for a training example.

    The oracle counterpart of the parallel block-causal pass: predict the
    noisy copy of frame l against the cache of committed contexts < l, then
    commit context l. Matches `training.parallel_scores` to float64
    round-off.
    """
    cond = _Conditioner(model, example.dt, use_cache=True)
    L = example.n_frames
    trans_scores, rot_scores = [], []
    for l in range(L):
        ts, rs = cond.score(
            example.noisy_quats[l], example.noisy_trans[l], float(example.target_taus[l])
        )
        trans_scores.append(ts)
        rot_scores.append(rs)
        cond.commit(example.ctx_quats[l], example.ctx_trans[l], float(example.ctx_taus[l]))
    return (
        torch.from_numpy(np.stack(trans_scores)),
        torch.from_numpy(np.stack(rot_scores)),
    )
