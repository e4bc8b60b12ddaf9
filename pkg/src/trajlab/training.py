"""Block-causal teacher forcing with contextual noise and the DSM loop.

A training example concatenates a perturbed-clean copy and a noised copy of
every frame of an L-frame snippet; the block mask lets each noisy frame
attend only strictly earlier clean frames plus its own tokens, so one
parallel pass reproduces L sequential conditional passes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .igso3 import IGSO3Table
from .model import Denoiser, DenoiserConfig
from .schedule import NoiseSchedule
from .se3 import Trajectory
from .sde import forward_translations_scaled

__all__ = [
    "AttentionMask",
    "TrainConfig",
    "TrainingExample",
    "build_block_causal_mask",
    "draw_stride",
    "sample_training_example",
    "parallel_scores",
    "dsm_loss",
    "train_loop",
]


@dataclass
class AttentionMask:
    """Frame-slot mask over [clean 1..L | noisy 1..L] (True = may attend)."""

    frame_level: torch.Tensor  # (2L, 2L) bool
    n_frames: int

    def token_level(self, n_residues: int) -> torch.Tensor:
        m = self.frame_level
        return m.repeat_interleave(n_residues, 0).repeat_interleave(n_residues, 1)


def build_block_causal_mask(L: int) -> AttentionMask:
    """Clean slot l sees clean <= l; noisy slot l sees clean < l plus itself."""
    if L < 1:
        raise ValueError("need L >= 1")
    m = torch.zeros(2 * L, 2 * L, dtype=torch.bool)
    for l in range(L):
        m[l, : l + 1] = True  # clean l -> clean <= l
        m[L + l, :l] = True  # noisy l -> clean < l
        m[L + l, L + l] = True  # noisy l -> its own frame (full spatial)
    return AttentionMask(m, L)


@dataclass(frozen=True)
class TrainConfig:
    ctx_noise_max: float = 0.1
    ctx_noise_prob: float = 0.75
    dt_range: tuple = (1.0e-2, 1.0e1)  # ns, log-uniform
    frames_per_sample: int = 8
    w_trans: float = 1.0
    w_rot: float = 0.5
    lr: float = 1.0e-3
    adam_betas: tuple = (0.9, 0.999)
    grad_clip: float = 1.0
    steps: int = 5000
    # "snr": optimize per-frame terms normalized by the target scale
    # (translations in noise space, rotations by E||score||^2), which keeps
    # every noise level trainable; the reported curve always carries the
    # plain score-space loss. "plain": optimize the score-space loss as is.
    loss_norm: str = "snr"
    warmup_steps: int = 200
    lr_min_factor: float = 0.1  # cosine decay floor as a fraction of lr

    def __post_init__(self):
        if not (0.0 <= self.ctx_noise_prob <= 1.0):
            raise ValueError("ctx_noise_prob must lie in [0, 1]")
        if self.dt_range[0] <= 0 or self.dt_range[1] < self.dt_range[0]:
            raise ValueError("dt_range must be positive and ordered")
        if self.loss_norm not in ("snr", "plain"):
            raise ValueError("loss_norm must be 'snr' or 'plain'")

    def lr_at(self, step: int) -> float:
        if self.steps <= 1:
            return self.lr
        if step < self.warmup_steps:
            return self.lr * (step + 1) / max(self.warmup_steps, 1)
        span = max(self.steps - self.warmup_steps, 1)
        frac = (step - self.warmup_steps) / span
        lo = self.lr * self.lr_min_factor
        return lo + 0.5 * (self.lr - lo) * (1.0 + np.cos(np.pi * frac))


@dataclass
class TrainingExample:
    """One snippet prepared for a parallel block-causal pass.

    ctx_* hold the committed-context (possibly perturbed) frame versions,
    noisy_* the per-frame target corruptions; eps and rot_target are the
    recorded score-matching targets in scaled / tangent units.
    """

    ctx_quats: np.ndarray  # (L,N,4)
    ctx_trans: np.ndarray  # (L,N,3) angstrom
    ctx_taus: np.ndarray  # (L,)
    noisy_quats: np.ndarray
    noisy_trans: np.ndarray
    target_taus: np.ndarray  # (L,)
    eps: np.ndarray  # (L,N,3) translation noise draws (scaled units)
    rot_target: np.ndarray  # (L,N,3) tangent score targets
    dt: float  # ns
    clean_quats: np.ndarray = None
    clean_trans: np.ndarray = None

    @property
    def n_frames(self) -> int:
        return self.ctx_quats.shape[0]

    @property
    def n_residues(self) -> int:
        return self.ctx_quats.shape[1]


def draw_stride(cfg: TrainConfig, rng: np.random.Generator) -> float:
    lo, hi = cfg.dt_range
    return float(np.exp(rng.uniform(np.log(lo), np.log(hi))))


def _perturb_rotations(quats, sigma, table: IGSO3Table, rng):
    n = quats.shape[0]
    omega = table.sample_angles(sigma, n, rng)
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=-1, keepdims=True)
    vec = axis * omega[:, None]
    from .se3 import Rotation, exp_so3

    return Rotation(quats).compose(exp_so3(vec)).quat, vec, omega, axis


def sample_training_example(
    traj: Trajectory,
    cfg: TrainConfig,
    schedule: NoiseSchedule,
    table: IGSO3Table,
    rng: np.random.Generator,
    max_retries: int = 1000,
) -> TrainingExample:
    """Draw stride, subsample, perturb contexts, corrupt targets.

    The physical stride snaps to the nearest integer multiple of the
    trajectory's base stride; draws that do not fit the trajectory are
    resampled (smaller strides always fit as long as the trajectory has at
    least frames_per_sample frames).
    """
    base = traj.uniform_stride
    if base is None:
        raise ValueError("training trajectories must have a uniform stride")
    L = cfg.frames_per_sample
    if traj.n_frames < L:
        raise ValueError("trajectory shorter than frames_per_sample")
    for _ in range(max_retries):
        mult = max(1, int(round(draw_stride(cfg, rng) / base)))
        if (L - 1) * mult + 1 <= traj.n_frames:
            break
    else:
        mult = max(1, (traj.n_frames - 1) // max(L - 1, 1))
    dt = mult * base
    start = int(rng.integers(0, traj.n_frames - (L - 1) * mult))
    idx = start + mult * np.arange(L)

    quats = traj.quaternions()[idx]  # (L,N,4)
    trans = traj.translations()[idx]
    N = quats.shape[1]

    ctx_quats = quats.copy()
    ctx_trans = trans.copy()
    ctx_taus = np.zeros(L)
    for l in range(L):
        if rng.uniform() < cfg.ctx_noise_prob:
            tau_c = float(rng.uniform(0.0, cfg.ctx_noise_max))
            ctx_taus[l] = tau_c
            noisy_scaled, _ = forward_translations_scaled(
                schedule.to_scaled(trans[l]), tau_c, schedule, rng
            )
            ctx_trans[l] = schedule.to_angstrom(noisy_scaled)
            ctx_quats[l], _, _, _ = _perturb_rotations(
                quats[l], float(schedule.sigma_of_tau(tau_c)), table, rng
            )

    target_taus = rng.uniform(schedule.tau_min, schedule.tau_max, L)
    noisy_quats = np.empty_like(quats)
    noisy_trans = np.empty_like(trans)
    eps = np.empty((L, N, 3))
    rot_target = np.empty((L, N, 3))
    for l in range(L):
        tau = float(target_taus[l])
        noisy_scaled, e = forward_translations_scaled(
            schedule.to_scaled(trans[l]), tau, schedule, rng
        )
        noisy_trans[l] = schedule.to_angstrom(noisy_scaled)
        eps[l] = e
        sigma = float(schedule.sigma_of_tau(tau))
        noisy_quats[l], _, omega, axis = _perturb_rotations(quats[l], sigma, table, rng)
        mag = table.score_angle(np.maximum(omega, table.omega_grid[0]), sigma)
        rot_target[l] = axis * mag[:, None]

    return TrainingExample(
        ctx_quats=ctx_quats,
        ctx_trans=ctx_trans,
        ctx_taus=ctx_taus,
        noisy_quats=noisy_quats,
        noisy_trans=noisy_trans,
        target_taus=target_taus,
        eps=eps,
        rot_target=rot_target,
        dt=dt,
        clean_quats=quats,
        clean_trans=trans,
    )


def _example_tensors(example: TrainingExample):
    L, N = example.n_frames, example.n_residues
    t = lambda a: torch.from_numpy(np.ascontiguousarray(a))
    quats = torch.cat([t(example.ctx_quats), t(example.noisy_quats)], dim=0)
    trans = torch.cat([t(example.ctx_trans), t(example.noisy_trans)], dim=0)
    # previous committed frame per slot: ctx l-1 for both copies of frame l
    prev_q = torch.zeros_like(t(example.ctx_quats))
    prev_q[..., 0] = 1.0
    prev_t = torch.zeros_like(t(example.ctx_trans))
    prev_valid = torch.zeros(L, dtype=torch.bool)
    if L > 1:
        prev_q[1:] = t(example.ctx_quats[:-1])
        prev_t[1:] = t(example.ctx_trans[:-1])
        prev_valid[1:] = True
    prev_quats = torch.cat([prev_q, prev_q], dim=0)
    prev_trans = torch.cat([prev_t, prev_t], dim=0)
    prev_valid = torch.cat([prev_valid, prev_valid], dim=0)
    taus = torch.cat([t(example.ctx_taus), t(example.target_taus)])
    dts = torch.full((2 * L,), float(example.dt), dtype=torch.float64)
    frame_index = torch.arange(L).repeat(2)
    return quats, trans, (prev_quats, prev_trans, prev_valid), taus, dts, frame_index


def parallel_scores(model: Denoiser, example: TrainingExample):
    """Block-causal parallel pass; returns per-frame target-scores (L,N,3) x2."""
    from .model import build_features

    L = example.n_frames
    quats, trans, prev, taus, dts, frame_index = _example_tensors(example)
    mask = build_block_causal_mask(L).frame_level
    single, pair = build_features(model.cfg, quats, trans, *prev)
    h = model.trunk(single, pair, taus, dts, frame_index, mask)
    trans_score, rot_score = model.head_scores(h, quats, taus)
    return trans_score[L:], rot_score[L:]


def dsm_loss(
    trans_pred: torch.Tensor,  # (L,N,3) scaled-unit score predictions
    rot_pred: torch.Tensor,  # (L,N,3) local tangent
    eps: torch.Tensor,  # (L,N,3) recorded translation noise
    rot_target: torch.Tensor,  # (L,N,3)
    taus: torch.Tensor,  # (L,)
    schedule: NoiseSchedule,
    w_trans: float = 1.0,
    w_rot: float = 0.5,
    frame_norm_t=None,  # optional per-frame normalizers (L,)
    frame_norm_r=None,
):
    """Scorematching loss, mean over frames of per-frame 1/(3N)-normalized terms."""
    L, N = trans_pred.shape[0], trans_pred.shape[1]
    alpha = torch.from_numpy(np.asarray(schedule.alpha_bar(taus.detach().cpu().numpy())))
    target_t = -eps / torch.sqrt(1.0 - alpha).reshape(-1, 1, 1)
    per_frame_t = ((trans_pred - target_t) ** 2).sum(dim=(1, 2)) / (3.0 * N)
    per_frame_r = ((rot_pred - rot_target) ** 2).sum(dim=(1, 2)) / (3.0 * N)
    if frame_norm_t is not None:
        per_frame_t = per_frame_t * frame_norm_t
    if frame_norm_r is not None:
        per_frame_r = per_frame_r * frame_norm_r
    loss_t = per_frame_t.mean()
    loss_r = per_frame_r.mean()
    loss = w_trans * loss_t + w_rot * loss_r
    if not torch.isfinite(loss):
        raise FloatingPointError("non-finite DSM loss")
    return loss, float(loss_t.detach()), float(loss_r.detach())


def train_loop(
    dataset: list[Trajectory],
    cfg: TrainConfig,
    model: Denoiser,
    rng: np.random.Generator,
    schedule: NoiseSchedule | None = None,
    table: IGSO3Table | None = None,
    log_every: int = 0,
):
    """Adam-based DSM training; returns (model, curve rows).

    Deterministic given the numpy Generator: all sampling runs through it
    and torch ops are single-stream CPU float64. Curve rows carry
    (step, loss_trans, loss_rot, grad_norm).
    """
    schedule = schedule or model.schedule
    table = table or IGSO3Table()
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=cfg.adam_betas)
    curve = []
    for step in range(cfg.steps):
        traj = dataset[int(rng.integers(0, len(dataset)))]
        ex = sample_training_example(traj, cfg, schedule, table, rng)
        trans_pred, rot_pred = parallel_scores(model, ex)
        eps_t = torch.from_numpy(ex.eps)
        rot_t = torch.from_numpy(ex.rot_target)
        taus_t = torch.from_numpy(ex.target_taus)
        norm_t = norm_r = None
        w_trans, w_rot = cfg.w_trans, cfg.w_rot
        if cfg.loss_norm == "snr":
            alpha = schedule.alpha_bar(ex.target_taus)
            norm_t = torch.from_numpy(1.0 - alpha)
            sig_sq = np.array(
                [table.expected_score_sq(float(schedule.sigma_of_tau(t))) for t in ex.target_taus]
            )
            norm_r = torch.from_numpy(3.0 / np.maximum(sig_sq, 1e-12))
            # normalized terms are O(1) each; rotations carry equal weight so
            # the orientation channel trains as fast as the translation one
            w_trans, w_rot = 1.0, 1.0
        loss, _, _ = dsm_loss(
            trans_pred, rot_pred, eps_t, rot_t, taus_t, schedule,
            w_trans, w_rot, norm_t, norm_r,
        )
        with torch.no_grad():
            _, lt, lr_ = dsm_loss(
                trans_pred.detach(), rot_pred.detach(), eps_t, rot_t, taus_t, schedule,
                cfg.w_trans, cfg.w_rot,
            )
        if float(loss.detach()) > 1.0e6:
            raise RuntimeError(f"training diverged at step {step}: loss={float(loss.detach()):.3e}")
        for group in opt.param_groups:
            group["lr"] = cfg.lr_at(step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        gnorm = torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
        opt.step()
        curve.append((step, lt, lr_, float(gnorm)))
        if log_every and step % log_every == 0:
            print(f"step {step:6d} loss_t {lt:10.4f} loss_r {lr_:10.4f} gnorm {float(gnorm):8.3f}")
    return model, curve


def write_loss_curve(path, curve) -> None:
    with open(path, "w") as f:
        f.write("step,loss_trans,loss_rot,grad_norm\n")
        for step, lt, lr_, g in curve:
            f.write(f"{step},{lt:.10g},{lr_:.10g},{g:.10g}\n")
