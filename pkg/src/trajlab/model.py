"""Joint space-time causal diffusion denoiser (torch, float64).

Tokens index (residue i, frame slot f). Geometry enters only through
rigid-invariant features (within-frame neighbor geometry in each residue's
local frame, plus relative pose to the committed previous frame), so the
network output is invariant by construction; equivariance of the
translation score comes from rotating the per-residue local head output by
that residue's current rotation. Pair features exist per frame and bias
attention logits for same-frame token pairs only; history is consumed
exclusively through cached singles keys/values.

Keys are cached before the rotary rotation and rotated lazily at attention
time with their stored frame indices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch
from torch import nn

from .schedule import NoiseSchedule

__all__ = [
    "DenoiserConfig",
    "Denoiser",
    "KVCache",
    "rope2d",
    "quat_to_matrix_t",
    "quat_multiply_t",
    "quat_conjugate_t",
    "quat_to_rotvec_t",
    "build_features",
    "denoiser_forward",
]

DTYPE = torch.float64


# ---------------------------------------------------------------------------
# quaternion helpers (torch, batched, differentiable)


def quat_multiply_t(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        dim=-1,
    )


def quat_conjugate_t(q: torch.Tensor) -> torch.Tensor:
    return torch.cat([q[..., :1], -q[..., 1:]], dim=-1)


def quat_to_matrix_t(q: torch.Tensor) -> torch.Tensor:
    q = q / q.norm(dim=-1, keepdim=True)
    w, x, y, z = q.unbind(-1)
    m = torch.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        dim=-1,
    )
    return m.reshape(q.shape[:-1] + (3, 3))


def quat_to_rotvec_t(q: torch.Tensor) -> torch.Tensor:
    q = torch.where(q[..., :1] < 0, -q, q)
    w = q[..., 0].clamp(-1.0, 1.0)
    v = q[..., 1:]
    nv = v.norm(dim=-1)
    angle = 2.0 * torch.atan2(nv, w)
    small = nv < 1e-8
    scale = torch.where(small, 2.0 / w.clamp_min(0.5), angle / nv.clamp_min(1e-30))
    return v * scale.unsqueeze(-1)


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class DenoiserConfig:
    model_dim: int = 64
    heads: int = 4
    st_layers: int = 2  # attention layers per block
    blocks: int = 2
    pair_dim: int = 16
    rope_2d: bool = True
    rope_base: float = 1.0e4
    k_neighbors: int = 7
    n_rbf: int = 16
    rbf_max: float = 20.0  # angstrom
    n_rbf_fine: int = 8  # extra bank resolving bond-scale distances
    rbf_fine_lo: float = 2.0
    rbf_fine_hi: float = 5.8
    n_index_feats: int = 16
    cond_dim: int = 64
    ffn_mult: int = 4
    use_pair_bias: bool = True
    disp_scale: float = 10.0  # angstrom unit for coarse displacement features
    disp_scale_fine: float = 3.8  # bond-length unit for fine displacements

    def __post_init__(self):
        if self.model_dim % (2 * self.heads) != 0:
            raise ValueError("model_dim must be divisible by 2*heads for 2D rotary splits")
        if self.heads < 1:
            raise ValueError("heads must be >= 1")
        for name in ("model_dim", "pair_dim", "cond_dim"):
            if getattr(self, name) < 2:
                raise ValueError(f"{name} must be >= 2")

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def n_layers(self) -> int:
        return self.blocks * self.st_layers

    @property
    def neighbor_feat_dim(self) -> int:
        # rbf banks + 2 displacement scales + relative-rotation vector + flag
        return self.n_rbf + self.n_rbf_fine + 10

    @property
    def single_in_dim(self) -> int:
        return self.n_index_feats + self.k_neighbors * self.neighbor_feat_dim + 10

    @property
    def pair_in_dim(self) -> int:
        return self.n_rbf + self.n_rbf_fine + 1 + 8


# ---------------------------------------------------------------------------
# invariant input features


def _sincos(x: torch.Tensor, n: int, max_freq: float = 100.0) -> torch.Tensor:
    """n-dim sin/cos bank with geometric frequencies 1..max_freq."""
    half = n // 2
    freqs = torch.exp(
        torch.linspace(0.0, math.log(max_freq), half, dtype=DTYPE, device=x.device)
    )
    ang = x.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(ang), torch.cos(ang)], dim=-1)


def distance_rbf(d: torch.Tensor, n_rbf: int, d_max: float, d_min: float = 0.0) -> torch.Tensor:
    """Gaussian radial basis encoding of distances on [d_min, d_max]."""
    centers = torch.linspace(d_min, d_max, n_rbf, dtype=DTYPE, device=d.device)
    width = (d_max - d_min) / (n_rbf - 1)
    return torch.exp(-((d.unsqueeze(-1) - centers) ** 2) / (2.0 * width**2))


def _dist_feats(cfg: DenoiserConfig, d: torch.Tensor) -> torch.Tensor:
    coarse = distance_rbf(d, cfg.n_rbf, cfg.rbf_max)
    fine = distance_rbf(d, cfg.n_rbf_fine, cfg.rbf_fine_hi, cfg.rbf_fine_lo)
    return torch.cat([coarse, fine], dim=-1)


def build_features(
    cfg: DenoiserConfig,
    quats: torch.Tensor,  # (F, N, 4)
    trans: torch.Tensor,  # (F, N, 3) angstrom
    prev_quats: torch.Tensor | None = None,  # (F, N, 4) committed previous frame
    prev_trans: torch.Tensor | None = None,
    prev_valid: torch.Tensor | None = None,  # (F,) bool
) -> tuple[torch.Tensor, torch.Tensor]:
    """Raw invariant token and pair features from rigid frames.

    Token features: residue-index sin/cos, then per nearest neighbor its
    distance RBF, the displacement in the residue's local frame, and a
    validity flag; finally the relative pose to the same residue in the
    previous committed frame. Pair features: distance RBF, relative-rotation
    trace, and a relative-index sin/cos. Everything is unchanged under one
    global rigid motion applied to all frames jointly.
    """
    F, N = trans.shape[0], trans.shape[1]
    dev = trans.device
    rot = quat_to_matrix_t(quats)  # (F,N,3,3)

    idx = torch.arange(N, dtype=DTYPE, device=dev)
    idx_feat = _sincos(idx / max(N, 2), cfg.n_index_feats).expand(F, N, cfg.n_index_feats)

    diff = trans.unsqueeze(1) - trans.unsqueeze(2)  # [f,i,j] = t_j - t_i
    dist = diff.norm(dim=-1)

    k_eff = min(cfg.k_neighbors, N - 1)
    big = torch.full_like(dist, 1e9)
    eye = torch.eye(N, dtype=torch.bool, device=dev)
    dist_masked = torch.where(eye, big, dist)
    knn_d, knn_j = torch.topk(dist_masked, k_eff, dim=-1, largest=False)  # (F,N,k_eff)

    gather_j = knn_j.unsqueeze(-1).expand(F, N, k_eff, 3)
    disp = torch.gather(diff, 2, gather_j)  # (F,N,k_eff,3) global
    local_disp = torch.einsum("fnab,fnka->fnkb", rot, disp)  # R_i^T (t_j - t_i)

    # relative orientation of each neighbor in the residue's own frame
    gather_q = knn_j.unsqueeze(-1).expand(F, N, k_eff, 4)
    nb_quats = torch.gather(quats.unsqueeze(1).expand(F, N, N, 4), 2, gather_q)
    q_rel_nb = quat_multiply_t(
        quat_conjugate_t(quats.unsqueeze(2).expand(F, N, k_eff, 4)), nb_quats
    )
    nb_rotvec = quat_to_rotvec_t(q_rel_nb)

    nb_feat = torch.cat(
        [
            _dist_feats(cfg, knn_d),
            local_disp / cfg.disp_scale_fine,
            local_disp / cfg.disp_scale,
            nb_rotvec,
            torch.ones(F, N, k_eff, 1, dtype=DTYPE, device=dev),
        ],
        dim=-1,
    )
    if k_eff < cfg.k_neighbors:
        pad = torch.zeros(
            F, N, cfg.k_neighbors - k_eff, cfg.neighbor_feat_dim, dtype=DTYPE, device=dev
        )
        nb_feat = torch.cat([nb_feat, pad], dim=2)
    nb_feat = nb_feat.reshape(F, N, cfg.k_neighbors * cfg.neighbor_feat_dim)

    if prev_trans is None:
        prev_feat = torch.zeros(F, N, 10, dtype=DTYPE, device=dev)
    else:
        d_prev = prev_trans - trans
        local_prev = torch.einsum("fnab,fna->fnb", rot, d_prev)
        q_rel = quat_multiply_t(quat_conjugate_t(quats), prev_quats)
        rv = quat_to_rotvec_t(q_rel)
        valid = prev_valid.to(DTYPE).reshape(F, 1, 1).expand(F, N, 1)
        prev_feat = torch.cat(
            [local_prev / cfg.disp_scale_fine, local_prev / cfg.disp_scale, rv, valid], dim=-1
        ) * valid

    single = torch.cat([idx_feat, nb_feat, prev_feat], dim=-1)

    pair_rbf = _dist_feats(cfg, dist)
    rel_rot = torch.einsum("fnab,fmac->fnmbc", rot, rot)  # R_i^T R_j
    trace = rel_rot.diagonal(dim1=-2, dim2=-1).sum(-1, keepdim=True) / 3.0
    rel_idx = (idx.unsqueeze(0) - idx.unsqueeze(1)) / max(N, 2)
    rel_feat = _sincos(rel_idx, 8).expand(F, N, N, 8)
    pair = torch.cat([pair_rbf, trace, rel_feat], dim=-1)
    return single, pair


# ---------------------------------------------------------------------------
# 2D rotary embedding


def _rope_angles(pos: torch.Tensor, dim_axis: int, base: float) -> tuple[torch.Tensor, torch.Tensor]:
    half = dim_axis // 2
    j = torch.arange(half, dtype=DTYPE, device=pos.device)
    inv_freq = base ** (-j / half)
    ang = pos.unsqueeze(-1) * inv_freq
    return torch.cos(ang), torch.sin(ang)


def _rotate_axis(v: torch.Tensor, cos: torch.Tensor, sin: torch.Tensor) -> torch.Tensor:
    half = v.shape[-1] // 2
    v1, v2 = v[..., :half], v[..., half:]
    return torch.cat([v1 * cos - v2 * sin, v1 * sin + v2 * cos], dim=-1)


def rope2d(
    v: torch.Tensor,  # (F, N, H, head_dim)
    residue_index: torch.Tensor,  # (N,)
    frame_index: torch.Tensor,  # (F,)
    base: float = 1.0e4,
) -> torch.Tensor:
    """Rotate the first head-dim half by residue index, the second by frame index."""
    F, N, H, dh = v.shape
    da = dh // 2
    vr, vf = v[..., :da], v[..., da:]
    cos_r, sin_r = _rope_angles(residue_index.to(DTYPE), da, base)
    cos_f, sin_f = _rope_angles(frame_index.to(DTYPE), da, base)
    vr = _rotate_axis(vr, cos_r.reshape(1, N, 1, da // 2), sin_r.reshape(1, N, 1, da // 2))
    vf = _rotate_axis(vf, cos_f.reshape(F, 1, 1, da // 2), sin_f.reshape(F, 1, 1, da // 2))
    return torch.cat([vr, vf], dim=-1)


# ---------------------------------------------------------------------------
# KV cache


@dataclass
class KVCache:
    """Per-layer pre-rotary keys and values for committed frames.

    Entry count is layers x frames x residues; the logical byte accounting
    (`logical_bytes`) follows the singles-only model N*L*d*bytes per layer.
    """

    n_layers: int
    keys: list = field(default_factory=list)
    values: list = field(default_factory=list)
    frame_index: list = field(default_factory=list)  # committed physical indices
    ctx_taus: list = field(default_factory=list)

    def __post_init__(self):
        self.keys = [[] for _ in range(self.n_layers)]
        self.values = [[] for _ in range(self.n_layers)]
        self._joined = [None] * self.n_layers

    @property
    def n_frames(self) -> int:
        return len(self.frame_index)

    def append_frame(self, layer_keys, layer_values, frame_index: int, ctx_tau: float):
        for l in range(self.n_layers):
            self.keys[l].append(layer_keys[l])
            self.values[l].append(layer_values[l])
            self._joined[l] = None
        self.frame_index.append(int(frame_index))
        self.ctx_taus.append(float(ctx_tau))

    def layer_kv(self, layer: int):
        if not self.frame_index:
            return None
        if self._joined[layer] is None:
            self._joined[layer] = (
                torch.cat(self.keys[layer], dim=0),  # (T, N, d)
                torch.cat(self.values[layer], dim=0),
            )
        return self._joined[layer]

    def entry_count(self, n_residues: int) -> int:
        return self.n_layers * self.n_frames * n_residues

    def logical_bytes(self, n_residues: int, model_dim: int, bytes_per_scalar: int = 4) -> int:
        return self.n_layers * self.n_frames * n_residues * model_dim * bytes_per_scalar


# ---------------------------------------------------------------------------
# network modules


class AdaLN(nn.Module):
    """Layer norm modulated by scale/shift/gate from the conditioning vector.

    Zero producer weights give a plain layer norm and a unit gate.
    """

    def __init__(self, dim: int, cond_dim: int, with_gate: bool = True):
        super().__init__()
        self.norm = nn.LayerNorm(dim, elementwise_affine=False, eps=1e-12)
        self.with_gate = with_gate
        self.producer = nn.Linear(cond_dim, 3 * dim if with_gate else 2 * dim)
        nn.init.zeros_(self.producer.weight)
        nn.init.zeros_(self.producer.bias)

    def forward(self, x: torch.Tensor, cond: torch.Tensor):
        # x (F,N,dim), cond (F,cond_dim)
        mod = self.producer(cond).unsqueeze(1)
        if self.with_gate:
            scale, shift, gate_raw = mod.chunk(3, dim=-1)
            return self.norm(x) * (1.0 + scale) + shift, 1.0 + gate_raw
        scale, shift = mod.chunk(2, dim=-1)
        return self.norm(x) * (1.0 + scale) + shift, None


class STAttentionLayer(nn.Module):
    """One joint space-time attention layer with pair bias and 2D rotary."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.model_dim
        self.ada_attn = AdaLN(d, cfg.cond_dim)
        self.wq = nn.Linear(d, d, bias=False)
        self.wk = nn.Linear(d, d, bias=False)
        self.wv = nn.Linear(d, d, bias=False)
        self.wo = nn.Linear(d, d)
        self.bias_proj = nn.Linear(cfg.pair_dim, cfg.heads, bias=False)
        self.ada_mlp = AdaLN(d, cfg.cond_dim)
        self.ffn = nn.Sequential(
            nn.Linear(d, cfg.ffn_mult * d), nn.GELU(), nn.Linear(cfg.ffn_mult * d, d)
        )

    def attention(
        self,
        s: torch.Tensor,  # (F,N,d) current slots
        z: torch.Tensor,  # (F,N,N,pair_dim)
        frame_index: torch.Tensor,  # (F,)
        mask: torch.Tensor | None,  # (F, T+F) slot-level, or None = attend all
        cached_kv=None,  # (k_raw (T,N,d), v (T,N,d)) pre-rotary
        cached_frame_index: torch.Tensor | None = None,
    ):
        cfg = self.cfg
        F, N, d = s.shape
        H, dh = cfg.heads, cfg.head_dim
        q_raw = self.wq(s)
        k_raw = self.wk(s)
        v_raw = self.wv(s)

        if cached_kv is not None:
            k_all_raw = torch.cat([cached_kv[0], k_raw], dim=0)
            v_all = torch.cat([cached_kv[1], v_raw], dim=0)
            all_frame_index = torch.cat([cached_frame_index, frame_index])
            n_cached = cached_kv[0].shape[0]
        else:
            k_all_raw, v_all = k_raw, v_raw
            all_frame_index = frame_index
            n_cached = 0
        Fk = k_all_raw.shape[0]

        res_idx = torch.arange(N, device=s.device)
        q = q_raw.reshape(F, N, H, dh)
        k = k_all_raw.reshape(Fk, N, H, dh)
        if cfg.rope_2d:
            q = rope2d(q, res_idx, frame_index, cfg.rope_base)
            k = rope2d(k, res_idx, all_frame_index, cfg.rope_base)

        logits = torch.einsum("fnhd,gmhd->hfngm", q, k) / math.sqrt(dh)
        if cfg.use_pair_bias:
            bias = self.bias_proj(z).permute(3, 0, 1, 2)  # (H,F,N,N)
            # same-slot blocks: query slot f of the current grid pairs with
            # key slot n_cached + f
            slot_hit = torch.zeros(F, Fk, dtype=DTYPE, device=s.device)
            slot_hit[torch.arange(F), n_cached + torch.arange(F)] = 1.0
            logits = logits + torch.einsum("hfnm,fg->hfngm", bias, slot_hit)

        if mask is not None:
            if mask.shape != (F, Fk):
                raise ValueError(f"mask shape {tuple(mask.shape)} != {(F, Fk)}")
            if not bool(mask.any(dim=1).all()):
                raise ValueError("attention mask has a fully masked query row")
            logits = logits.masked_fill(
                ~mask.reshape(1, F, 1, Fk, 1), float("-inf")
            )
        att = torch.softmax(logits.reshape(H, F, N, Fk * N), dim=-1).reshape(H, F, N, Fk, N)
        out = torch.einsum("hfngm,gmhd->fnhd", att, v_all.reshape(Fk, N, H, dh))
        out = self.wo(out.reshape(F, N, d))
        return out, k_raw, v_raw

    def forward(self, s, z, cond, frame_index, mask, cached_kv=None, cached_frame_index=None):
        h, gate = self.ada_attn(s, cond)
        attn_out, k_raw, v_raw = self.attention(
            h, z, frame_index, mask, cached_kv, cached_frame_index
        )
        s = s + gate * attn_out
        h, gate = self.ada_mlp(s, cond)
        s = s + gate * self.ffn(h)
        return s, k_raw, v_raw


class EdgeTransition(nn.Module):
    """Residual pair update z_ij += MLP(s_i, s_j, z_ij)."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        d, p = cfg.model_dim, cfg.pair_dim
        self.mlp = nn.Sequential(nn.Linear(2 * d + p, 2 * p), nn.GELU(), nn.Linear(2 * p, p))

    def forward(self, s: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
        F, N, d = s.shape
        si = s.unsqueeze(2).expand(F, N, N, d)
        sj = s.unsqueeze(1).expand(F, N, N, d)
        return z + self.mlp(torch.cat([si, sj, z], dim=-1))


class Denoiser(nn.Module):
    """Embedding, stacked space-time blocks, and the score head."""

    def __init__(self, cfg: DenoiserConfig, schedule: NoiseSchedule | None = None):
        super().__init__()
        self.cfg = cfg
        self.schedule = schedule or NoiseSchedule()
        d = cfg.model_dim
        self.single_proj = nn.Linear(cfg.single_in_dim, d)
        self.pair_proj = nn.Linear(cfg.pair_in_dim, cfg.pair_dim)
        self.cond_mlp = nn.Sequential(
            nn.Linear(40, cfg.cond_dim), nn.SiLU(), nn.Linear(cfg.cond_dim, cfg.cond_dim)
        )
        self.layers = nn.ModuleList(STAttentionLayer(cfg) for _ in range(cfg.n_layers))
        self.edge_transitions = nn.ModuleList(
            EdgeTransition(cfg) for _ in range(max(cfg.blocks - 1, 0))
        )
        self.final_ada = AdaLN(d, cfg.cond_dim, with_gate=False)
        self.head = nn.Sequential(
            nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, 2 * d), nn.GELU(), nn.Linear(2 * d, 6)
        )
        nn.init.zeros_(self.head[-1].weight)
        nn.init.zeros_(self.head[-1].bias)
        self.double()

    # -- conditioning ---------------------------------------------------

    def condition(self, taus: torch.Tensor, dts: torch.Tensor) -> torch.Tensor:
        # log tau resolves the two decades between tau_min and 1
        emb = torch.cat(
            [
                _sincos(taus, 16),
                _sincos(torch.log(taus.clamp_min(1e-4)), 8),
                _sincos(torch.log(dts.clamp_min(1e-9)), 16),
            ],
            dim=-1,
        )
        return self.cond_mlp(emb)

    # -- trunk ----------------------------------------------------------

    def trunk(
        self,
        single_feats: torch.Tensor,  # (F,N,single_in)
        pair_feats: torch.Tensor,  # (F,N,N,pair_in)
        taus: torch.Tensor,  # (F,)
        dts: torch.Tensor,  # (F,)
        frame_index: torch.Tensor,  # (F,)
        mask: torch.Tensor | None = None,  # slot-level (F, T+F)
        cache: KVCache | None = None,
        collect_kv: bool = False,
    ):
        cfg = self.cfg
        s = self.single_proj(single_feats)
        z = self.pair_proj(pair_feats)
        cond = self.condition(taus, dts)
        new_keys, new_values = [], []
        for li, layer in enumerate(self.layers):
            cached = cache.layer_kv(li) if cache is not None else None
            cached_idx = (
                torch.tensor(cache.frame_index, device=s.device)
                if cache is not None and cache.n_frames
                else None
            )
            s, k_raw, v_raw = layer(s, z, cond, frame_index, mask, cached, cached_idx)
            new_keys.append(k_raw)
            new_values.append(v_raw)
            block_end = (li + 1) % cfg.st_layers == 0
            block_no = (li + 1) // cfg.st_layers - 1
            if block_end and block_no < len(self.edge_transitions):
                z = self.edge_transitions[block_no](s, z)
        h, _ = self.final_ada(s, cond)
        if collect_kv:
            return h, new_keys, new_values
        return h

    # -- score head -----------------------------------------------------

    def head_scores(self, h: torch.Tensor, quats: torch.Tensor, taus: torch.Tensor):
        """Map final features to SE(3) scores.

        The raw head output is O(1); fixed schedule-dependent gains
        1/sqrt(1 - alpha(tau)) and 1/sigma(tau) convert noise-scale
        predictions into scores (translations in scaled units, rotations in
        the residue's local tangent space). Translation vectors are rotated
        to global coordinates by the residue's current rotation.
        """
        out = self.head(h)  # (F,N,6)
        dt_local, dr_local = out[..., :3], out[..., 3:]
        tau_c = taus.clamp_min(self.schedule.tau_min)
        alpha = torch.exp(
            -(self.schedule.b_min * tau_c + 0.5 * (self.schedule.b_max - self.schedule.b_min) * tau_c**2)
        )
        trans_gain = (1.0 - alpha).rsqrt().reshape(-1, 1, 1)
        log_ratio = math.log(self.schedule.sigma_max / self.schedule.sigma_min)
        sigma = self.schedule.sigma_min * torch.exp(tau_c * log_ratio)
        rot_gain = (1.0 / sigma).reshape(-1, 1, 1)
        rot = quat_to_matrix_t(quats)
        trans_score = torch.einsum("fnab,fnb->fna", rot, dt_local) * trans_gain
        rot_score = dr_local * rot_gain
        return trans_score, rot_score

    # -- parameter plumbing ----------------------------------------------

    def randomize(self, rng: np.random.Generator, scale: float = 1.0):
        """Deterministic re-initialization from a numpy Generator."""
        with torch.no_grad():
            for name, p in self.named_parameters():
                fan_in = p.shape[-1] if p.ndim > 1 else max(p.shape[0], 1)
                bound = scale / math.sqrt(fan_in)
                vals = rng.uniform(-bound, bound, size=tuple(p.shape))
                p.copy_(torch.from_numpy(vals))
        return self

    def init_for_training(self, rng: np.random.Generator):
        """Default init plus zeroed AdaLN producers and score head output."""
        self.randomize(rng)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, AdaLN):
                    m.producer.weight.zero_()
                    m.producer.bias.zero_()
            self.head[-1].weight.zero_()
            self.head[-1].bias.zero_()
        return self


# ---------------------------------------------------------------------------
# convenience single-call forward (embed -> trunk -> head)


def denoiser_forward(
    model: Denoiser,
    quats: torch.Tensor,
    trans: torch.Tensor,
    taus: torch.Tensor,
    dts: torch.Tensor,
    frame_index: torch.Tensor,
    mask: torch.Tensor | None = None,
    prev: tuple | None = None,  # (prev_quats, prev_trans, prev_valid)
    cache: KVCache | None = None,
):
    """Scores for every slot in one pass (no cache writes)."""
    cfg = model.cfg
    if prev is None:
        single, pair = build_features(cfg, quats, trans)
    else:
        single, pair = build_features(cfg, quats, trans, *prev)
    h = model.trunk(single, pair, taus, dts, frame_index, mask, cache)
    return model.head_scores(h, quats, taus)
