import numpy as np
import pytest
import torch

from trajlab import se3
from trajlab.model import (
    AdaLN,
    Denoiser,
    DenoiserConfig,
    KVCache,
    build_features,
    denoiser_forward,
    distance_rbf,
    quat_to_matrix_t,
    rope2d,
)
from trajlab.schedule import NoiseSchedule


def small_model(rng, **kw):
    cfg = DenoiserConfig(**kw)
    return Denoiser(cfg, NoiseSchedule()).randomize(rng), cfg


def random_inputs(rng, L=2, N=4):
    quats = torch.from_numpy(se3.random_rotation(rng, (L, N)).quat)
    trans = torch.from_numpy(rng.normal(0, 5, (L, N, 3)))
    taus = torch.from_numpy(rng.uniform(0.1, 1.0, L))
    dts = torch.full((L,), 0.05, dtype=torch.float64)
    fidx = torch.arange(L)
    mask = torch.ones(L, L, dtype=torch.bool).tril()
    return quats, trans, taus, dts, fidx, mask


# -- config -------------------------------------------------------------------


def test_config_validates_rope_split():
    with pytest.raises(ValueError):
        DenoiserConfig(model_dim=66, heads=4)  # not divisible by 2*heads
    cfg = DenoiserConfig()
    assert cfg.model_dim % (2 * cfg.heads) == 0


# -- embedding ----------------------------------------------------------------


def test_embed_deterministic(rng):
    cfg = DenoiserConfig()
    quats = torch.from_numpy(se3.random_rotation(rng, (2, 5)).quat)
    trans = torch.from_numpy(rng.normal(0, 5, (2, 5, 3)))
    s1, p1 = build_features(cfg, quats, trans)
    s2, p2 = build_features(cfg, quats, trans)
    assert torch.equal(s1, s2) and torch.equal(p1, p2)
    # identical FrameSets get identical per-frame features
    q2 = torch.cat([quats[:1], quats[:1]])
    t2 = torch.cat([trans[:1], trans[:1]])
    s3, _ = build_features(cfg, q2, t2)
    assert torch.equal(s3[0], s3[1])


def test_embed_rigid_invariance(rng):
    cfg = DenoiserConfig()
    quats = torch.from_numpy(se3.random_rotation(rng, (3, 6)).quat)
    trans = torch.from_numpy(rng.normal(0, 5, (3, 6, 3)))
    pq = torch.from_numpy(se3.random_rotation(rng, (3, 6)).quat)
    pt = torch.from_numpy(rng.normal(0, 5, (3, 6, 3)))
    pv = torch.ones(3, dtype=torch.bool)
    g = se3.random_rotation(rng)
    R = torch.from_numpy(g.as_matrix())
    shift = torch.from_numpy(rng.normal(0, 8, 3))

    def move(q, t):
        return (
            torch.from_numpy(se3.quat_multiply(g.quat, q.numpy())),
            torch.einsum("ab,fnb->fna", R, t) + shift,
        )

    s1, p1 = build_features(cfg, quats, trans, pq, pt, pv)
    qg, tg = move(quats, trans)
    pqg, ptg = move(pq, pt)
    s2, p2 = build_features(cfg, qg, tg, pqg, ptg, pv)
    assert float((s1 - s2).abs().max()) < 1e-10
    assert float((p1 - p2).abs().max()) < 1e-10


def test_embed_equilateral_triangle_pair_rbf():
    # distances (1,1,1): every off-diagonal pair feature must agree
    t = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.5, np.sqrt(3) / 2, 0.0]])
    d = torch.from_numpy(np.array([1.0]))
    rbf_ref = distance_rbf(d, 8, 20.0)[0]
    dists = np.linalg.norm(t[:, None, :] - t[None, :, :], axis=-1)
    for i in range(3):
        for j in range(3):
            if i != j:
                rbf_ij = distance_rbf(torch.from_numpy(dists[i : i + 1, j]), 8, 20.0)[0]
                assert float((rbf_ij - rbf_ref).abs().max()) < 1e-12


# -- rope ------------------------------------------------------------------------


def test_rope_identity_at_origin(rng):
    v = torch.from_numpy(rng.normal(size=(1, 1, 4, 16)))
    out = rope2d(v, torch.zeros(1, dtype=torch.long), torch.zeros(1, dtype=torch.long))
    assert torch.allclose(out, v, atol=1e-15)


def test_rope_norm_preservation(rng):
    v = torch.from_numpy(rng.normal(size=(3, 5, 4, 16)))
    out = rope2d(v, torch.arange(5), torch.arange(3) + 7)
    assert float((out.norm(dim=-1) - v.norm(dim=-1)).abs().max()) < 1e-12


def test_rope_relative_position_property(rng):
    """<rope(q,i,l), rope(k,i',l')> depends only on (i-i', l-l')."""
    q = torch.from_numpy(rng.normal(size=(4, 16)))
    k = torch.from_numpy(rng.normal(size=(4, 16)))

    def dot(i, l, ip, lp):
        rq = rope2d(q.reshape(1, 1, 4, 16), torch.tensor([i]), torch.tensor([l]))
        rk = rope2d(k.reshape(1, 1, 4, 16), torch.tensor([ip]), torch.tensor([lp]))
        return (rq * rk).sum(dim=-1).squeeze()

    for _ in range(100):
        i, ip = rng.integers(0, 30, 2)
        l, lp = rng.integers(0, 30, 2)
        s, t = rng.integers(0, 50, 2)
        a = dot(int(i), int(l), int(ip), int(lp))
        b = dot(int(i + s), int(l + t), int(ip + s), int(lp + t))
        assert float((a - b).abs().max()) < 1e-10


# -- attention --------------------------------------------------------------------


def test_attention_uniform_logits_average_values(rng):
    """Zero Q/K weights make logits uniform: output = mean of values."""
    model, cfg = small_model(rng)
    layer = model.layers[0]
    with torch.no_grad():
        layer.wq.weight.zero_()
        layer.wk.weight.zero_()
        layer.bias_proj.weight.zero_()
        layer.wo.weight.copy_(torch.eye(cfg.model_dim))
        layer.wo.bias.zero_()
    N = 5
    h = torch.from_numpy(rng.normal(size=(1, N, cfg.model_dim)))
    z = torch.from_numpy(rng.normal(size=(1, N, N, cfg.pair_dim)))
    out, _, v_raw = layer.attention(h, z, torch.arange(1), None)
    expected = layer.wv(h).mean(dim=1, keepdim=True).expand(1, N, cfg.model_dim)
    assert float((out - expected).abs().max()) < 1e-12


def test_attention_hand_computed_softmax(rng):
    """4-token single-head check against plain numpy attention."""
    cfg = DenoiserConfig(model_dim=4, heads=1, pair_dim=2, cond_dim=4, rope_2d=False,
                         use_pair_bias=False, n_index_feats=4)
    model = Denoiser(cfg, NoiseSchedule()).randomize(np.random.default_rng(0))
    layer = model.layers[0]
    wq = np.array([[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]], dtype=np.float64)
    wk = np.array([[0, 1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0]], dtype=np.float64)
    wv = np.array([[2, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 3]], dtype=np.float64)
    with torch.no_grad():
        layer.wq.weight.copy_(torch.from_numpy(wq))
        layer.wk.weight.copy_(torch.from_numpy(wk))
        layer.wv.weight.copy_(torch.from_numpy(wv))
        layer.wo.weight.copy_(torch.eye(4))
        layer.wo.bias.zero_()
    h_np = np.array(
        [[[1.0, 0.0, 2.0, -1.0], [0.0, 1.0, -1.0, 1.0]],
         [[2.0, -1.0, 0.0, 1.0], [1.0, 1.0, 1.0, 0.0]]]
    )
    h = torch.from_numpy(h_np)
    z = torch.zeros(2, 2, 2, 2, dtype=torch.float64)
    mask = torch.tensor([[True, False], [True, True]])
    out, _, _ = layer.attention(h, z, torch.arange(2), mask)

    # independent numpy reimplementation
    toks = h_np.reshape(4, 4)
    q = toks @ wq.T
    k = toks @ wk.T
    v = toks @ wv.T
    logits = q @ k.T / 2.0  # sqrt(head_dim) = 2
    allowed = np.kron(mask.numpy(), np.ones((2, 2), dtype=bool))
    logits[~allowed] = -np.inf
    w = np.exp(logits - logits.max(axis=1, keepdims=True))
    w /= w.sum(axis=1, keepdims=True)
    expected = (w @ v).reshape(2, 2, 4)
    assert float((out - torch.from_numpy(expected)).abs().max()) < 1e-12


def test_attention_causal_mask_blocks_future(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, dts, fidx, mask = random_inputs(rng, L=3, N=4)
    with torch.no_grad():
        ts1, rs1 = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
        # change the last frame entirely; frames 0 and 1 must not move
        trans2 = trans.clone()
        trans2[2] += 50.0
        quats2 = quats.clone()
        quats2[2] = torch.from_numpy(se3.random_rotation(rng, (4,)).quat)
        ts2, rs2 = denoiser_forward(model, quats2, trans2, taus, dts, fidx, mask)
    assert float((ts1[:2] - ts2[:2]).abs().max()) < 1e-12
    assert float((rs1[:2] - rs2[:2]).abs().max()) < 1e-12


def test_attention_rejects_fully_masked_row(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, dts, fidx, _ = random_inputs(rng, L=2, N=3)
    bad = torch.tensor([[True, False], [False, False]])
    with pytest.raises(ValueError, match="fully masked"):
        denoiser_forward(model, quats, trans, taus, dts, fidx, bad)


# -- adaln -----------------------------------------------------------------------


def test_adaln_zero_weights_is_plain_layernorm(rng):
    ada = AdaLN(16, 8).double()
    with torch.no_grad():
        ada.producer.weight.zero_()
        ada.producer.bias.zero_()
    x = torch.from_numpy(rng.normal(size=(2, 5, 16)))
    cond = torch.from_numpy(rng.normal(size=(2, 8)))
    out, gate = ada(x, cond)
    ln = torch.nn.LayerNorm(16, elementwise_affine=False, eps=1e-12).double()
    assert float((out - ln(x)).abs().max()) < 1e-14
    assert float((gate - 1.0).abs().max()) == 0.0


def test_adaln_normalization_moments(rng):
    ada = AdaLN(32, 8).double()
    x = torch.from_numpy(rng.normal(2.0, 3.0, size=(4, 6, 32)))
    normed = ada.norm(x)
    mean = normed.mean(dim=-1)
    var = normed.var(dim=-1, unbiased=False)
    assert float(mean.abs().max()) < 1e-6
    assert float((var - 1).abs().max()) < 1e-6


def test_adaln_dt_sensitivity(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, _, fidx, mask = random_inputs(rng, L=2, N=4)
    with torch.no_grad():
        t1, _ = denoiser_forward(model, quats, trans, taus, torch.full((2,), 0.01, dtype=torch.float64), fidx, mask)
        t2, _ = denoiser_forward(model, quats, trans, taus, torch.full((2,), 5.0, dtype=torch.float64), fidx, mask)
    assert float((t1 - t2).abs().max()) > 0.0


# -- edge transition ---------------------------------------------------------------


def test_edge_transition_zero_weights_identity(rng):
    model, cfg = small_model(rng)
    et = model.edge_transitions[0]
    with torch.no_grad():
        for m in et.mlp:
            if hasattr(m, "weight"):
                m.weight.zero_()
                m.bias.zero_()
    s = torch.from_numpy(rng.normal(size=(2, 4, cfg.model_dim)))
    z = torch.from_numpy(rng.normal(size=(2, 4, 4, cfg.pair_dim)))
    assert torch.equal(et(s, z), z)


def test_edge_transition_preserves_symmetry(rng):
    model, cfg = small_model(rng)
    et = model.edge_transitions[0]
    s = torch.from_numpy(rng.normal(size=(1, 1, cfg.model_dim))).expand(1, 5, cfg.model_dim)
    z_half = torch.from_numpy(rng.normal(size=(1, 5, 5, cfg.pair_dim)))
    z = 0.5 * (z_half + z_half.transpose(1, 2))
    out = et(s, z)
    assert float((out - out.transpose(1, 2)).abs().max()) < 1e-12


def test_edge_transition_finite_on_random_inputs(rng):
    model, cfg = small_model(rng)
    et = model.edge_transitions[0]
    for _ in range(1000):
        s = torch.from_numpy(rng.normal(size=(1, 3, cfg.model_dim)))
        z = torch.from_numpy(rng.normal(size=(1, 3, 3, cfg.pair_dim)))
        assert bool(torch.isfinite(et(s, z)).all())


# -- backbone head ------------------------------------------------------------------


def test_head_zero_weights_zero_scores(rng):
    model, cfg = small_model(rng)
    with torch.no_grad():
        for m in model.head:
            if hasattr(m, "weight"):
                m.weight.zero_()
                m.bias.zero_()
    quats, trans, taus, dts, fidx, mask = random_inputs(rng)
    with torch.no_grad():
        ts, rs = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
    assert float(ts.abs().max()) == 0.0 and float(rs.abs().max()) == 0.0


def test_head_gain_matches_schedule(rng):
    sch = NoiseSchedule()
    model, cfg = small_model(rng)
    taus = torch.tensor([0.05, 0.4, 1.0], dtype=torch.float64)
    h = torch.from_numpy(rng.normal(size=(3, 2, cfg.model_dim)))
    quats = torch.from_numpy(se3.random_rotation(rng, (3, 2)).quat)
    with torch.no_grad():
        ts, rs = model.head_scores(h, quats, taus)
        raw = model.head(h)
    for i, tau in enumerate(taus.numpy()):
        gain_t = 1.0 / np.sqrt(1.0 - sch.alpha_bar(tau))
        gain_r = 1.0 / sch.sigma_of_tau(tau)
        rot = quat_to_matrix_t(quats[i])
        expected_t = torch.einsum("nab,nb->na", rot, raw[i, :, :3]) * gain_t
        assert float((ts[i] - expected_t).abs().max()) < 1e-10
        assert float((rs[i] - raw[i, :, 3:] * gain_r).abs().max()) < 1e-10


def test_forward_l1_reduces_to_unconditional(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, dts, fidx, _ = random_inputs(rng, L=1, N=4)
    mask = torch.ones(1, 1, dtype=torch.bool)
    with torch.no_grad():
        t1, r1 = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
        t2, r2 = denoiser_forward(model, quats, trans, taus, dts, fidx, None)
    assert torch.equal(t1, t2) and torch.equal(r1, r2)


def test_forward_history_permutation_sensitivity(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, dts, fidx, mask = random_inputs(rng, L=3, N=4)
    with torch.no_grad():
        t1, _ = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
        perm = torch.tensor([1, 0, 2])
        t2, _ = denoiser_forward(model, quats[perm], trans[perm], taus, dts, fidx, mask)
    assert float((t1[2] - t2[2]).abs().max()) > 1e-8


def test_forward_bitwise_determinism(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, dts, fidx, mask = random_inputs(rng, L=2, N=5)
    with torch.no_grad():
        a = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
        b = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
    assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])


# -- gradients -----------------------------------------------------------------------


def test_zero_upstream_gradient_gives_zero_grads(rng):
    model, cfg = small_model(rng)
    quats, trans, taus, dts, fidx, mask = random_inputs(rng)
    ts, rs = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
    loss = (ts * 0.0).sum() + (rs * 0.0).sum()
    model.zero_grad()
    loss.backward()
    for p in model.parameters():
        if p.grad is not None:
            assert float(p.grad.abs().max()) == 0.0


def test_disconnected_pair_bias_gets_zero_grad(rng):
    model, cfg = small_model(rng, use_pair_bias=False)
    quats, trans, taus, dts, fidx, mask = random_inputs(rng)
    ts, rs = denoiser_forward(model, quats, trans, taus, dts, fidx, mask)
    loss = (ts**2).sum() + (rs**2).sum()
    model.zero_grad()
    loss.backward()
    for li, layer in enumerate(model.layers):
        g = layer.bias_proj.weight.grad
        assert g is None or float(g.abs().max()) == 0.0


# -- kv cache accounting ----------------------------------------------------------------


def test_kv_cache_entry_count_and_bytes(rng):
    model, cfg = small_model(rng)
    cache = KVCache(cfg.n_layers)
    N = 4
    for f in range(3):
        keys = [torch.zeros(1, N, cfg.model_dim) for _ in range(cfg.n_layers)]
        values = [torch.zeros(1, N, cfg.model_dim) for _ in range(cfg.n_layers)]
        cache.append_frame(keys, values, f, 0.0)
    assert cache.entry_count(N) == cfg.n_layers * 3 * N
    assert cache.logical_bytes(N, cfg.model_dim, 4) == cfg.n_layers * 3 * N * cfg.model_dim * 4
