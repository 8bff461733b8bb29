"""Model-level contracts: masks, heads, recurrent updates, filtering,
rollout, ablation switches, and the straight-line numpy oracle for one
filter step."""

import math
from dataclasses import replace

import numpy as np
import pytest
import torch

from ihvrnn import model as M
from ihvrnn import nn
from ihvrnn.errors import ContractError
from ihvrnn.model import ModelConfig, StepGroups, StepNoise

torch.set_num_threads(1)

LN2 = math.log(2.0)


def t(a, dtype=torch.float64):
    return torch.as_tensor(np.asarray(a), dtype=dtype)


def small_config(**kw):
    base = dict(variant="ihvrnn", d_z=3, d_s=3, d_h=6, n_groups_max=2, K=2,
                d_m=2.0, team_sports_mode=False)
    base.update(kw)
    return ModelConfig(**base)


def random_state(config, n, n_groups, membership, active, rng, with_x=True):
    lead = ()
    st = M.ModelState(
        h_z=t(rng.standard_normal((*lead, n, config.d_h))),
        h_s=t(rng.standard_normal((*lead, n_groups, config.d_h))),
        h_m=t(rng.standard_normal((*lead, n, config.d_h))),
        s=t(rng.standard_normal((*lead, n_groups, config.d_s))),
        z=t(rng.standard_normal((*lead, n, config.d_z))),
        group_of=torch.as_tensor(membership, dtype=torch.long),
        active=torch.as_tensor(active, dtype=torch.bool),
        x_last=t(rng.standard_normal((n, 2))) if with_x else None,
    )
    return st


# ---------------------------------------------------------------------------
# init_state

def test_init_state_shapes_and_zeros():
    cfg = small_config()
    groups = StepGroups(membership=torch.tensor([0, 1, 0, 1]),
                        active=torch.tensor([True, True]))
    st = M.init_state(cfg, 4, groups)
    assert st.h_z.shape == (4, cfg.d_h) and torch.all(st.h_z == 0)
    assert st.h_s.shape == (2, cfg.d_h)
    assert st.s.shape == (2, cfg.d_s) and st.z.shape == (4, cfg.d_z)
    assert st.x_last is None


def test_init_state_inactive_group_allocated():
    cfg = small_config(n_groups_max=3)
    groups = StepGroups(membership=torch.tensor([0, 0]),
                        active=torch.tensor([True, False, False]))
    st = M.init_state(cfg, 2, groups)
    assert st.h_s.shape == (3, cfg.d_h)
    assert not bool(st.active[1]) and not bool(st.active[2])


# ---------------------------------------------------------------------------
# social masks

def test_masks_two_agents_near():
    cfg = small_config(K=3)
    masks = M.social_masks(t([[0.0, 0.0], [1.5, 0.0]]), cfg)
    assert masks[0][0, 1] == 1.0


def test_masks_two_agents_mid():
    cfg = small_config(K=3)
    masks = M.social_masks(t([[0.0, 0.0], [3.5, 0.0]]), cfg)
    assert masks[0][0, 1] == 0.0
    assert masks[1][0, 1] == 1.0
    assert torch.all(masks[2] == 1.0)


def test_masks_team_sports_all_ones():
    cfg = small_config(K=3, team_sports_mode=True)
    rng = np.random.default_rng(0)
    masks = M.social_masks(t(rng.uniform(0, 100, (5, 2))), cfg)
    assert len(masks) == 3
    for m in masks:
        assert torch.all(m == 1.0)


def test_masks_properties_random():
    cfg = small_config(K=4)
    rng = np.random.default_rng(1)
    for _ in range(100):
        n = int(rng.integers(2, 8))
        masks = M.social_masks(t(rng.uniform(-10, 10, (n, 2))), cfg)
        assert len(masks) == 4
        prev = None
        for m in masks:
            assert torch.equal(m, m.T)
            assert torch.all(torch.diagonal(m) == 1.0)
            if prev is not None:
                assert torch.all(prev <= m)
            prev = m
        assert torch.all(masks[-1] == 1.0)


def test_masks_pos_scale_converts_units():
    cfg = small_config(K=2)
    pos = t([[0.0, 0.0], [0.35, 0.0]])      # normalized units, scale 10 -> 3.5 m
    masks = M.social_masks(pos, cfg, pos_scale=10.0)
    assert masks[0][0, 1] == 0.0


# ---------------------------------------------------------------------------
# refinement

def test_refine_single_scope_equals_gat_plus_projection():
    cfg = small_config(K=1, team_sports_mode=True)
    rng = np.random.default_rng(2)
    params = M.init_params(cfg, rng)
    h_z = t(rng.standard_normal((4, cfg.d_h)))
    pos = t(rng.uniform(0, 5, (4, 2)))
    got = M.refine_social(h_z, pos, cfg, params)
    ones = torch.ones(4, 4, dtype=torch.float64)
    expected = nn.affine(params, "social_proj", nn.gat_layer(params, "gat.k0", h_z, ones))
    assert torch.equal(got, expected)


def test_refine_identical_rows_identical_outputs():
    cfg = small_config(K=2, team_sports_mode=True)
    rng = np.random.default_rng(3)
    params = M.init_params(cfg, rng)
    h_z = t(np.tile(rng.standard_normal(cfg.d_h), (5, 1)))
    out = M.refine_social(h_z, torch.zeros(5, 2, dtype=torch.float64), cfg, params)
    for i in range(1, 5):
        assert torch.equal(out[i], out[0])


def test_refine_gat_ablation_exact_zeros():
    cfg = small_config(use_gat=False)
    params = M.init_params(cfg, np.random.default_rng(0))
    h_z = t(np.random.default_rng(1).standard_normal((3, cfg.d_h)))
    out = M.refine_social(h_z, torch.zeros(3, 2, dtype=torch.float64), cfg, params)
    assert torch.all(out == 0.0)


# ---------------------------------------------------------------------------
# heads

def test_prior_group_zero_params_closed_form():
    cfg = small_config()
    params = M.zero_params(cfg)
    rng = np.random.default_rng(0)
    st = random_state(cfg, 2, 2, [0, 1], [True, True], rng)
    g = M.prior_group(st, 0, params, cfg)
    assert g.dim == cfg.d_s
    assert torch.all(g.mean == 0)
    np.testing.assert_allclose(g.scale.numpy(), LN2 + 1e-4, atol=1e-15)


def test_prior_group_identical_rows_identical_priors():
    cfg = small_config()
    rng = np.random.default_rng(4)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 2, 2, [0, 1], [True, True], rng)
    st.h_s[1] = st.h_s[0]
    g0 = M.prior_group(st, 0, params, cfg)
    g1 = M.prior_group(st, 1, params, cfg)
    assert torch.equal(g0.mean, g1.mean) and torch.equal(g0.scale, g1.scale)


def test_prior_group_inactive_contract():
    cfg = small_config()
    params = M.zero_params(cfg)
    st = random_state(cfg, 2, 2, [0, 0], [True, False], np.random.default_rng(0))
    with pytest.raises(ContractError):
        M.prior_group(st, 1, params, cfg)


def test_prior_indiv_dims_and_sharing():
    cfg = small_config()
    rng = np.random.default_rng(5)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 3, 2, [0, 0, 1], [True, True], rng)
    st.h_z[1] = st.h_z[0]
    s_t = t(rng.standard_normal(cfg.d_s))
    g0 = M.prior_indiv(st, 0, s_t, params, cfg)
    g1 = M.prior_indiv(st, 1, s_t, params, cfg)
    assert g0.dim == cfg.d_z
    assert torch.equal(g0.mean, g1.mean) and torch.equal(g0.scale, g1.scale)


def test_encode_group_single_member_and_zero_params():
    cfg = small_config()
    params = M.zero_params(cfg)
    rng = np.random.default_rng(6)
    st = random_state(cfg, 2, 2, [0, 1], [True, True], rng)
    q = M.encode_group(st, 0, t(rng.standard_normal((1, 2))),
                       t(rng.standard_normal((1, cfg.d_z))), params, cfg)
    assert q.dim == cfg.d_s
    assert torch.all(q.mean == 0)
    np.testing.assert_allclose(q.scale.numpy(), LN2 + 1e-4, atol=1e-15)


def test_encode_group_member_permutation_invariant():
    cfg = small_config()
    rng = np.random.default_rng(7)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 4, 2, [0, 0, 0, 1], [True, True], rng)
    x = t(rng.standard_normal((3, 2)))
    z = t(rng.standard_normal((3, cfg.d_z)))
    q = M.encode_group(st, 0, x, z, params, cfg)
    perm = [2, 0, 1]
    st_p = st.clone()
    st_p.h_z[[0, 1, 2]] = st.h_z[perm]
    q_p = M.encode_group(st_p, 0, x[perm], z[perm], params, cfg)
    assert torch.equal(q.mean, q_p.mean) and torch.equal(q.scale, q_p.scale)


def test_encode_indiv_equal_inputs_equal_posteriors():
    cfg = small_config()
    rng = np.random.default_rng(8)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 2, 2, [0, 1], [True, True], rng)
    st.h_z[1] = st.h_z[0]
    x = t(rng.standard_normal(2))
    q0 = M.encode_indiv(st, 0, x, params)
    q1 = M.encode_indiv(st, 1, x, params)
    assert q0.dim == cfg.d_z
    assert torch.equal(q0.mean, q1.mean) and torch.equal(q0.scale, q1.scale)


def test_decode_zero_params_stationary_and_swap():
    cfg = small_config()
    params = M.zero_params(cfg)
    rng = np.random.default_rng(9)
    st = random_state(cfg, 2, 2, [0, 1], [True, True], rng)
    z_i = t(rng.standard_normal(cfg.d_z))
    s_g = t(rng.standard_normal(cfg.d_s))
    d0 = M.decode_agent(st, 0, z_i, s_g, params)
    assert d0.dim == 2 and torch.all(d0.mean == 0)
    # shared weights: swapping the two agents' full inputs swaps outputs
    params_r = M.init_params(cfg, np.random.default_rng(10))
    da = M.decode_agent(st, 0, z_i, s_g, params_r)
    st_swapped = random_state(cfg, 2, 2, [1, 0], [True, True], np.random.default_rng(0))
    st_swapped.h_z = st.h_z[[1, 0]]
    st_swapped.h_m = st.h_m[[1, 0]]
    st_swapped.h_s = st.h_s.clone()
    db = M.decode_agent(st_swapped, 1, z_i, s_g, params_r)
    assert torch.equal(da.mean, db.mean) and torch.equal(da.scale, db.scale)


# ---------------------------------------------------------------------------
# update_hidden

def test_update_pool_other_single_active_is_zero():
    s = t(np.random.default_rng(0).standard_normal((2, 3)))
    active = torch.tensor([True, False])
    pooled = M._pool_other(s, active)
    assert torch.all(pooled[0] == 0.0)


def test_update_inactive_rows_frozen_bitwise():
    cfg = small_config(n_groups_max=3)
    rng = np.random.default_rng(11)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 3, 3, [0, 0, 1], [True, True, False], rng)
    before = st.h_s[2].clone()
    _, h_s_new = M.update_hidden(st, t(rng.standard_normal((3, 2))),
                                 st.s, st.z, params, cfg)
    assert torch.equal(h_s_new[2], before)
    assert not torch.equal(h_s_new[0], st.h_s[0])


def test_update_hvrnn_ignores_other_groups_consensus():
    cfg = small_config(variant="hvrnn")
    rng = np.random.default_rng(12)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 4, 2, [0, 0, 1, 1], [True, True], rng)
    x = t(rng.standard_normal((4, 2)))
    h_z1, h_s1 = M.update_hidden(st, x, st.s, st.z, params, cfg)
    s_perturbed = st.s.clone()
    s_perturbed[1] += 100.0
    h_z2, h_s2 = M.update_hidden(st, x, s_perturbed, st.z, params, cfg)
    assert torch.equal(h_z1[:2], h_z2[:2])      # group-0 agents unaffected
    assert torch.equal(h_s1[0], h_s2[0])        # group 0 unaffected


def test_update_ihvrnn_sees_other_groups_consensus():
    cfg = small_config(variant="ihvrnn")
    rng = np.random.default_rng(13)
    params = M.init_params(cfg, rng)
    st = random_state(cfg, 4, 2, [0, 0, 1, 1], [True, True], rng)
    x = t(rng.standard_normal((4, 2)))
    _, h_s1 = M.update_hidden(st, x, st.s, st.z, params, cfg)
    s_perturbed = st.s.clone()
    s_perturbed[1] += 1.0
    _, h_s2 = M.update_hidden(st, x, s_perturbed, st.z, params, cfg)
    assert not torch.equal(h_s1[0], h_s2[0])


# ---------------------------------------------------------------------------
# filter_step

def _fixture_step_inputs(cfg, rng, n=2, membership=(0, 1), active=(True, True)):
    st = random_state(cfg, n, len(active), list(membership), list(active), rng)
    x = t(rng.standard_normal((n, 2)))
    groups = StepGroups(membership=torch.as_tensor(membership, dtype=torch.long),
                        active=torch.as_tensor(active, dtype=torch.bool))
    noise = StepNoise(s=t(rng.standard_normal((len(active), cfg.d_s))),
                      z=t(rng.standard_normal((n, cfg.d_z))))
    return st, x, groups, noise


def test_filter_zero_params_zero_kl():
    cfg = small_config()
    params = M.zero_params(cfg)
    rng = np.random.default_rng(14)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    _, stats = M.filter_step(st, x, groups, params, cfg, noise)
    assert float(stats.kl_s_sum) == 0.0
    assert float(stats.kl_z_sum) == 0.0


def test_filter_vrnn_kl_s_zero_and_consensus_frozen():
    cfg = small_config(variant="vrnn")
    rng = np.random.default_rng(15)
    params = M.init_params(cfg, rng)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    st2, stats = M.filter_step(st, x, groups, params, cfg, noise)
    assert float(stats.kl_s_sum) == 0.0 and stats.n_active_terms == 0
    assert torch.equal(st2.s, st.s) and torch.equal(st2.h_s, st.h_s)


def test_filter_does_not_mutate_input_state():
    cfg = small_config()
    rng = np.random.default_rng(16)
    params = M.init_params(cfg, rng)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    snap = st.clone()
    M.filter_step(st, x, groups, params, cfg, noise)
    for name in ("h_z", "h_s", "h_m", "s", "z"):
        assert torch.equal(getattr(st, name), getattr(snap, name))


def test_filter_inactive_group_rows_frozen():
    cfg = small_config(n_groups_max=3)
    rng = np.random.default_rng(17)
    params = M.init_params(cfg, rng)
    st, x, groups, noise = _fixture_step_inputs(
        cfg, rng, n=3, membership=(0, 0, 1), active=(True, True, False))
    st2, _ = M.filter_step(st, x, groups, params, cfg, noise)
    assert torch.equal(st2.h_s[2], st.h_s[2])
    assert torch.equal(st2.s[2], st.s[2])


def _np_affine(p, prefix, x):
    return p[f"{prefix}.W"] @ x + p[f"{prefix}.b"]


def _np_mlp(p, prefix, x):
    return _np_affine(p, f"{prefix}.l1", np.tanh(_np_affine(p, f"{prefix}.l0", x)))


def _np_head(p, prefix, f):
    mean = _np_affine(p, f"{prefix}.mean", f)
    scale = np.log1p(np.exp(_np_affine(p, f"{prefix}.scale", f))) + 1e-4
    return mean, scale


def _np_gru(p, prefix, x, h):
    d = len(h)
    gx = p[f"{prefix}.W"] @ x + p[f"{prefix}.b"]
    gh = p[f"{prefix}.U"] @ h
    sig = lambda v: 1.0 / (1.0 + np.exp(-v))
    r = sig(gx[:d] + gh[:d])
    u = sig(gx[d:2 * d] + gh[d:2 * d])
    c = np.tanh(gx[2 * d:] + r * gh[2 * d:])
    return (1 - u) * h + u * c


def _np_kl(qm, qs, pm, ps):
    return float((np.log(ps / qs) + (qs ** 2 + (qm - pm) ** 2) / (2 * ps ** 2) - 0.5).sum())


def _np_nll(x, m, s):
    return float((0.5 * np.log(2 * np.pi) + np.log(s) + (x - m) ** 2 / (2 * s ** 2)).sum())


def test_filter_step_matches_numpy_oracle():
    """Straight-line scalar recomputation of one full filter step."""
    cfg = small_config(K=1)              # single all-ones attention scope
    rng = np.random.default_rng(18)
    params = M.init_params(cfg, rng)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    st2, stats = M.filter_step(st, x, groups, params, cfg, noise)

    p = {k: v.detach().numpy() for k, v in params.items()}
    h_z = st.h_z.numpy()
    h_s = st.h_s.numpy()
    h_m = st.h_m.numpy()
    s_prev = st.s.numpy()
    z_prev = st.z.numpy()
    x_np = x.numpy()
    x_prev = st.x_last.numpy()
    ns = noise.s.numpy()
    nz = noise.z.numpy()
    group_of = [0, 1]

    s_new = np.zeros_like(s_prev)
    kl_s = 0.0
    for g in (0, 1):
        members = [i for i in range(2) if group_of[i] == g]
        feats = np.concatenate([
            np.mean([np.concatenate([x_np[i], z_prev[i], h_z[i]]) for i in members], axis=0),
            h_s[g]])
        qm, qs = _np_head(p, "group_enc.head", _np_mlp(p, "group_enc.mlp", feats))
        pm, ps = _np_head(p, "group_prior.head", _np_mlp(p, "group_prior.mlp", h_s[g]))
        s_new[g] = qm + qs * ns[g]
        kl_s += _np_kl(qm, qs, pm, ps)

    kl_z = 0.0
    recon = 0.0
    z_new = np.zeros_like(z_prev)
    h_z_new = np.zeros_like(h_z)
    for i in (0, 1):
        g = group_of[i]
        qm, qs = _np_head(p, "indiv_enc.head",
                          _np_mlp(p, "indiv_enc.mlp", np.concatenate([x_np[i], h_z[i]])))
        pm, ps = _np_head(p, "indiv_prior.head",
                          _np_mlp(p, "indiv_prior.mlp",
                                  np.concatenate([h_z[i], h_s[g], s_new[g]])))
        z_new[i] = qm + qs * nz[i]
        kl_z += _np_kl(qm, qs, pm, ps)
        dm, ds = _np_head(p, "decoder.head",
                          _np_mlp(p, "decoder.mlp",
                                  np.concatenate([z_new[i], s_new[g], h_z[i], h_s[g], h_m[i]])))
        recon += _np_nll(x_np[i] - x_prev[i], dm, ds)
        h_z_new[i] = _np_gru(p, "agent_rnn",
                             np.concatenate([x_np[i], z_new[i], s_new[g], h_s[g]]), h_z[i])

    h_s_new = np.zeros_like(h_s)
    for g in (0, 1):
        members = [i for i in range(2) if group_of[i] == g]
        pooled = np.mean([x_np[i] for i in members], axis=0)
        other = np.mean([s_new[o] for o in (0, 1) if o != g], axis=0)
        h_s_new[g] = _np_gru(p, "group_rnn",
                             np.concatenate([pooled, s_new[g], other]), h_s[g])

    # social refinement: single all-ones scope over the fresh agent hiddens
    W = p["gat.k0.W"]
    a = p["gat.k0.a"]
    v = h_z_new @ W.T
    src, dst = v @ a[:cfg.d_h], v @ a[cfg.d_h:]
    e = src[:, None] + dst[None, :]
    e = np.where(e > 0, e, 0.2 * e)
    alpha = np.exp(e - e.max(axis=1, keepdims=True))
    alpha /= alpha.sum(axis=1, keepdims=True)
    gat_out = np.tanh(alpha @ v)
    h_m_new = gat_out @ p["social_proj.W"].T + p["social_proj.b"]

    assert abs(float(stats.kl_s_sum) - kl_s) < 1e-10
    assert abs(float(stats.kl_z_sum) - kl_z) < 1e-10
    assert abs(float(stats.recon_nll_sum) - recon) < 1e-10
    np.testing.assert_allclose(st2.s.numpy(), s_new, atol=1e-10)
    np.testing.assert_allclose(st2.z.numpy(), z_new, atol=1e-10)
    np.testing.assert_allclose(st2.h_z.numpy(), h_z_new, atol=1e-10)
    np.testing.assert_allclose(st2.h_s.numpy(), h_s_new, atol=1e-10)
    np.testing.assert_allclose(st2.h_m.numpy(), h_m_new, atol=1e-10)


# ---------------------------------------------------------------------------
# rollout

def test_rollout_zero_params_stationary():
    cfg = small_config()
    params = M.zero_params(cfg)
    rng = np.random.default_rng(19)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    st2, _ = M.filter_step(st, x, groups, params, cfg, noise)
    pred = M.rollout(st2, x, 4, params, cfg)
    for j in range(4):
        assert torch.equal(pred[:, j, :], x)


def test_rollout_deterministic_and_pure():
    cfg = small_config()
    rng = np.random.default_rng(20)
    params = M.init_params(cfg, rng)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    st2, _ = M.filter_step(st, x, groups, params, cfg, noise)
    snap = st2.clone()
    p1 = M.rollout(st2, x, 5, params, cfg)
    p2 = M.rollout(st2, x, 5, params, cfg)
    assert torch.equal(p1, p2)
    p3 = M.rollout(snap, x, 5, params, cfg)
    assert torch.equal(p1, p3)
    for name in ("h_z", "h_s", "h_m", "s", "z"):
        assert torch.equal(getattr(st2, name), getattr(snap, name))


# ---------------------------------------------------------------------------
# variant nesting / permutation equivariance (bitwise)

def _run_sequence(cfg, params, st, xs, groups, noises, t_pre):
    stats_list = []
    for step in range(xs.shape[1]):
        st, stats = M.filter_step(st, xs[:, step], groups, params, cfg, noises[step])
        stats_list.append(stats)
    pred = M.rollout(st, xs[:, -1], t_pre, params, cfg)
    return stats_list, pred


def test_variant_nesting_bitwise():
    for trial in range(10):
        rng = np.random.default_rng(100 + trial)
        cfg_i = small_config(variant="ihvrnn", team_sports_mode=True, K=2)
        cfg_v = replace(cfg_i, variant="vrnn")
        params = M.init_params(cfg_i, rng)
        M.zero_consensus_paths(params, cfg_i)
        n, T = 3, 4
        membership = torch.tensor([0, 1, 0])
        active = torch.tensor([True, True])
        groups = StepGroups(membership, active)
        xs = t(rng.standard_normal((n, T, 2)))
        noises = [StepNoise(s=t(rng.standard_normal((2, cfg_i.d_s))),
                            z=t(rng.standard_normal((n, cfg_i.d_z)))) for _ in range(T)]
        st_i = M.init_state(cfg_i, n, groups)
        st_v = M.init_state(cfg_v, n, groups)
        stats_i, pred_i = _run_sequence(cfg_i, params, st_i, xs, groups, noises, 5)
        stats_v, pred_v = _run_sequence(cfg_v, params, st_v, xs, groups, noises, 5)
        assert torch.equal(pred_i, pred_v)
        for a, b in zip(stats_i, stats_v):
            assert float(a.recon_nll_sum) == float(b.recon_nll_sum)
            assert float(a.kl_z_sum) == float(b.kl_z_sum)


def test_permutation_equivariance_bitwise():
    for trial in range(10):
        rng = np.random.default_rng(200 + trial)
        cfg = small_config(K=2)
        params = M.init_params(cfg, rng)
        n, T = 5, 3
        membership = torch.as_tensor(rng.integers(0, 2, n), dtype=torch.long)
        active = torch.tensor([True, True])
        groups = StepGroups(membership, active)
        xs = t(rng.standard_normal((n, T, 2)))
        noises = [StepNoise(s=t(rng.standard_normal((2, cfg.d_s))),
                            z=t(rng.standard_normal((n, cfg.d_z)))) for _ in range(T)]
        st = M.init_state(cfg, n, groups)
        _, pred = _run_sequence(cfg, params, st, xs, groups, noises, 4)

        perm = torch.as_tensor(rng.permutation(n), dtype=torch.long)
        groups_p = StepGroups(membership[perm], active)
        xs_p = xs[perm]
        noises_p = [StepNoise(s=nse.s, z=nse.z[perm]) for nse in noises]
        st_p = M.init_state(cfg, n, groups_p)
        _, pred_p = _run_sequence(cfg, params, st_p, xs_p, groups_p, noises_p, 4)
        assert torch.equal(pred_p, pred[perm])


# ---------------------------------------------------------------------------
# gradients through a full step

def test_grad_check_one_step_loss():
    cfg = ModelConfig(variant="ihvrnn", d_z=4, d_s=4, d_h=8, n_groups_max=2,
                      K=2, team_sports_mode=True)
    rng = np.random.default_rng(21)
    params = M.init_params(cfg, rng)
    st, x, groups, noise = _fixture_step_inputs(cfg, rng)
    gt = t(rng.standard_normal((2, 1, 2)))

    def loss():
        st2, stats = M.filter_step(st, x, groups, params, cfg, noise)
        pred = M.rollout(st2, x, 1, params, cfg)
        return (stats.recon_nll_sum + stats.kl_s_sum + stats.kl_z_sum
                + ((pred - gt) ** 2).sum())

    err = nn.grad_check(loss, params, eps=1e-5, sample_frac=0.05,
                        rng=np.random.default_rng(0))
    assert err < 1e-4
