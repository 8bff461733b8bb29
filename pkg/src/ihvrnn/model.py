"""The two-level latent trajectory model and its ablation variants.

Per timestep the model maintains per-agent hidden states (one recurrent
cell shared by all agents), per-group consensus hidden states, a consensus
latent per group and a behavior latent per agent, plus a social summary
per agent produced by distance-scoped graph attention.

Variants:

* ``vrnn``   — no consensus: every group-level path is a zero vector;
* ``hvrnn``  — per-group consensus, but the cross-group input is zeroed;
* ``ihvrnn`` — full model, each group's consensus update sees the other
  active groups' consensuses.

All functions are pure: given (params, state, inputs, explicit noise) they
return new values and never mutate their arguments.  Tensors accept an
optional leading batch dimension; documented shapes are the unbatched
ones.  Cross-agent pooling uses value-sorted summation so agent
permutations permute outputs bitwise.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
import torch

from . import nn
from .errors import ConfigError, ContractError, NumericError
from .nn import GaussianParams, ParamTree, sorted_sum

VARIANTS = ("vrnn", "hvrnn", "ihvrnn")


@dataclass
class ModelConfig:
    variant: str = "ihvrnn"
    d_x: int = 2
    d_z: int = 16
    d_s: int = 16
    d_h: int = 64
    n_groups_max: int = 2
    K: int = 3                   # mask scope count
    d_m: float = 2.0             # attention-gap distance threshold (m)
    team_sports_mode: bool = False
    use_rm: bool = True          # scope-changing social masks
    use_gat: bool = True         # graph-attention social summary
    mlp_hidden: int = 0          # 0 -> d_h

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.variant not in VARIANTS:
            raise ConfigError(f"model.variant: {self.variant!r} not one of {VARIANTS}")
        if self.d_x != 2:
            raise ConfigError("model.d_x: only 2-D positions are supported")
        for name in ("d_z", "d_s", "d_h", "n_groups_max", "K"):
            if getattr(self, name) < 1:
                raise ConfigError(f"model.{name}: must be >= 1")
        if self.d_m <= 0:
            raise ConfigError("model.d_m: must be > 0")

    @property
    def hidden(self) -> int:
        return self.mlp_hidden if self.mlp_hidden > 0 else self.d_h

    @property
    def n_scopes(self) -> int:
        """Number of attention scopes actually run."""
        if not self.use_gat:
            return 0
        return self.K if self.use_rm else 1

    def to_dict(self) -> dict:
        return {
            "variant": self.variant, "d_x": self.d_x, "d_z": self.d_z, "d_s": self.d_s,
            "d_h": self.d_h, "n_groups_max": self.n_groups_max, "K": self.K,
            "d_m": self.d_m, "team_sports_mode": self.team_sports_mode,
            "use_rm": self.use_rm, "use_gat": self.use_gat, "mlp_hidden": self.mlp_hidden,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class ModelState:
    """All recurrent quantities carried across timesteps.

    Inactive groups' h_s, s rows are frozen: filter steps copy them through
    untouched.
    """

    h_z: torch.Tensor            # [..., n, d_h]
    h_s: torch.Tensor            # [..., N_g, d_h]
    h_m: torch.Tensor            # [..., n, d_h]
    s: torch.Tensor              # [..., N_g, d_s]
    z: torch.Tensor              # [..., n, d_z]
    group_of: torch.Tensor       # [..., n] long
    active: torch.Tensor         # [..., N_g] bool
    x_last: torch.Tensor | None = None   # [..., n, 2]

    @property
    def n_agents(self) -> int:
        return self.h_z.shape[-2]

    @property
    def n_groups(self) -> int:
        return self.h_s.shape[-2]

    def clone(self) -> "ModelState":
        return ModelState(
            h_z=self.h_z.clone(), h_s=self.h_s.clone(), h_m=self.h_m.clone(),
            s=self.s.clone(), z=self.z.clone(),
            group_of=self.group_of.clone(), active=self.active.clone(),
            x_last=None if self.x_last is None else self.x_last.clone(),
        )


@dataclass
class StepGroups:
    """Group structure at one timestep."""

    membership: torch.Tensor     # [..., n] long
    active: torch.Tensor         # [..., N_g] bool


@dataclass
class StepNoise:
    """Reparameterization noise for one filter step; None means use means."""

    s: torch.Tensor | None       # [..., N_g, d_s]
    z: torch.Tensor | None       # [..., n, d_z]


@dataclass
class StepStats:
    """Per-step loss ingredients, summed over agents/groups (and batch)."""

    recon_nll_sum: torch.Tensor
    kl_s_sum: torch.Tensor
    kl_z_sum: torch.Tensor
    n_agent_terms: int
    n_active_terms: int


# ---------------------------------------------------------------------------
# parameters

def init_params(config: ModelConfig, rng: np.random.Generator) -> ParamTree:
    """Build all learnable weights; draw order is fixed by construction."""
    d_x, d_z, d_s, d_h, H = config.d_x, config.d_z, config.d_s, config.d_h, config.hidden
    tree = ParamTree()
    nn.gru_init(tree, "agent_rnn", d_x + d_z + d_s + d_h, d_h, rng)
    nn.gru_init(tree, "group_rnn", d_x + 2 * d_s, d_h, rng)
    nn.mlp_init(tree, "group_prior.mlp", [d_h, H, H], rng)
    nn.head_init(tree, "group_prior.head", H, d_s, rng)
    nn.mlp_init(tree, "indiv_prior.mlp", [2 * d_h + d_s, H, H], rng)
    nn.head_init(tree, "indiv_prior.head", H, d_z, rng)
    nn.mlp_init(tree, "group_enc.mlp", [d_x + d_z + 2 * d_h, H, H], rng)
    nn.head_init(tree, "group_enc.head", H, d_s, rng)
    nn.mlp_init(tree, "indiv_enc.mlp", [d_x + d_h, H, H], rng)
    nn.head_init(tree, "indiv_enc.head", H, d_z, rng)
    nn.mlp_init(tree, "decoder.mlp", [d_z + d_s + 3 * d_h, H, H], rng)
    nn.head_init(tree, "decoder.head", H, d_x, rng)
    for k in range(config.n_scopes):
        nn.gat_init(tree, f"gat.k{k}", d_h, d_h, rng)
    if config.n_scopes:
        nn.affine_init(tree, "social_proj", config.n_scopes * d_h, d_h, rng)
    return tree


def zero_params(config: ModelConfig) -> ParamTree:
    """All-zero weights (used by contract tests and stationary baselines)."""
    tree = init_params(config, np.random.default_rng(0))
    with torch.no_grad():
        for _, t in tree.items():
            t.zero_()
    return tree


def zero_consensus_paths(params: ParamTree, config: ModelConfig) -> None:
    """Zero every weight column that consumes a consensus quantity.

    After this, the full-variant forward pass cannot depend on s or h_s
    values, which is what makes the hierarchy a strict superset of the
    consensus-free variant.
    """
    d_x, d_z, d_s, d_h = config.d_x, config.d_z, config.d_s, config.d_h
    with torch.no_grad():
        # agent_rnn input = cat(x, z, s_g, h_s_g)
        params["agent_rnn.W"][:, d_x + d_z:] = 0.0
        # indiv_prior input = cat(h_z, h_s_g, s_g)
        params["indiv_prior.mlp.l0.W"][:, d_h:] = 0.0
        # decoder input = cat(z, s_g, h_z, h_s_g, h_m)
        params["decoder.mlp.l0.W"][:, d_z:d_z + d_s] = 0.0
        params["decoder.mlp.l0.W"][:, d_z + d_s + d_h:d_z + d_s + 2 * d_h] = 0.0


# ---------------------------------------------------------------------------
# state

def init_state(config: ModelConfig, n_agents: int, groups: StepGroups) -> ModelState:
    """Zero-initialized state; allocates rows for inactive groups too."""
    n_groups = groups.active.shape[-1]
    lead = tuple(groups.membership.shape[:-1])
    kw = dict(dtype=nn.DTYPE)
    return ModelState(
        h_z=torch.zeros(*lead, n_agents, config.d_h, **kw),
        h_s=torch.zeros(*lead, n_groups, config.d_h, **kw),
        h_m=torch.zeros(*lead, n_agents, config.d_h, **kw),
        s=torch.zeros(*lead, n_groups, config.d_s, **kw),
        z=torch.zeros(*lead, n_agents, config.d_z, **kw),
        group_of=groups.membership.clone(),
        active=groups.active.clone(),
        x_last=None,
    )


# ---------------------------------------------------------------------------
# social masks and refinement

def social_masks(positions: torch.Tensor, config: ModelConfig,
                 pos_scale: float = 1.0) -> list[torch.Tensor]:
    """K nested 0/1 masks; scope k (1-based) admits pairs within k * d_m.

    The last scope is always the full all-ones mask, and team-sports mode
    forces every scope to all ones.  ``pos_scale`` converts the caller's
    position units back to meters before thresholding.
    """
    n = positions.shape[-2]
    lead = tuple(positions.shape[:-2])
    ones = torch.ones(*lead, n, n, dtype=positions.dtype)
    if config.team_sports_mode:
        return [ones.clone() for _ in range(config.K)]
    delta = positions.unsqueeze(-2) - positions.unsqueeze(-3)
    dist = torch.linalg.vector_norm(delta, dim=-1) * pos_scale       # [..., n, n]
    eye = nn.bool_eye(n)
    masks = []
    for k in range(1, config.K):
        m = (dist <= k * config.d_m).to(positions.dtype)
        m = torch.where(eye, torch.ones_like(m), m)
        masks.append(m)
    masks.append(ones)
    return masks


def refine_social(h_z: torch.Tensor, positions: torch.Tensor, config: ModelConfig,
                  params: ParamTree, pos_scale: float = 1.0) -> torch.Tensor:
    """Scoped graph attention over agent hiddens, merged by projection.

    With the GAT ablation switched off this returns exact zeros; without
    the scoped masks a single full mask is used.
    """
    if not config.use_gat:
        return torch.zeros_like(h_z)
    if config.use_rm:
        masks = social_masks(positions, config, pos_scale)
    else:
        n = positions.shape[-2]
        masks = [torch.ones(*positions.shape[:-2], n, n, dtype=h_z.dtype)]
    outs = [nn.gat_layer(params, f"gat.k{k}", h_z, mask) for k, mask in enumerate(masks)]
    return nn.affine(params, "social_proj", torch.cat(outs, dim=-1))


# ---------------------------------------------------------------------------
# heads (public per-row forms and internal all-rows forms)

def prior_group(state: ModelState, g: int, params: ParamTree,
                config: ModelConfig) -> GaussianParams:
    """Conditional prior over group g's consensus, from its hidden state."""
    if config.variant == "vrnn":
        raise ContractError("group prior is bypassed under the vrnn variant")
    if not bool(state.active.select(-1, g).all()):
        raise ContractError(f"group {g} is inactive; its prior is not defined")
    return nn.gaussian_head(params, "group_prior.head",
                            nn.mlp(params, "group_prior.mlp", state.h_s.select(-2, g)))


def _group_prior_all(h_s: torch.Tensor, params: ParamTree) -> GaussianParams:
    return nn.gaussian_head(params, "group_prior.head", nn.mlp(params, "group_prior.mlp", h_s))


def prior_indiv(state: ModelState, i: int, s_t: torch.Tensor, params: ParamTree,
                config: ModelConfig) -> GaussianParams:
    """Conditional prior over agent i's behavior latent given its group's
    fresh consensus draw."""
    g = int(state.group_of.reshape(-1, state.n_agents)[0, i])
    feats = torch.cat([state.h_z.select(-2, i), state.h_s.select(-2, g), s_t], dim=-1)
    return nn.gaussian_head(params, "indiv_prior.head", nn.mlp(params, "indiv_prior.mlp", feats))


def _indiv_prior_all(h_z: torch.Tensor, h_s_agent: torch.Tensor,
                     s_agent: torch.Tensor, params: ParamTree) -> GaussianParams:
    feats = torch.cat([h_z, h_s_agent, s_agent], dim=-1)
    return nn.gaussian_head(params, "indiv_prior.head", nn.mlp(params, "indiv_prior.mlp", feats))


def encode_group(state: ModelState, g: int, x_members: torch.Tensor,
                 z_prev_members: torch.Tensor, params: ParamTree,
                 config: ModelConfig) -> GaussianParams:
    """Posterior over group g's consensus from its members' observations.

    ``x_members`` / ``z_prev_members`` follow ascending agent index among
    the members of g.  Per-member features are mean-pooled, making the
    encoder permutation-invariant.
    """
    if config.variant == "vrnn":
        raise ContractError("group encoder is bypassed under the vrnn variant")
    member_idx = torch.nonzero(state.group_of == g, as_tuple=False).reshape(-1)
    if member_idx.numel() == 0:
        raise ContractError(f"group {g} has no members")
    h_z_members = state.h_z.index_select(-2, member_idx)
    feats = torch.cat([x_members, z_prev_members, h_z_members], dim=-1)
    pooled = sorted_sum(feats.transpose(-1, -2), dim=-1) / feats.shape[-2]
    inp = torch.cat([pooled, state.h_s.select(-2, g)], dim=-1)
    return nn.gaussian_head(params, "group_enc.head", nn.mlp(params, "group_enc.mlp", inp))


def _member_matrix(membership: torch.Tensor, n_groups: int, dtype) -> torch.Tensor:
    """One-hot membership as [..., N_g, n]."""
    return torch.nn.functional.one_hot(membership, n_groups).to(dtype).transpose(-1, -2)


def _masked_mean(feats: torch.Tensor, member: torch.Tensor) -> torch.Tensor:
    """Per-group mean of member rows; zero vector for empty groups.

    feats [..., n, F], member [..., N_g, n] -> [..., N_g, F].  The reduced
    axis is laid out last so the value-sorted sum stays cheap.
    """
    cont = member.unsqueeze(-2) * feats.transpose(-1, -2).unsqueeze(-3)  # [..., N_g, F, n]
    counts = member.sum(dim=-1, keepdim=True).clamp(min=1.0)
    return sorted_sum(cont, dim=-1) / counts


def _encode_group_all(x_t: torch.Tensor, z_prev: torch.Tensor, h_z: torch.Tensor,
                      h_s: torch.Tensor, member: torch.Tensor,
                      params: ParamTree) -> GaussianParams:
    feats = torch.cat([x_t, z_prev, h_z], dim=-1)                    # [..., n, F]
    pooled = _masked_mean(feats, member)                             # [..., N_g, F]
    inp = torch.cat([pooled, h_s], dim=-1)
    return nn.gaussian_head(params, "group_enc.head", nn.mlp(params, "group_enc.mlp", inp))


def encode_indiv(state: ModelState, i: int, x_t_i: torch.Tensor,
                 params: ParamTree) -> GaussianParams:
    """Posterior over agent i's behavior latent from its own observation."""
    feats = torch.cat([x_t_i, state.h_z.select(-2, i)], dim=-1)
    return nn.gaussian_head(params, "indiv_enc.head", nn.mlp(params, "indiv_enc.mlp", feats))


def _encode_indiv_all(x_t: torch.Tensor, h_z: torch.Tensor, params: ParamTree) -> GaussianParams:
    feats = torch.cat([x_t, h_z], dim=-1)
    return nn.gaussian_head(params, "indiv_enc.head", nn.mlp(params, "indiv_enc.mlp", feats))


def decode_agent(state: ModelState, i: int, z_i: torch.Tensor, s_g: torch.Tensor,
                 params: ParamTree) -> GaussianParams:
    """Displacement head for agent i; the decoder weights are shared."""
    g = int(state.group_of.reshape(-1, state.n_agents)[0, i])
    feats = torch.cat([z_i, s_g, state.h_z.select(-2, i), state.h_s.select(-2, g),
                       state.h_m.select(-2, i)], dim=-1)
    return nn.gaussian_head(params, "decoder.head", nn.mlp(params, "decoder.mlp", feats))


def _decode_all(z: torch.Tensor, s_agent: torch.Tensor, h_z: torch.Tensor,
                h_s_agent: torch.Tensor, h_m: torch.Tensor,
                params: ParamTree) -> GaussianParams:
    feats = torch.cat([z, s_agent, h_z, h_s_agent, h_m], dim=-1)
    return nn.gaussian_head(params, "decoder.head", nn.mlp(params, "decoder.mlp", feats))


# ---------------------------------------------------------------------------
# recurrent update

def _gather_by_group(values: torch.Tensor, group_of: torch.Tensor) -> torch.Tensor:
    """values [..., N_g, d] indexed per agent -> [..., n, d]."""
    idx = group_of.unsqueeze(-1).expand(*group_of.shape, values.shape[-1])
    return torch.gather(values, -2, idx)


def _pool_other(s: torch.Tensor, active: torch.Tensor) -> torch.Tensor:
    """Mean of the other active groups' consensuses, per group.

    Zero when no other group is active; group order is fixed so the
    reduction order never varies.
    """
    n_groups = s.shape[-2]
    act = active.to(s.dtype)                                         # [..., N_g]
    if n_groups == 2:
        other_active = active.flip(-1).unsqueeze(-1)
        return torch.where(other_active, s.flip(-2), torch.zeros_like(s))
    off_diag = 1.0 - torch.eye(n_groups, dtype=s.dtype)
    weights = act.unsqueeze(-2) * off_diag                           # [..., g, o]
    counts = weights.sum(dim=-1, keepdim=True)
    pooled = (weights @ s) / counts.clamp(min=1.0)
    return torch.where(counts > 0, pooled, torch.zeros_like(pooled))


def update_hidden(state: ModelState, x_t: torch.Tensor, s_all: torch.Tensor,
                  z_all: torch.Tensor, params: ParamTree, config: ModelConfig,
                  member: torch.Tensor | None = None) -> tuple[torch.Tensor, torch.Tensor]:
    """One recurrent update of (h_z, h_s); inactive groups stay frozen."""
    s_agent = _gather_by_group(s_all, state.group_of)
    h_s_agent = _gather_by_group(state.h_s, state.group_of)
    agent_in = torch.cat([x_t, z_all, s_agent, h_s_agent], dim=-1)
    h_z_new = nn.recurrent_step(params, "agent_rnn", agent_in, state.h_z)

    if config.variant == "vrnn":
        return h_z_new, state.h_s

    if member is None:
        member = _member_matrix(state.group_of, state.n_groups, x_t.dtype)
    pooled_x = _masked_mean(x_t, member)
    if config.variant == "ihvrnn":
        other = _pool_other(s_all, state.active)
    else:
        other = torch.zeros_like(s_all)
    group_in = torch.cat([pooled_x, s_all, other], dim=-1)
    updated = nn.recurrent_step(params, "group_rnn", group_in, state.h_s)
    h_s_new = torch.where(state.active.unsqueeze(-1), updated, state.h_s)
    return h_z_new, h_s_new


# ---------------------------------------------------------------------------
# one observed step, and free-running prediction

def _check_finite(t: torch.Tensor, stage: str) -> None:
    if not bool(torch.isfinite(t).all()):
        raise NumericError(f"non-finite value at stage {stage!r}")


def filter_step(state: ModelState, x_t: torch.Tensor, groups_t: StepGroups,
                params: ParamTree, config: ModelConfig,
                noise: StepNoise | None = None,
                pos_scale: float = 1.0) -> tuple[ModelState, StepStats]:
    """Assimilate one observed frame.

    Order: group posterior/prior and consensus draw; agent posterior/prior
    and behavior draw; decode the displacement from the previous position
    and score it; recurrent update; social refinement on the fresh agent
    hiddens (consumed at the next step).  With ``noise=None`` every
    sampling site uses the posterior mean.
    """
    membership, active = groups_t.membership, groups_t.active
    x_prev = state.x_last if state.x_last is not None else x_t
    state = replace(state, group_of=membership, active=active)
    zero = torch.zeros((), dtype=x_t.dtype)
    member = (None if config.variant == "vrnn"
              else _member_matrix(membership, state.n_groups, x_t.dtype))

    if config.variant != "vrnn":
        q1 = _encode_group_all(x_t, state.z, state.h_z, state.h_s, member, params)
        p1 = _group_prior_all(state.h_s, params)
        drawn = q1.mean if (noise is None or noise.s is None) else nn.sample_reparam(q1, noise.s)
        act = active.unsqueeze(-1)
        s_new = torch.where(act, drawn, state.s)
        kl_s_sum = (nn.kl_diag(q1, p1) * active.to(x_t.dtype)).sum()
        n_active_terms = int(active.sum())
    else:
        s_new = state.s
        kl_s_sum = zero
        n_active_terms = 0
    _check_finite(kl_s_sum, "group inference")

    q2 = _encode_indiv_all(x_t, state.h_z, params)
    s_agent = _gather_by_group(s_new, membership)
    h_s_agent = _gather_by_group(state.h_s, membership)
    p2 = _indiv_prior_all(state.h_z, h_s_agent, s_agent, params)
    z_new = q2.mean if (noise is None or noise.z is None) else nn.sample_reparam(q2, noise.z)
    kl_z_sum = nn.kl_diag(q2, p2).sum()
    _check_finite(kl_z_sum, "individual inference")

    dec = _decode_all(z_new, s_agent, state.h_z, h_s_agent, state.h_m, params)
    recon_nll_sum = nn.gaussian_nll(x_t - x_prev, dec).sum()
    _check_finite(recon_nll_sum, "decoding")

    h_z_new, h_s_new = update_hidden(state, x_t, s_new, z_new, params, config, member)
    h_m_new = refine_social(h_z_new, x_t, config, params, pos_scale)
    _check_finite(h_z_new, "recurrent update")

    new_state = ModelState(h_z=h_z_new, h_s=h_s_new, h_m=h_m_new, s=s_new, z=z_new,
                           group_of=membership, active=active, x_last=x_t)
    n_agent_terms = int(np.prod(x_t.shape[:-1]))
    stats = StepStats(recon_nll_sum=recon_nll_sum, kl_s_sum=kl_s_sum, kl_z_sum=kl_z_sum,
                      n_agent_terms=n_agent_terms, n_active_terms=n_active_terms)
    return new_state, stats


def rollout(state: ModelState, x_last: torch.Tensor, t_pre: int, params: ParamTree,
            config: ModelConfig, pos_scale: float = 1.0) -> torch.Tensor:
    """Free-running prediction using distribution means at every sampling
    site; group membership stays at its last observed assignment.

    Returns positions [..., n, t_pre, 2]; the input state is not mutated.
    """
    st = state
    x = x_last
    outs = []
    member = (None if config.variant == "vrnn"
              else _member_matrix(state.group_of, state.n_groups, x_last.dtype))
    for _ in range(t_pre):
        if config.variant != "vrnn":
            p1 = _group_prior_all(st.h_s, params)
            s_new = torch.where(st.active.unsqueeze(-1), p1.mean, st.s)
        else:
            s_new = st.s
        s_agent = _gather_by_group(s_new, st.group_of)
        h_s_agent = _gather_by_group(st.h_s, st.group_of)
        p2 = _indiv_prior_all(st.h_z, h_s_agent, s_agent, params)
        z_new = p2.mean
        dec = _decode_all(z_new, s_agent, st.h_z, h_s_agent, st.h_m, params)
        x = x + dec.mean
        h_z_new, h_s_new = update_hidden(st, x, s_new, z_new, params, config, member)
        h_m_new = refine_social(h_z_new, x, config, params, pos_scale)
        st = ModelState(h_z=h_z_new, h_s=h_s_new, h_m=h_m_new, s=s_new, z=z_new,
                        group_of=st.group_of, active=st.active, x_last=x)
        outs.append(x)
    return torch.stack(outs, dim=-2)


def groups_at(assignment, t: int, device=None) -> StepGroups:
    """StepGroups view of a data-side GroupAssignment at timestep t."""
    membership = torch.as_tensor(assignment.membership[t], dtype=torch.long, device=device)
    active = torch.as_tensor(assignment.active[t], dtype=torch.bool, device=device)
    return StepGroups(membership=membership, active=active)
