"""Training loss: generation part (negative ELBO over the observed steps)
plus prediction part (mean squared displacement over the rollout horizon).

Sums are normalized into per-term means: reconstruction NLL and the
behavior KL per agent-step, the consensus KL per active group-step.
Reduction order is fixed by (time, agent/group) index so repeated runs are
bit-identical.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import torch

from .errors import ContractError, ShapeError
from .model import StepStats


@dataclass
class LossBreakdown:
    recon_nll: torch.Tensor
    kl_s: torch.Tensor
    kl_z: torch.Tensor
    pred_l2: torch.Tensor
    total: torch.Tensor
    beta_s: float
    beta_z: float

    def scalars(self) -> dict[str, float]:
        return {
            "recon_nll": float(self.recon_nll.detach()), "kl_s": float(self.kl_s.detach()),
            "kl_z": float(self.kl_z.detach()), "pred_l2": float(self.pred_l2.detach()),
            "total": float(self.total.detach()),
        }


def generation_loss(step_stats: Sequence[StepStats]) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Aggregate per-step stats into (recon_nll, kl_s, kl_z) means."""
    if not step_stats:
        raise ContractError("generation_loss needs at least one filter step")
    agent_terms = sum(s.n_agent_terms for s in step_stats)
    active_terms = sum(s.n_active_terms for s in step_stats)
    recon = sum(s.recon_nll_sum for s in step_stats) / agent_terms
    kl_z = sum(s.kl_z_sum for s in step_stats) / agent_terms
    kl_s_total = sum(s.kl_s_sum for s in step_stats)
    if active_terms > 0:
        kl_s = kl_s_total / active_terms
    else:
        kl_s = torch.zeros_like(recon)
    return recon, kl_s, kl_z


def prediction_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over agents and timesteps of the squared Euclidean distance."""
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction_loss shapes {tuple(pred.shape)} vs {tuple(gt.shape)}")
    return ((pred - gt) ** 2).sum(dim=-1).mean()


def total_loss(recon_nll: torch.Tensor, kl_s: torch.Tensor, kl_z: torch.Tensor,
               pred_l2: torch.Tensor, beta_s: float = 1.0,
               beta_z: float = 1.0) -> LossBreakdown:
    if beta_s < 0 or beta_z < 0:
        raise ContractError("KL weights must be >= 0")
    total = recon_nll + beta_s * kl_s + beta_z * kl_z + pred_l2
    return LossBreakdown(recon_nll=recon_nll, kl_s=kl_s, kl_z=kl_z, pred_l2=pred_l2,
                         total=total, beta_s=beta_s, beta_z=beta_z)
