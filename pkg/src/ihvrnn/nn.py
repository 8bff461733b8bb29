"""Differentiable building blocks: MLPs, a gated recurrent cell, diagonal
Gaussian heads, reparameterized sampling, closed-form KL / NLL, a masked
graph-attention layer, and a finite-difference gradient checker.

All operations are pure functions of (params, inputs, explicit noise) and
accept arbitrary leading batch dimensions; the trailing dimensions follow
the documented shapes.  Everything runs in the dtype of its inputs; tests
and training default to float64.

Cross-agent reductions (attention aggregation, pooling downstream) sum
their addends in value-sorted order so that permuting agents permutes the
outputs bitwise — index order never leaks into a float result.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np
import torch

from .errors import NumericError, ShapeError

DTYPE = torch.float64

SCALE_FLOOR = 1e-4
LEAKY_SLOPE = 0.2


@dataclass
class GaussianParams:
    """Diagonal Gaussian: per-dimension mean and standard deviation."""

    mean: torch.Tensor   # [..., d]
    scale: torch.Tensor  # [..., d], strictly positive

    def __post_init__(self):
        if self.mean.shape != self.scale.shape:
            raise ShapeError(f"mean {tuple(self.mean.shape)} vs scale {tuple(self.scale.shape)}")

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    def select(self, index, axis: int = -2) -> "GaussianParams":
        """Slice one row along ``axis`` (default: the second-to-last)."""
        return GaussianParams(self.mean.select(axis, index), self.scale.select(axis, index))


class ParamTree:
    """Named collection of learnable arrays addressable by dotted path.

    Names are unique and shapes are fixed once added; the optimizer mutates
    values in place between steps.
    """

    def __init__(self):
        self._arrays: dict[str, torch.Tensor] = {}

    def add(self, name: str, value: torch.Tensor) -> torch.Tensor:
        if name in self._arrays:
            raise KeyError(f"duplicate parameter name {name!r}")
        self._arrays[name] = value
        return value

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self._arrays

    def __len__(self) -> int:
        return len(self._arrays)

    def names(self) -> list[str]:
        return list(self._arrays)

    def items(self) -> Iterator[tuple[str, torch.Tensor]]:
        return iter(self._arrays.items())

    def tensors(self) -> list[torch.Tensor]:
        return list(self._arrays.values())

    def n_coords(self) -> int:
        return sum(t.numel() for t in self._arrays.values())

    def requires_grad_(self, flag: bool = True) -> "ParamTree":
        for t in self._arrays.values():
            t.requires_grad_(flag)
        return self

    def zero_grad(self) -> None:
        for t in self._arrays.values():
            t.grad = None

    def clone(self) -> "ParamTree":
        out = ParamTree()
        for name, t in self._arrays.items():
            out.add(name, t.detach().clone().requires_grad_(t.requires_grad))
        return out

    def copy_values_from(self, other: "ParamTree") -> None:
        for name, t in self._arrays.items():
            with torch.no_grad():
                t.copy_(other[name])


def sorted_sum(x: torch.Tensor, dim: int) -> torch.Tensor:
    """Sum along ``dim`` with addends taken in ascending value order.

    The multiset of addends determines the result, so reindexing the
    reduced axis (e.g. permuting agents) cannot change a single bit.
    Sorting a contiguous last dim is measurably faster, so callers lay the
    reduced axis out last where they can.
    """
    return torch.sort(x, dim=dim, stable=True).values.sum(dim=dim)


_EYE_CACHE: dict[int, torch.Tensor] = {}


def bool_eye(n: int) -> torch.Tensor:
    """Cached boolean identity (self-edge mask)."""
    if n not in _EYE_CACHE:
        _EYE_CACHE[n] = torch.eye(n, dtype=torch.bool)
    return _EYE_CACHE[n]


def sigmoid(x: torch.Tensor) -> torch.Tensor:
    """Logistic function via tanh.

    torch.sigmoid's CPU kernel rounds differently in its vector and tail
    paths, so the same value at different tensor positions can produce
    different bits; the tanh kernel does not, and this identity keeps
    agent-permutation equivariance exact.
    """
    return 0.5 * (1.0 + torch.tanh(0.5 * x))


def softplus(x: torch.Tensor) -> torch.Tensor:
    """Position-stable softplus: relu(x) + log(1 + exp(-|x|)).

    Same rationale as sigmoid(); torch's fused softplus kernel is not
    bitwise position-independent.
    """
    return torch.nn.functional.relu(x) + torch.log(1.0 + torch.exp(-x.abs()))


# ---------------------------------------------------------------------------
# initialization

def _uniform_fan(rng: np.random.Generator, fan_in: int, fan_out: int, shape) -> torch.Tensor:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape)).to(DTYPE)


def affine_init(tree: ParamTree, prefix: str, d_in: int, d_out: int,
                rng: np.random.Generator) -> None:
    tree.add(f"{prefix}.W", _uniform_fan(rng, d_in, d_out, (d_out, d_in)))
    tree.add(f"{prefix}.b", torch.zeros(d_out, dtype=DTYPE))


def mlp_init(tree: ParamTree, prefix: str, sizes: list[int], rng: np.random.Generator) -> None:
    """Layer sizes [d_in, h1, ..., d_out]; at least one affine layer."""
    if len(sizes) < 2:
        raise ShapeError("mlp needs at least [d_in, d_out]")
    for i in range(len(sizes) - 1):
        affine_init(tree, f"{prefix}.l{i}", sizes[i], sizes[i + 1], rng)


def gru_init(tree: ParamTree, prefix: str, d_in: int, d_h: int, rng: np.random.Generator) -> None:
    """Two-gate recurrent cell; gate blocks stacked as [reset, update, candidate]."""
    tree.add(f"{prefix}.W", _uniform_fan(rng, d_in, d_h, (3 * d_h, d_in)))
    tree.add(f"{prefix}.U", _uniform_fan(rng, d_h, d_h, (3 * d_h, d_h)))
    tree.add(f"{prefix}.b", torch.zeros(3 * d_h, dtype=DTYPE))


def gat_init(tree: ParamTree, prefix: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    tree.add(f"{prefix}.W", _uniform_fan(rng, d_in, d_out, (d_out, d_in)))
    tree.add(f"{prefix}.a", _uniform_fan(rng, 2 * d_out, 1, (2 * d_out,)))


def head_init(tree: ParamTree, prefix: str, d_in: int, d_out: int, rng: np.random.Generator) -> None:
    affine_init(tree, f"{prefix}.mean", d_in, d_out, rng)
    affine_init(tree, f"{prefix}.scale", d_in, d_out, rng)


# ---------------------------------------------------------------------------
# forward ops

def affine(tree: ParamTree, prefix: str, x: torch.Tensor) -> torch.Tensor:
    W = tree[f"{prefix}.W"]
    b = tree[f"{prefix}.b"]
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"{prefix}: input dim {x.shape[-1]} != expected {W.shape[1]}")
    return torch.nn.functional.linear(x, W, b)


def mlp(tree: ParamTree, prefix: str, x: torch.Tensor) -> torch.Tensor:
    """Alternating affine maps and tanh; the final layer is affine only."""
    i = 0
    out = x
    while f"{prefix}.l{i}.W" in tree:
        if f"{prefix}.l{i + 1}.W" in tree:
            out = torch.tanh(affine(tree, f"{prefix}.l{i}", out))
        else:
            out = affine(tree, f"{prefix}.l{i}", out)
        i += 1
    if i == 0:
        raise ShapeError(f"no layers under mlp prefix {prefix!r}")
    return out


def recurrent_step(tree: ParamTree, prefix: str, x: torch.Tensor,
                   h: torch.Tensor) -> torch.Tensor:
    """Gated update: reset gate r, update gate u, candidate c.

    hidden' = (1 - u) * hidden + u * c, so a saturated-closed update gate
    (large negative bias) leaves the hidden state untouched.
    """
    d_h = h.shape[-1]
    W = tree[f"{prefix}.W"]
    U = tree[f"{prefix}.U"]
    b = tree[f"{prefix}.b"]
    if x.shape[-1] != W.shape[1]:
        raise ShapeError(f"{prefix}: input dim {x.shape[-1]} != expected {W.shape[1]}")
    if h.shape[-1] * 3 != U.shape[0]:
        raise ShapeError(f"{prefix}: hidden dim {h.shape[-1]} != expected {U.shape[0] // 3}")
    gx = x @ W.transpose(0, 1) + b
    gh = h @ U.transpose(0, 1)
    r = sigmoid(gx[..., :d_h] + gh[..., :d_h])
    u = sigmoid(gx[..., d_h:2 * d_h] + gh[..., d_h:2 * d_h])
    c = torch.tanh(gx[..., 2 * d_h:] + r * gh[..., 2 * d_h:])
    return (1.0 - u) * h + u * c


def gaussian_head(tree: ParamTree, prefix: str, features: torch.Tensor) -> GaussianParams:
    """mean = affine(features); scale = softplus(affine(features)) + floor."""
    mean = affine(tree, f"{prefix}.mean", features)
    scale = softplus(affine(tree, f"{prefix}.scale", features)) + SCALE_FLOOR
    return GaussianParams(mean, scale)


def sample_reparam(g: GaussianParams, noise: torch.Tensor) -> torch.Tensor:
    if noise.shape[-1] != g.dim:
        raise ShapeError(f"noise dim {noise.shape[-1]} != gaussian dim {g.dim}")
    return g.mean + g.scale * noise


def kl_diag(q: GaussianParams, p: GaussianParams) -> torch.Tensor:
    """KL(q || p) for diagonal Gaussians, summed over the last dimension."""
    if q.dim != p.dim:
        raise ShapeError(f"kl_diag dims {q.dim} != {p.dim}")
    var_ratio = (q.scale / p.scale) ** 2
    delta = (q.mean - p.mean) / p.scale
    return 0.5 * (var_ratio + delta ** 2 - 1.0 - torch.log(var_ratio)).sum(dim=-1)


def gaussian_nll(x: torch.Tensor, g: GaussianParams) -> torch.Tensor:
    """Negative log density of ``x`` under ``g``, summed over the last dim."""
    if x.shape[-1] != g.dim:
        raise ShapeError(f"nll dims {x.shape[-1]} != {g.dim}")
    z = (x - g.mean) / g.scale
    return (0.5 * math.log(2.0 * math.pi) + torch.log(g.scale) + 0.5 * z ** 2).sum(dim=-1)


def gat_layer(tree: ParamTree, prefix: str, node_features: torch.Tensor,
              mask: torch.Tensor) -> torch.Tensor:
    """Single-head graph attention over an explicit 0/1 adjacency mask.

    e_ij = leaky_relu(a^T [W f_i || W f_j]) where mask_ij = 1 (self-edges
    are always added), -inf elsewhere; alpha = softmax over j; output_i =
    tanh(sum_j alpha_ij W f_j).  Masked-out pairs get exactly zero weight.
    """
    W = tree[f"{prefix}.W"]
    a = tree[f"{prefix}.a"]
    if node_features.shape[-1] != W.shape[1]:
        raise ShapeError(f"{prefix}: feature dim {node_features.shape[-1]} != {W.shape[1]}")
    n = node_features.shape[-2]
    d_out = W.shape[0]
    v = torch.nn.functional.linear(node_features, W)           # [..., n, d_out]
    sc = v @ a.reshape(2, d_out).transpose(0, 1)               # [..., n, 2]
    e = torch.nn.functional.leaky_relu(
        sc[..., 0].unsqueeze(-1) + sc[..., 1].unsqueeze(-2), negative_slope=LEAKY_SLOPE)
    keep = (mask > 0.5) | bool_eye(n)
    e = torch.where(keep, e, torch.tensor(float("-inf"), dtype=e.dtype))
    m = e.max(dim=-1, keepdim=True).values
    ex = torch.exp(e - m)                                      # masked entries exactly 0
    denom = sorted_sum(ex, dim=-1).unsqueeze(-1)
    alpha = ex / denom                                         # rows sum to 1
    # weighted sum over neighbors, laid out with j contiguous for the sort
    contrib = alpha.unsqueeze(-2) * v.transpose(-1, -2).unsqueeze(-3)   # [..., n, d, n]
    return torch.tanh(sorted_sum(contrib, dim=-1))


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(scalar_function: Callable[[], torch.Tensor], params: ParamTree,
               eps: float = 1e-5, sample_frac: float = 0.05,
               rng: np.random.Generator | None = None) -> float:
    """Compare autograd gradients against central finite differences.

    Checks a random ``sample_frac`` subsample of coordinates (at least one
    per tensor) and returns max |analytic - numeric| / max(1, |numeric|).
    """
    if not (1e-7 <= eps <= 1e-4):
        raise ValueError(f"eps {eps} outside [1e-7, 1e-4]")
    if rng is None:
        rng = np.random.default_rng(0)
    params.requires_grad_(True)
    params.zero_grad()
    value = scalar_function()
    if not torch.isfinite(value):
        raise NumericError("grad_check: non-finite function value")
    value.backward()

    worst = 0.0
    for _, t in params.items():
        grad = torch.zeros_like(t) if t.grad is None else t.grad
        flat = t.detach().reshape(-1)
        gflat = grad.reshape(-1)
        k = max(1, int(round(sample_frac * flat.numel())))
        idx = rng.choice(flat.numel(), size=min(k, flat.numel()), replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                f_plus = scalar_function().item()
                flat[i] = orig - eps
                f_minus = scalar_function().item()
                flat[i] = orig
            if not (math.isfinite(f_plus) and math.isfinite(f_minus)):
                raise NumericError("grad_check: non-finite perturbed value")
            numeric = (f_plus - f_minus) / (2.0 * eps)
            analytic = gflat[i].item()
            worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst
