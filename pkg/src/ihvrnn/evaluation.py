"""Metrics (ADE / FDE / MSE), the deterministic single-trajectory
evaluation protocol, and the ablation runner that trains variant x seed
cells under identical budgets and data order.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError, ShapeError
from .model import ModelConfig
from .objective import prediction_loss  # noqa: F401  (train/eval losses align)
from .training import (TrainConfig, batch_forward, load_checkpoint, prepare_windows,
                       split_windows, train, window_tensors)

VARIANT_TOKENS = ("vrnn", "hvrnn", "ihvrnn", "igc+rm", "igc+gat", "igc-only")


def _check_shapes(pred: np.ndarray, gt: np.ndarray) -> None:
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise ShapeError(f"metric shapes {pred.shape} vs {gt.shape}")


def ade(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance over agents and timesteps."""
    _check_shapes(pred, gt)
    return float(np.linalg.norm(pred - gt, axis=-1).mean())


def fde(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance at the final prediction step only."""
    _check_shapes(pred, gt)
    return float(np.linalg.norm(pred[:, -1] - gt[:, -1], axis=-1).mean())


def mse(pred: np.ndarray, gt: np.ndarray, arena_extent=None) -> float:
    """Mean squared Euclidean distance; optionally on the unit arena.

    ``arena_extent`` (width, height) rescales positions onto the unit
    square first, matching the team-sports reporting convention.
    """
    _check_shapes(pred, gt)
    diff = pred - gt
    if arena_extent is not None:
        diff = diff / np.asarray(arena_extent, dtype=np.float64)
    return float((diff ** 2).sum(axis=-1).mean())


@dataclass
class MetricsReport:
    dataset_id: str
    variant: str
    t_pre: int
    ade: float
    fde: float
    mse: float
    n_windows: int
    seeds: list = field(default_factory=list)
    units: str = "normalized"          # mse convention: normalized | raw
    arena_extent: list | None = None

    def to_dict(self) -> dict:
        return {
            "dataset_id": self.dataset_id, "variant": self.variant, "t_pre": self.t_pre,
            "ade": self.ade, "fde": self.fde, "mse": self.mse,
            "n_windows": self.n_windows, "seeds": self.seeds, "units": self.units,
            "arena_extent": self.arena_extent,
        }


def predict_windows(params, config: ModelConfig, windows, t_pre: int) -> list[np.ndarray]:
    """Deterministic prediction per window, in original units.

    Filtering and rollout use distribution means everywhere (the
    single-output protocol); returns one [n, t_pre, 2] array per window.
    """
    items = [window_tensors(w) for w in windows]
    out: list[np.ndarray | None] = [None] * len(windows)
    buckets: dict[tuple[int, int], list[int]] = {}
    for i, it in enumerate(items):
        buckets.setdefault((it.obs.shape[0], it.active.shape[1]), []).append(i)
    with torch.no_grad():
        for key in sorted(buckets):
            idxs = buckets[key]
            sub = [items[i] for i in idxs]
            _, pred, _ = batch_forward(params, config, sub, None, None, sample=False)
            for row, i in enumerate(idxs):
                w = windows[i]
                pred_raw = pred[row, :, :t_pre].numpy()
                if w.normalizer is not None:
                    pred_raw = w.normalizer.invert(pred_raw)
                out[i] = pred_raw
    return out  # type: ignore[return-value]


def evaluate_windows(params, config: ModelConfig, windows, t_pre: int,
                     units: str = "normalized") -> tuple[float, float, float, list[float]]:
    """(ade, fde, mse, per-window mse) over the given windows."""
    if not windows:
        raise ConfigError("evaluate: no windows to score")
    if any(w.t_pre < t_pre for w in windows):
        raise ConfigError(f"evaluate: windows carry t_pre={windows[0].t_pre} "
                          f"< requested {t_pre}")
    preds = predict_windows(params, config, windows, t_pre)
    ades, fdes, mses = [], [], []
    for w, pred_raw in zip(windows, preds):
        gt_raw = w.pred[:, :t_pre]
        if w.normalizer is not None:
            gt_raw = w.normalizer.invert(gt_raw)
        extent = None
        if units == "normalized" and w.arena is not None:
            extent = w.arena.extent()
        ades.append(ade(pred_raw, gt_raw))
        fdes.append(fde(pred_raw, gt_raw))
        mses.append(mse(pred_raw, gt_raw, arena_extent=extent))
    return (float(np.mean(ades)), float(np.mean(fdes)), float(np.mean(mses)), mses)


def evaluate(checkpoint: str | Path, train_config: TrainConfig, t_pre: int,
             units: str = "normalized", split: str = "holdout",
             expect_variant: str | None = None) -> MetricsReport:
    """Score a checkpoint on the configured dataset.

    ``split`` is "holdout" (the last fraction by scene order), "train", or
    "all".  The checkpoint's recorded variant must match ``expect_variant``
    when given, so ablation tables cannot silently mix variants.
    """
    params, config, _, meta = load_checkpoint(checkpoint)
    if expect_variant is not None and config.variant != expect_variant:
        raise ConfigError(f"variant mismatch: checkpoint is {config.variant!r}, "
                          f"expected {expect_variant!r}")
    if units not in ("normalized", "raw"):
        raise ConfigError(f"eval.units: {units!r} not one of ('normalized', 'raw')")
    t_obs = int(meta.get("t_obs", train_config.t_obs))
    windows = prepare_windows(train_config.dataset, t_obs, t_pre, train_config.stride)
    train_w, held = split_windows(windows, train_config.holdout_frac)
    chosen = {"holdout": held or windows, "train": train_w, "all": windows}[split]
    a, f, m, _ = evaluate_windows(params, config, chosen, t_pre, units)
    arena = chosen[0].arena
    return MetricsReport(
        dataset_id=train_config.dataset.kind, variant=config.variant, t_pre=t_pre,
        ade=a, fde=f, mse=m, n_windows=len(chosen),
        seeds=[int(meta.get("seed", train_config.seed))], units=units,
        arena_extent=None if arena is None else arena.extent().tolist(),
    )


# ---------------------------------------------------------------------------
# ablation runner

def variant_model(base: ModelConfig, token: str) -> ModelConfig:
    """Model configuration for one ablation column."""
    if token not in VARIANT_TOKENS:
        raise ConfigError(f"ablate.variants: {token!r} not one of {VARIANT_TOKENS}")
    if token in ("vrnn", "hvrnn", "ihvrnn"):
        return replace(base, variant=token)
    flags = {"igc+rm": (True, False), "igc+gat": (False, True), "igc-only": (False, False)}
    use_rm, use_gat = flags[token]
    return replace(base, variant="ihvrnn", use_rm=use_rm, use_gat=use_gat)


@dataclass
class AblationCell:
    variant: str
    seed: int
    status: str = "pending"            # done | failed
    mse: float = float("nan")
    ade: float = float("nan")
    fde: float = float("nan")
    error: str = ""


@dataclass
class AblationResult:
    variants: list
    seeds: list
    t_pre: int
    cells: list                         # list[AblationCell]
    units: str = "normalized"

    def cell(self, variant: str, seed: int) -> AblationCell:
        for c in self.cells:
            if c.variant == variant and c.seed == seed:
                return c
        raise KeyError((variant, seed))

    def stats(self, variant: str) -> tuple[float, float, int]:
        vals = [c.mse for c in self.cells if c.variant == variant and c.status == "done"]
        if not vals:
            return float("nan"), float("nan"), 0
        return float(np.mean(vals)), float(np.std(vals)), len(vals)

    def orderings(self) -> dict[str, bool]:
        out = {}
        for i, a in enumerate(self.variants):
            for b in self.variants[i + 1:]:
                ma, _, na = self.stats(a)
                mb, _, nb = self.stats(b)
                if na and nb:
                    out[f"{a}<{b}"] = bool(ma < mb)
        return out

    def to_dict(self) -> dict:
        return {
            "variants": self.variants, "seeds": self.seeds, "t_pre": self.t_pre,
            "units": self.units,
            "cells": [vars(c) for c in self.cells],
            "summary": {v: {"mse_mean": self.stats(v)[0], "mse_std": self.stats(v)[1],
                            "n": self.stats(v)[2]} for v in self.variants},
            "orderings": self.orderings(),
        }

    def render_text(self) -> str:
        lines = []
        header = f"{'variant':<10} {'mse_mean':>12} {'mse_std':>12} {'n':>3}  " + \
            " ".join(f"{('seed ' + str(s)):>12}" for s in self.seeds)
        lines.append(header)
        lines.append("-" * len(header))
        for v in self.variants:
            mean, std, n = self.stats(v)
            per_seed = []
            for s in self.seeds:
                c = self.cell(v, s)
                per_seed.append(f"{c.mse:>12.6f}" if c.status == "done" else f"{'FAILED':>12}")
            lines.append(f"{v:<10} {mean:>12.6f} {std:>12.6f} {n:>3}  " + " ".join(per_seed))
        lines.append("")
        for name, ok in self.orderings().items():
            lines.append(f"ordering {name}: {'yes' if ok else 'no'}")
        return "\n".join(lines) + "\n"


def _run_cell(args) -> AblationCell:
    base_config, token, seed, out_dir, t_pre, units = args
    cell = AblationCell(variant=token, seed=seed)
    try:
        cfg = replace(base_config, model=variant_model(base_config.model, token), seed=seed)
        cell_dir = Path(out_dir) / f"{token.replace('+', '_')}_s{seed}"
        ckpt, _ = train(cfg, cell_dir)
        report = evaluate(ckpt, cfg, t_pre, units=units, split="holdout")
        cell.status = "done"
        cell.mse, cell.ade, cell.fde = report.mse, report.ade, report.fde
    except Exception as exc:  # cell failures must not kill the table
        cell.status = "failed"
        cell.error = f"{type(exc).__name__}: {exc}"
    return cell


def run_ablation(base_config: TrainConfig, variants: list[str], seeds: list[int],
                 out_dir: str | Path, t_pre: int | None = None,
                 units: str = "normalized", workers: int = 1) -> AblationResult:
    """Train and score every (variant, seed) cell under equal budgets.

    Data order is a function of the seed alone, so every variant sees the
    same batches for a given seed; failed cells are marked and the rest of
    the table still completes.
    """
    if len(variants) < 2:
        raise ConfigError("ablate.variants: need at least 2 variants")
    if not seeds:
        raise ConfigError("ablate.seeds: need at least 1 seed")
    for token in variants:
        variant_model(base_config.model, token)   # validate early
    t_pre = base_config.t_pre if t_pre is None else t_pre
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    jobs = [(base_config, v, s, str(out_dir), t_pre, units) for v in variants for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            cells = list(pool.map(_run_cell, jobs))
    else:
        cells = [_run_cell(j) for j in jobs]
    result = AblationResult(variants=list(variants), seeds=list(seeds), t_pre=t_pre,
                            cells=cells, units=units)
    (out_dir / "ablation.json").write_text(json.dumps(result.to_dict(), indent=1) + "\n",
                                           encoding="utf-8")
    (out_dir / "ablation.txt").write_text(result.render_text(), encoding="utf-8")
    return result
