"""Trajectory and report figures, rendered as SVG.

Figures are deterministic: the SVG hash salt is pinned and the creation
date is stripped, so rendering the same input twice yields identical
bytes.  Every trajectory polyline carries a gid of the form
``{segment}-a{agent_index}`` (segment in obs/pred/gt), which makes the
per-segment path count checkable in tests.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .data import Scene
from .errors import DataError

matplotlib.rcParams["svg.hashsalt"] = "ihvrnn"

GROUP_COLORS = ("tab:red", "tab:blue", "tab:green", "tab:orange",
                "tab:purple", "tab:brown", "tab:pink", "tab:gray")

SEGMENT_STYLE = {"obs": "-", "pred": "--", "gt": ":"}


def bundle_from_scene(scene: Scene) -> dict:
    """Observed-only trajectory bundle from a scene."""
    return {
        "groups": [a.static_group if a.static_group is not None else 0
                   for a in scene.agents],
        "obs": [a.xy.tolist() for a in scene.agents],
    }


def load_bundle(path: str | Path) -> dict:
    """Read a trajectory bundle; team track files are accepted directly."""
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if "frames" in doc and "teams" in doc:
        from .data import load_soccer_json
        return bundle_from_scene(load_soccer_json(path))
    if "obs" not in doc:
        raise DataError(f"{Path(path).name}: neither a trajectory bundle nor a track file")
    return doc


def plot_trajectories(bundle: dict, out_path: str | Path, title: str = "") -> Path:
    """Render one SVG: observed solid, predicted dashed, ground truth dotted.

    Group 0 draws red, group 1 blue, later groups from a fixed palette.
    """
    obs = [np.asarray(t, dtype=float) for t in bundle["obs"]]
    n = len(obs)
    groups = bundle.get("groups") or [0] * n
    segments = {"obs": obs}
    for key in ("pred", "gt"):
        if bundle.get(key):
            tracks = [np.asarray(t, dtype=float) for t in bundle[key]]
            if len(tracks) != n:
                raise DataError(f"bundle segment {key!r} has {len(tracks)} tracks, expected {n}")
            segments[key] = tracks

    fig, ax = plt.subplots(figsize=(6, 4))
    for key, tracks in segments.items():
        for i, track in enumerate(tracks):
            if track.size == 0:
                continue
            color = GROUP_COLORS[groups[i] % len(GROUP_COLORS)]
            line, = ax.plot(track[:, 0], track[:, 1], SEGMENT_STYLE[key],
                            color=color, linewidth=1.2)
            line.set_gid(f"{key}-a{i}")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.set_aspect("equal", adjustable="datalim")
    if title:
        ax.set_title(title)
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def plot_ablation_bars(result, out_path: str | Path) -> Path:
    """Held-out MSE per variant with seed std error bars."""
    variants = result.variants
    means, stds = [], []
    for v in variants:
        m, s, _ = result.stats(v)
        means.append(m)
        stds.append(s)
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(variants))
    ax.bar(xs, means, yerr=stds, capsize=4, color="tab:blue")
    ax.set_xticks(xs)
    ax.set_xticklabels(variants)
    ax.set_ylabel(f"held-out MSE ({result.units})")
    ax.set_title(f"prediction horizon {result.t_pre}")
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path


def plot_metrics_report(report, out_path: str | Path) -> Path:
    """Single-report bar figure (ADE / FDE / MSE)."""
    fig, ax = plt.subplots(figsize=(5, 3.5))
    names = ["ade", "fde", "mse"]
    vals = [report.ade, report.fde, report.mse]
    ax.bar(np.arange(3), vals, color=["tab:red", "tab:orange", "tab:blue"])
    ax.set_xticks(np.arange(3))
    ax.set_xticklabels(names)
    ax.set_title(f"{report.variant} on {report.dataset_id} (T_pre={report.t_pre})")
    out_path = Path(out_path)
    fig.savefig(out_path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return out_path
