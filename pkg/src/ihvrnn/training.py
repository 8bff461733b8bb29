"""Deterministic mini-batch training: teacher-forced filtering over the
observation window, differentiable mean rollout over the prediction
window, adaptive-moment updates with global-norm clipping, checkpoints and
a JSON-lines training log.

With a fixed (config, seed) and single-threaded execution in float64, two
runs produce bit-identical logs (modulo wall-clock, which the
``deterministic_log`` flag pins to zero) and checkpoints.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from . import model as mdl
from .data import (Scene, SegmentWindow, assign_groups_dynamic, load_ped_tsv,
                   load_soccer_json, normalize, window_segments)
from .errors import ConfigError, DataError, NumericError, ShapeError
from .model import ModelConfig, ModelState, StepGroups, StepNoise
from .nn import DTYPE, ParamTree
from .objective import generation_loss, prediction_loss, total_loss
from .rng import RNG_ALGORITHM, seed_everything
from .synth import CrossingConfig, TeamGameConfig, gen_crossing_flows, gen_team_game

LOG_KEYS = ("step", "recon_nll", "kl_s", "kl_z", "pred_l2", "total", "grad_norm", "wall_ms")
CHECKPOINT_MAGIC = "ihvrnn-checkpoint"


@dataclass
class DatasetSpec:
    """Where training/evaluation windows come from."""

    kind: str = "team_game"            # team_game | crossing_flows | ped_tsv | soccer_file
    team_game: TeamGameConfig = field(default_factory=TeamGameConfig)
    crossing: CrossingConfig = field(default_factory=CrossingConfig)
    paths: list = field(default_factory=list)
    n_scenes: int = 8                  # synthetic kinds: scenes at seed, seed+1, ...
    n_groups: int = 4                  # pedestrian heading-quadrant grouping
    min_speed: float = 0.1

    def validate(self) -> None:
        kinds = ("team_game", "crossing_flows", "ped_tsv", "soccer_file")
        if self.kind not in kinds:
            raise ConfigError(f"dataset.kind: {self.kind!r} not one of {kinds}")
        if self.kind in ("team_game", "crossing_flows") and self.n_scenes < 1:
            raise ConfigError("dataset.n_scenes: must be >= 1")
        if self.kind in ("ped_tsv", "soccer_file") and not self.paths:
            raise ConfigError("dataset.paths: required for file-backed datasets")


@dataclass
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    t_obs: int = 20
    t_pre: int = 10
    stride: int = 5
    batch_size: int = 16
    steps: int = 200
    learning_rate: float = 1e-3
    grad_clip_norm: float = 5.0
    seed: int = 0
    log_every: int = 10
    checkpoint_every: int = 0          # 0 -> only initial and final
    beta_ramp_frac: float = 0.2
    holdout_frac: float = 0.2
    deterministic_log: bool = False    # write wall_ms as 0 for byte-stable logs
    num_threads: int = 1

    def validate(self) -> None:
        self.model.validate()
        self.dataset.validate()
        for name in ("t_obs", "t_pre", "stride", "batch_size", "num_threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"train.{name}: must be >= 1")
        if self.steps < 0:
            raise ConfigError("train.steps: must be >= 0")
        if self.learning_rate <= 0:
            raise ConfigError("train.learning_rate: must be > 0")
        if self.grad_clip_norm <= 0:
            raise ConfigError("train.grad_clip_norm: must be > 0")
        if not 0.0 <= self.beta_ramp_frac <= 1.0:
            raise ConfigError("train.beta_ramp_frac: must be in [0, 1]")
        if not 0.0 <= self.holdout_frac < 1.0:
            raise ConfigError("train.holdout_frac: must be in [0, 1)")


@dataclass
class TrainLogRecord:
    step: int
    recon_nll: float
    kl_s: float
    kl_z: float
    pred_l2: float
    total: float
    grad_norm: float
    wall_ms: float

    def to_json(self) -> str:
        return json.dumps({k: getattr(self, k) for k in LOG_KEYS})


# ---------------------------------------------------------------------------
# dataset assembly

def build_scenes(spec: DatasetSpec) -> list[Scene]:
    spec.validate()
    if spec.kind == "team_game":
        return [gen_team_game(replace(spec.team_game, seed=spec.team_game.seed + i))[0]
                for i in range(spec.n_scenes)]
    if spec.kind == "crossing_flows":
        return [gen_crossing_flows(replace(spec.crossing, seed=spec.crossing.seed + i))
                for i in range(spec.n_scenes)]
    if spec.kind == "ped_tsv":
        scenes = []
        for p in spec.paths:
            scenes.extend(load_ped_tsv(p))
        return scenes
    return [load_soccer_json(p) for p in spec.paths]


def prepare_windows(spec: DatasetSpec, t_obs: int, t_pre: int,
                    stride: int) -> list[SegmentWindow]:
    """Window, group and normalize every scene, in scene order."""
    out = []
    for scene in build_scenes(spec):
        for w in window_segments(scene, t_obs, t_pre, stride):
            if w.groups.n_groups == 1 and all(a.static_group is None for a in scene.agents):
                w.groups = assign_groups_dynamic(w, n_groups=spec.n_groups,
                                                 min_speed=spec.min_speed)
            normalized, _ = normalize(w)
            out.append(normalized)
    if not out:
        raise DataError("dataset yields no windows at the requested horizon")
    return out


def split_windows(windows: list[SegmentWindow],
                  holdout_frac: float) -> tuple[list[SegmentWindow], list[SegmentWindow]]:
    """Train/held-out split: the last fraction by scene order, unshuffled."""
    n_train = len(windows) - int(round(holdout_frac * len(windows)))
    n_train = max(1, min(len(windows), n_train))
    return windows[:n_train], windows[n_train:]


@dataclass
class WindowBatchItem:
    obs: torch.Tensor            # [n, T_obs, 2]
    pred: torch.Tensor           # [n, T_pre, 2]
    membership: torch.Tensor     # [T, n]
    active: torch.Tensor         # [T, N_g]
    pos_scale: float


def window_tensors(w: SegmentWindow) -> WindowBatchItem:
    return WindowBatchItem(
        obs=torch.as_tensor(w.obs, dtype=DTYPE),
        pred=torch.as_tensor(w.pred, dtype=DTYPE),
        membership=torch.as_tensor(w.groups.membership, dtype=torch.long),
        active=torch.as_tensor(w.groups.active, dtype=torch.bool),
        pos_scale=float(w.normalizer.scale) if w.normalizer is not None else 1.0,
    )


def bucket_key(item: WindowBatchItem) -> tuple[int, int]:
    return (item.obs.shape[0], item.active.shape[1])


# ---------------------------------------------------------------------------
# forward pass over one equal-shape batch

def batch_forward(params: ParamTree, config: ModelConfig, items: list[WindowBatchItem],
                  noise_s: torch.Tensor | None, noise_z: torch.Tensor | None,
                  sample: bool = True):
    """Filter T_obs steps (teacher forced) then roll out T_pre steps.

    Returns (stats_list, pred [B, n, T_pre, 2], gt [B, n, T_pre, 2]).
    ``noise_*`` shapes: [B, T_obs, N_g, d_s] and [B, T_obs, n, d_z].
    """
    obs = torch.stack([it.obs for it in items])              # [B, n, T_obs, 2]
    gt = torch.stack([it.pred for it in items])              # [B, n, T_pre, 2]
    membership = torch.stack([it.membership for it in items])  # [B, T, n]
    active = torch.stack([it.active for it in items])          # [B, T, N_g]
    pos_scale = torch.tensor([[[it.pos_scale]] for it in items], dtype=DTYPE)  # [B,1,1]

    t_obs = obs.shape[2]
    t_pre = gt.shape[2]
    groups0 = StepGroups(membership[:, 0], active[:, 0])
    state = mdl.init_state(config, obs.shape[1], groups0)
    stats_list = []
    for t in range(t_obs):
        noise = StepNoise(
            s=noise_s[:, t] if (sample and noise_s is not None) else None,
            z=noise_z[:, t] if (sample and noise_z is not None) else None)
        state, stats = mdl.filter_step(state, obs[:, :, t], StepGroups(membership[:, t], active[:, t]),
                                       params, config, noise, pos_scale=pos_scale)
        stats_list.append(stats)
    pred = mdl.rollout(state, obs[:, :, -1], t_pre, params, config, pos_scale=pos_scale)
    return stats_list, pred, gt


# ---------------------------------------------------------------------------
# checkpoints: one file = JSON manifest line + raw little-endian payload

def save_checkpoint(params: ParamTree, config: ModelConfig, step: int,
                    path: str | Path, train_meta: dict | None = None) -> Path:
    path = Path(path)
    entries = {}
    payload = bytearray()
    for name, tensor in params.items():
        arr = tensor.detach().numpy().astype("<f8", copy=False)
        entries[name] = {"shape": list(arr.shape), "dtype": "float64",
                         "offset": len(payload)}
        payload.extend(arr.tobytes())
    manifest = {
        "format": CHECKPOINT_MAGIC, "version": 1, "step": int(step),
        "model": config.to_dict(), "train": train_meta or {},
        "rng_algorithm": RNG_ALGORITHM,
        "payload_bytes": len(payload), "params": entries,
    }
    with path.open("wb") as f:
        f.write(json.dumps(manifest).encode("utf-8"))   # insertion order: param order
        f.write(b"\n")
        f.write(bytes(payload))
    return path


def load_checkpoint(path: str | Path) -> tuple[ParamTree, ModelConfig, int, dict]:
    path = Path(path)
    with path.open("rb") as f:
        header = f.readline()
        payload = f.read()
    try:
        manifest = json.loads(header.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise DataError(f"{path.name}: corrupt checkpoint manifest") from None
    if manifest.get("format") != CHECKPOINT_MAGIC:
        raise DataError(f"{path.name}: not a checkpoint file")
    if len(payload) != manifest["payload_bytes"]:
        raise DataError(f"{path.name}: truncated payload "
                        f"({len(payload)} of {manifest['payload_bytes']} bytes)")
    config = ModelConfig.from_dict(manifest["model"])
    expected = mdl.init_params(config, np.random.default_rng(0))
    params = ParamTree()
    for name, entry in manifest["params"].items():
        shape = tuple(entry["shape"])
        if name not in expected or tuple(expected[name].shape) != shape:
            raise ShapeError(f"{path.name}: parameter {name!r} has shape {shape}, "
                             f"which does not match this model configuration")
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=start).reshape(shape)
        params.add(name, torch.from_numpy(arr.copy()))
    if set(params.names()) != set(expected.names()):
        raise ShapeError(f"{path.name}: parameter names do not match this model")
    return params, config, int(manifest["step"]), manifest.get("train", {})


# ---------------------------------------------------------------------------
# the training loop

def beta_at(step: int, total_steps: int, ramp_frac: float) -> float:
    ramp = max(1, int(round(ramp_frac * total_steps)))
    return min(1.0, step / ramp)


def train(config: TrainConfig, out_dir: str | Path,
          resume: str | Path | None = None) -> tuple[Path, Path]:
    """Run the configured training; returns (final checkpoint, log path)."""
    config.validate()
    torch.set_num_threads(config.num_threads)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"
    final_path = out_dir / "checkpoint_final.ckpt"

    streams = seed_everything(config.seed)
    start_step = 0
    if resume is not None:
        params, ckpt_model, start_step, _ = load_checkpoint(resume)
        if ckpt_model.to_dict() != config.model.to_dict():
            raise ConfigError("resume checkpoint model configuration does not match")
    else:
        params = mdl.init_params(config.model, streams.init)
    params.requires_grad_(True)

    windows = prepare_windows(config.dataset, config.t_obs, config.t_pre, config.stride)
    train_windows, _ = split_windows(windows, config.holdout_frac)
    items = [window_tensors(w) for w in train_windows]
    buckets: dict[tuple[int, int], list[int]] = {}
    for idx, it in enumerate(items):
        buckets.setdefault(bucket_key(it), []).append(idx)

    train_meta = {"t_obs": config.t_obs, "t_pre": config.t_pre, "seed": config.seed,
                  "dataset_kind": config.dataset.kind}
    save_checkpoint(params, config.model, start_step, out_dir / "checkpoint_step0.ckpt",
                    train_meta)
    optimizer = torch.optim.Adam(params.tensors(), lr=config.learning_rate)
    records: list[str] = []
    last_good = out_dir / "checkpoint_step0.ckpt"

    def write_log():
        log_path.write_text("".join(r + "\n" for r in records), encoding="utf-8")

    cfg_m = config.model
    step = start_step
    while step < config.steps:
        step += 1
        t0 = time.perf_counter()
        chosen = streams.batching.choice(len(items), size=min(config.batch_size, len(items)),
                                         replace=len(items) < config.batch_size)
        by_bucket: dict[tuple[int, int], list[int]] = {}
        for idx in chosen.tolist():
            by_bucket.setdefault(bucket_key(items[idx]), []).append(idx)

        optimizer.zero_grad(set_to_none=True)
        beta = beta_at(step, config.steps, config.beta_ramp_frac)
        tot_parts = []
        scal = {"recon_nll": 0.0, "kl_s": 0.0, "kl_z": 0.0, "pred_l2": 0.0, "total": 0.0}
        n_chosen = len(chosen)
        try:
            for key in sorted(by_bucket):
                sub = [items[i] for i in by_bucket[key]]
                B = len(sub)
                n, n_g = key
                noise_s = torch.as_tensor(
                    streams.reparam.standard_normal((B, config.t_obs, n_g, cfg_m.d_s)),
                    dtype=DTYPE)
                noise_z = torch.as_tensor(
                    streams.reparam.standard_normal((B, config.t_obs, n, cfg_m.d_z)),
                    dtype=DTYPE)
                stats, pred, gt = batch_forward(params, cfg_m, sub, noise_s, noise_z)
                recon, kl_s, kl_z = generation_loss(stats)
                pred_l2 = prediction_loss(pred, gt)
                breakdown = total_loss(recon, kl_s, kl_z, pred_l2, beta_s=beta, beta_z=beta)
                weight = B / n_chosen
                tot_parts.append(breakdown.total * weight)
                for k, v in breakdown.scalars().items():
                    scal[k] += v * weight
            total = sum(tot_parts)
            if not torch.isfinite(total):
                raise NumericError("non-finite total loss")
            total.backward()
        except NumericError as exc:
            write_log()
            raise NumericError(
                f"training aborted at step {step} on batch {sorted(chosen.tolist())}: {exc}; "
                f"last good checkpoint: {last_good}") from exc

        grad_norm = float(torch.nn.utils.clip_grad_norm_(params.tensors(),
                                                         config.grad_clip_norm))
        optimizer.step()

        wall_ms = 0.0 if config.deterministic_log else (time.perf_counter() - t0) * 1e3
        if step == 1 or step == config.steps or (config.log_every and step % config.log_every == 0):
            records.append(TrainLogRecord(step=step, grad_norm=grad_norm, wall_ms=wall_ms,
                                          **scal).to_json())
        if config.checkpoint_every and step % config.checkpoint_every == 0:
            last_good = save_checkpoint(params, cfg_m, step,
                                        out_dir / f"checkpoint_step{step}.ckpt", train_meta)

    save_checkpoint(params, cfg_m, step, final_path, train_meta)
    write_log()
    return final_path, log_path
