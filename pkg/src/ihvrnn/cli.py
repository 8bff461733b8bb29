"""Operator entry point.

One JSON config document drives every subcommand (per-command sections),
so experiment runs are self-describing.  Unknown keys anywhere in the
config are errors, named by field path.  Exit codes: 0 success, 2 config
error, 3 data error, 4 numeric abort.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .data import save_soccer_json
from .errors import ConfigError, DataError, NumericError, ParseError
from .evaluation import evaluate, run_ablation
from .model import ModelConfig
from .rng import RNG_ALGORITHM
from .synth import (CrossingConfig, TeamGameConfig, gen_crossing_flows, gen_team_game,
                    save_truth_json)
from .training import DatasetSpec, TrainConfig, train

SECTIONS = ("model", "dataset", "train", "eval", "ablate", "synth", "plot")


def _from_dict(cls, doc: dict, path: str):
    """Build a dataclass from a dict; unknown keys error with their path."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: expected an object")
    names = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in doc.items():
        if key not in names:
            raise ConfigError(f"{path}.{key}: unknown key")
        field = names[key]
        if dataclasses.is_dataclass(field.type) or field.name in ("model", "dataset",
                                                                  "team_game", "crossing"):
            sub_cls = {"model": ModelConfig, "dataset": DatasetSpec,
                       "team_game": TeamGameConfig, "crossing": CrossingConfig}[field.name]
            kwargs[key] = _from_dict(sub_cls, value, f"{path}.{key}")
        elif field.name == "arena":
            kwargs[key] = (tuple(value[0]), tuple(value[1]))
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ConfigError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{path}: {exc}") from None


def load_config(path: str | Path) -> dict:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path.name}: line {exc.lineno}: {exc.msg}") from None
    if not isinstance(doc, dict):
        raise ConfigError(f"{path.name}: top level must be an object")
    for key in doc:
        if key not in SECTIONS:
            raise ConfigError(f"{key}: unknown key")
    return doc


def build_train_config(doc: dict) -> TrainConfig:
    model = _from_dict(ModelConfig, doc.get("model", {}), "model")
    dataset = _from_dict(DatasetSpec, doc.get("dataset", {}), "dataset")
    train_doc = dict(doc.get("train", {}))
    for key in ("model", "dataset"):
        if key in train_doc:
            raise ConfigError(f"train.{key}: belongs at the top level")
    cfg = _from_dict(TrainConfig, train_doc, "train")
    cfg = replace(cfg, model=model, dataset=dataset)
    cfg.validate()
    return cfg


def config_manifest(doc: dict, seed: int) -> dict:
    blob = json.dumps(doc, sort_keys=True).encode("utf-8")
    return {
        "tool": "ihvrnn", "version": __version__,
        "config_sha256": hashlib.sha256(blob).hexdigest(),
        "seed": int(seed), "rng_algorithm": RNG_ALGORITHM,
    }


def _write_manifest(out_dir: Path, doc: dict, seed: int) -> None:
    (out_dir / "manifest.json").write_text(
        json.dumps(config_manifest(doc, seed), indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args) -> int:
    doc = load_config(args.config)
    dataset = _from_dict(DatasetSpec, doc.get("dataset", {}), "dataset")
    dataset.validate()
    if dataset.kind not in ("team_game", "crossing_flows"):
        raise ConfigError(f"dataset.kind: {dataset.kind!r} is not a synthetic generator")
    if dataset.kind == "team_game":
        dataset.team_game.validate()
        base_seed = dataset.team_game.seed
    else:
        dataset.crossing.validate()
        base_seed = dataset.crossing.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(dataset.n_scenes):
        if dataset.kind == "team_game":
            cfg = replace(dataset.team_game, seed=base_seed + i)
            scene, truth = gen_team_game(cfg)
            save_soccer_json(scene, out / f"scene_{i:03d}.json")
            save_truth_json(truth, cfg, out / f"scene_{i:03d}.truth.json")
        else:
            cfg = replace(dataset.crossing, seed=base_seed + i)
            scene = gen_crossing_flows(cfg)
            save_soccer_json_like_crossing(scene, out / f"scene_{i:03d}.tsv")
    _write_manifest(out, doc, base_seed)
    print(f"wrote {dataset.n_scenes} scene(s) to {out}")
    return 0


def save_soccer_json_like_crossing(scene, path: Path) -> None:
    """Crossing scenes have no teams; export them as pedestrian TSV."""
    lines = [f"# scene {scene.scene_id}, frame_rate_hz {scene.frame_rate_hz}"]
    for a in scene.agents:
        for f, xy in zip(a.frame_idx, a.xy):
            lines.append(f"{int(f)} {a.agent_id} {xy[0]:.17g} {xy[1]:.17g}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def cmd_train(args) -> int:
    doc = load_config(args.config)
    cfg = build_train_config(doc)
    out = Path(args.out)
    ckpt, log = train(cfg, out, resume=args.resume)
    _write_manifest(out, doc, cfg.seed)
    print(f"checkpoint: {ckpt}")
    print(f"log: {log}")
    return 0


def cmd_eval(args) -> int:
    doc = load_config(args.config)
    cfg = build_train_config(doc)
    eval_doc = dict(doc.get("eval", {}))
    allowed = {"t_pre", "units", "split", "expect_variant"}
    for key in eval_doc:
        if key not in allowed:
            raise ConfigError(f"eval.{key}: unknown key")
    t_pre = args.t_pre if args.t_pre is not None else int(eval_doc.get("t_pre", cfg.t_pre))
    units = args.units if args.units is not None else eval_doc.get("units", "normalized")
    split = eval_doc.get("split", "holdout")
    expect = eval_doc.get("expect_variant")
    report = evaluate(args.checkpoint, cfg, t_pre, units=units, split=split,
                      expect_variant=expect)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=1) + "\n",
                                     encoding="utf-8")
    tsv = ["metric\tvalue", f"ade\t{report.ade:.17g}", f"fde\t{report.fde:.17g}",
           f"mse\t{report.mse:.17g}", f"n_windows\t{report.n_windows}",
           f"units\t{report.units}"]
    (out / "report.tsv").write_text("\n".join(tsv) + "\n", encoding="utf-8")
    from .plotting import plot_metrics_report
    plot_metrics_report(report, out / "report.svg")
    _write_manifest(out, doc, cfg.seed)
    width = max(len(k) for k in ("ade", "fde", "mse", "n_windows"))
    print(f"{'metric':<{width + 2}}value")
    for name in ("ade", "fde", "mse"):
        print(f"{name:<{width + 2}}{getattr(report, name):.6f}")
    print(f"{'n_windows':<{width + 2}}{report.n_windows}")
    return 0


def cmd_ablate(args) -> int:
    doc = load_config(args.config)
    cfg = build_train_config(doc)
    ab = dict(doc.get("ablate", {}))
    allowed = {"variants", "seeds", "t_pre", "units", "workers"}
    for key in ab:
        if key not in allowed:
            raise ConfigError(f"ablate.{key}: unknown key")
    variants = args.variants.split(",") if args.variants else list(ab.get("variants", []))
    seeds = [int(s) for s in (ab.get("seeds", [0, 1]))]
    out = Path(args.out)
    result = run_ablation(cfg, variants, seeds, out,
                          t_pre=ab.get("t_pre"), units=ab.get("units", "normalized"),
                          workers=int(ab.get("workers", 1)))
    from .plotting import plot_ablation_bars
    plot_ablation_bars(result, out / "ablation.svg")
    _write_manifest(out, doc, cfg.seed)
    print(result.render_text())
    return 0


def cmd_plot(args) -> int:
    from .plotting import load_bundle, plot_trajectories
    bundle = load_bundle(args.input)
    plot_trajectories(bundle, args.out)
    print(f"wrote {args.out}")
    return 0


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ihvrnn",
        description="Train, evaluate and ablate the group-consensus trajectory model.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate synthetic scenes + truth sidecars")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train one model")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--t-pre", type=int, default=None, dest="t_pre")
    p.add_argument("--units", choices=("raw", "normalized"), default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare variants over seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", default=None, help="comma list, e.g. vrnn,hvrnn,ihvrnn")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("plot", help="render a scene or trajectory bundle to SVG")
    p.add_argument("--input", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
