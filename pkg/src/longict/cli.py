"""Command-line entry point orchestrating the full pipeline from a YAML config.

Hyperparameters live in the config file; flags only select regimes, paths and
overrides. Every run directory is named by a hash of the resolved
configuration, so regime sweeps never collide and a finished run is reused
instead of recomputed. Exit codes: 0 success, 1 user/config error, 2 internal
error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import evaluation, pairs, synthdata, train as train_mod
from .core import load_manifest
from .model import ModelConfig, build_network, load_checkpoint, load_into_network, save_checkpoint
from .registration import RegistrationParams

ENV_OUT_ROOT = "LONGICT_OUT_ROOT"
ENV_BACKEND = "LONGICT_BACKEND"

DONE_MARKER = "done.json"


class ConfigError(Exception):
    """User or configuration error; maps to exit code 1."""


# ---------------------------------------------------------------------------
# Config schema
# ---------------------------------------------------------------------------

_SCHEMA = {
    "seed": int,
    "out_dir": str,
    "backend": str,
    "synth": {
        "n_patients": int,
        "timepoint_range": list,
        "split_ratio": list,
        "shape": list,
        "noise_sigma": (int, float),
        "deformation_amplitude": (int, float),
        "gt_control_spacing": (int, float),
        "ggo_count_range": list,
        "cons_count_range": list,
        "growth_range": list,
        "appearance_prob": (int, float),
        "lesion_radius_range": list,
    },
    "preprocess": {
        "dataset": str,
        "slice_size": list,
        "margin_vox": int,
        "clip_range": (str, list, type(None)),
        "registration": {
            "levels": int,
            "control_spacing": (int, float, list),
            "step_size": (int, float),
            "max_iters": int,
            "bending_weight": (int, float),
            "tol": (int, float),
            "smoothing_sigma": (int, float),
        },
    },
    "train": {
        "batch_size": int,
        "lr": (int, float),
        "patience": int,
        "pretext_epochs": int,
        "finetune_epochs": int,
        "slice_step": int,
        "min_lung_fraction": (int, float),
        "count_range": list,
        "side_range": (list, type(None)),
        "model": {
            "growth_rate": int,
            "layers_per_block": int,
            "initial_features": int,
            "dropout": (int, float),
        },
    },
    "evaluate": {
        "split": str,
        "n_resamples": int,
        "qualitative": int,
    },
}

_DEFAULTS = {
    "seed": 0,
    "out_dir": "out",
    "backend": "cpu",
    "synth": {
        "n_patients": 8,
        "timepoint_range": [2, 3],
        "split_ratio": [0.7, 0.15, 0.15],
    },
    "preprocess": {"dataset": "synth", "slice_size": [128, 128], "margin_vox": 2, "clip_range": "auto"},
    "train": {
        "batch_size": 4,
        "lr": 1e-4,
        "patience": 5,
        "pretext_epochs": 100,
        "finetune_epochs": 30,
        "slice_step": 1,
        "min_lung_fraction": 0.01,
        "count_range": [16, 25],
        "side_range": None,
    },
    "evaluate": {"split": "test", "n_resamples": 1000, "qualitative": 2},
}


def _validate(doc, schema, prefix=""):
    if not isinstance(doc, dict):
        raise ConfigError(f"config section '{prefix or '<root>'}' must be a mapping")
    for key, value in doc.items():
        if key not in schema:
            raise ConfigError(f"unknown config key '{prefix}{key}'")
        spec = schema[key]
        if isinstance(spec, dict):
            _validate(value, spec, prefix=f"{prefix}{key}.")
        else:
            types = spec if isinstance(spec, tuple) else (spec,)
            if isinstance(value, bool) and bool not in types:
                raise ConfigError(f"config key '{prefix}{key}' has invalid boolean value")
            if not isinstance(value, types):
                names = "/".join(getattr(t, "__name__", str(t)) for t in types)
                raise ConfigError(f"config key '{prefix}{key}' must be {names}, got {type(value).__name__}")


def _merge(defaults: dict, overrides: dict) -> dict:
    out = dict(defaults)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = _merge(out[key], value)
        else:
            out[key] = value
    return out


def load_config(path) -> dict:
    """Parse, schema-check and resolve a config file; paths become absolute."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        doc = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except yaml.YAMLError as e:
        raise ConfigError(f"config file {path} is not valid YAML: {e}") from e
    _validate(doc, _SCHEMA)
    cfg = _merge(_DEFAULTS, doc)
    base = path.parent.resolve()
    out_root = os.environ.get(ENV_OUT_ROOT)
    cfg["out_dir"] = str(Path(out_root) if out_root else (base / cfg["out_dir"]).resolve())
    cfg["backend"] = os.environ.get(ENV_BACKEND, cfg["backend"])
    cfg["_base"] = str(base)
    ratio = cfg["synth"]["split_ratio"]
    if abs(sum(ratio) - 1.0) > 1e-6:
        raise ConfigError(f"synth.split_ratio must sum to 1, got {ratio}")
    return cfg


def _run_id(payload: dict) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:12]


def _run_dir(cfg, command: str, payload: dict) -> tuple[Path, bool]:
    rid = _run_id(payload)
    d = Path(cfg["out_dir"]) / "runs" / f"{command}-{rid}"
    done = (d / DONE_MARKER).exists()
    return d, done


def _mark_done(run_dir: Path, payload: dict) -> None:
    (run_dir / DONE_MARKER).write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Command implementations (importable; the CLI wraps these)
# ---------------------------------------------------------------------------


def _phantom_params(cfg) -> synthdata.PhantomParams:
    s = cfg["synth"]
    kwargs = {"seed": cfg["seed"]}
    mapping = {
        "shape": lambda v: tuple(v),
        "noise_sigma": float,
        "deformation_amplitude": float,
        "gt_control_spacing": float,
        "ggo_count_range": lambda v: tuple(v),
        "cons_count_range": lambda v: tuple(v),
        "growth_range": lambda v: tuple(v),
        "appearance_prob": float,
        "lesion_radius_range": lambda v: tuple(v),
    }
    for key, conv in mapping.items():
        if key in s:
            kwargs[key] = conv(s[key])
    try:
        return synthdata.PhantomParams(**kwargs)
    except ValueError as e:
        raise ConfigError(f"invalid synth parameters: {e}") from e


def cmd_synth_generate(cfg) -> Path:
    dataset_dir = Path(cfg["out_dir"]) / "dataset"
    manifest_path = dataset_dir / "manifest.json"
    if manifest_path.exists():
        print(f"dataset already present at {dataset_dir}")
        return manifest_path
    params = _phantom_params(cfg)
    s = cfg["synth"]
    synthdata.generate_dataset(
        params,
        n_patients=s["n_patients"],
        timepoint_range=tuple(s["timepoint_range"]),
        out_dir=dataset_dir,
        split_ratio=tuple(s["split_ratio"]),
    )
    print(f"wrote dataset with {s['n_patients']} patients to {dataset_dir}")
    return manifest_path


def _manifest_path(cfg) -> Path:
    ds = cfg["preprocess"]["dataset"]
    if ds == "synth":
        return Path(cfg["out_dir"]) / "dataset" / "manifest.json"
    p = Path(ds)
    return p if p.is_absolute() else Path(cfg["_base"]) / p


def _preprocess_config(cfg) -> pairs.PreprocessConfig:
    p = cfg["preprocess"]
    reg_cfg = p.get("registration", {})
    clip = p["clip_range"]
    if isinstance(clip, list):
        clip = tuple(float(v) for v in clip)
    try:
        reg = RegistrationParams(**{
            k: (tuple(v) if isinstance(v, list) else v) for k, v in reg_cfg.items()
        })
        return pairs.PreprocessConfig(
            slice_size=tuple(p["slice_size"]),
            margin_vox=p["margin_vox"],
            clip_range=clip,
            registration=reg,
        )
    except (TypeError, ValueError) as e:
        raise ConfigError(f"invalid preprocess parameters: {e}") from e


def cmd_preprocess(cfg) -> Path:
    manifest_path = _manifest_path(cfg)
    if not manifest_path.exists():
        raise ConfigError(f"manifest not found at {manifest_path}; run 'synth-generate' first")
    manifest = load_manifest(manifest_path)
    manifest.validate()
    cache_dir = Path(cfg["out_dir"]) / "cache"
    pairs.build_pair_cache(manifest, cache_dir, _preprocess_config(cfg), log=print)
    return cache_dir


def _split_slices(cfg, split: str):
    cache_dir = Path(cfg["out_dir"]) / "cache"
    if not (cache_dir / "index.json").exists():
        raise ConfigError(f"pair cache not found at {cache_dir}; run 'preprocess' first")
    t = cfg["train"]
    return pairs.load_split_slices(
        cache_dir, split, min_lung_fraction=t["min_lung_fraction"], slice_step=t["slice_step"]
    )


def _model_config(cfg) -> Optional[ModelConfig]:
    m = cfg["train"].get("model")
    if not m:
        return None
    try:
        return ModelConfig(**m)
    except ValueError as e:
        raise ConfigError(f"invalid model parameters: {e}") from e


def _train_config(cfg, task: str, longitudinal: bool) -> train_mod.TrainConfig:
    t = cfg["train"]
    epochs = t["pretext_epochs"] if task in train_mod.PRETEXT_TASKS else t["finetune_epochs"]
    try:
        return train_mod.TrainConfig(
            task=task,
            longitudinal=longitudinal,
            max_epochs=epochs,
            batch_size=t["batch_size"],
            lr=float(t["lr"]),
            patience=t["patience"],
            seed=cfg["seed"],
            model=_model_config(cfg),
            count_range=tuple(t["count_range"]),
            side_range=None if t["side_range"] is None else tuple(t["side_range"]),
        )
    except ValueError as e:
        raise ConfigError(f"invalid train parameters: {e}") from e


def _train_command(cfg, command: str, task: str, longitudinal: bool, init_path: Optional[str]) -> Path:
    config = _train_config(cfg, task, longitudinal)
    payload = {
        "command": command,
        "config": config.to_json(),
        "init": str(init_path) if init_path else None,
        "preprocess": {"dataset": cfg["preprocess"]["dataset"], "slice_size": cfg["preprocess"]["slice_size"]},
    }
    run_dir, done = _run_dir(cfg, command, payload)
    if done:
        print(f"run already complete: {run_dir}")
        return run_dir
    init = None
    if init_path:
        p = Path(init_path)
        if not p.exists():
            raise ConfigError(f"init checkpoint not found: {p}")
        init = load_checkpoint(p)
    train_slices = _split_slices(cfg, "train")
    val_slices = _split_slices(cfg, "val")
    if task in train_mod.PRETEXT_TASKS:
        ckpt, log = train_mod.pretrain(config, train_slices, val_slices)
    elif task == train_mod.TASK_SEG:
        ckpt, log = train_mod.finetune_segmentation(config, train_slices, val_slices, init)
    else:
        ckpt, log = train_mod.finetune_classification(config, train_slices, val_slices, init)
    run_dir.mkdir(parents=True, exist_ok=True)
    save_checkpoint(ckpt, run_dir / "checkpoint.ckpt.npz")
    train_mod.save_train_log(log, run_dir / "train_log.jsonl")
    (run_dir / "run.json").write_text(json.dumps(payload, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    _mark_done(run_dir, {"selected_epoch": log.selected_epoch, "wall_time_s": log.wall_time_s})
    print(
        f"{command}: task={task} variant={'longitudinal' if longitudinal else 'static'} "
        f"selected epoch {log.selected_epoch}, checkpoint at {run_dir}"
    )
    return run_dir


def cmd_pretrain(cfg, task: str, longitudinal: bool) -> Path:
    if task not in train_mod.PRETEXT_TASKS:
        raise ConfigError(f"pretrain task must be one of {train_mod.PRETEXT_TASKS}, got {task!r}")
    return _train_command(cfg, "pretrain", task, longitudinal, None)


def cmd_finetune_seg(cfg, longitudinal: bool, init_path: Optional[str]) -> Path:
    return _train_command(cfg, "finetune-seg", train_mod.TASK_SEG, longitudinal, init_path)


def cmd_finetune_cls(cfg, longitudinal: bool, init_path: Optional[str]) -> Path:
    return _train_command(cfg, "finetune-cls", train_mod.TASK_CLS, longitudinal, init_path)


def cmd_evaluate(cfg, checkpoint_path: str) -> Path:
    ckpt_file = Path(checkpoint_path)
    if ckpt_file.is_dir():
        ckpt_file = ckpt_file / "checkpoint.ckpt.npz"
    if not ckpt_file.exists():
        raise ConfigError(f"checkpoint not found: {ckpt_file}; run a finetune command first")
    ckpt = load_checkpoint(ckpt_file)
    task = ckpt.metadata.get("task")
    if task not in (train_mod.TASK_SEG, train_mod.TASK_CLS):
        raise ConfigError(f"evaluate needs a finetuned checkpoint, got task {task!r}")
    longitudinal = bool(ckpt.metadata.get("longitudinal", True))
    pretext = ckpt.metadata.get("pretext", "none")
    split = cfg["evaluate"]["split"]
    payload = {
        "command": "evaluate",
        "checkpoint": str(ckpt_file),
        "split": split,
        "n_resamples": cfg["evaluate"]["n_resamples"],
        "seed": cfg["seed"],
    }
    run_dir, done = _run_dir(cfg, "evaluate", payload)
    if done:
        print(f"evaluation already complete: {run_dir}")
        return run_dir
    slices = _split_slices(cfg, split)
    if not slices:
        raise ConfigError(f"no usable slices in split {split!r}")
    net = build_network(ckpt.config, seed=cfg["seed"])
    load_into_network(ckpt, net)
    rng = np.random.default_rng(np.random.SeedSequence([cfg["seed"], 2024]))
    run_dir.mkdir(parents=True, exist_ok=True)
    produced = []
    if task == train_mod.TASK_SEG:
        result = evaluation.evaluate_segmentation(
            net, slices, longitudinal, n_resamples=cfg["evaluate"]["n_resamples"], rng=rng
        )
        doc = {
            "kind": "seg",
            "variant": "longitudinal" if longitudinal else "static",
            "pretext": pretext,
            "split": split,
            "split_note": f"evaluated on the held-out '{split}' split only",
            **result,
        }
        out = run_dir / "eval_seg.json"
        out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        produced.append(out.name)
        produced += _qualitative_panels(cfg, net, slices, longitudinal, run_dir)
        headline = result["metrics"]["overall_micro"]
    else:
        result = evaluation.evaluate_classification(
            net, slices, longitudinal, n_resamples=cfg["evaluate"]["n_resamples"], rng=rng
        )
        doc = {
            "kind": "cls",
            "variant": "longitudinal" if longitudinal else "static",
            "pretext": pretext,
            "split": split,
            "split_note": f"evaluated on the held-out '{split}' split only",
            **result,
        }
        out = run_dir / "eval_cls.json"
        out.write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n", encoding="utf-8")
        produced.append(out.name)
        headline = result["metrics"]["acc_overall"]
    (run_dir / "files.json").write_text(json.dumps({"files": produced}, indent=1) + "\n", encoding="utf-8")
    _mark_done(run_dir, payload)
    if headline:
        print(f"evaluate [{task}/{pretext}]: headline {headline['mean']:.3f} +/- {headline['std']:.3f} -> {run_dir}")
    return run_dir


def _qualitative_panels(cfg, net, slices, longitudinal, run_dir) -> list[str]:
    count = cfg["evaluate"]["qualitative"]
    if count <= 0:
        return []
    # prefer slices that actually contain pathology
    candidates = [s for s in slices if s.target_seg is not None and (s.target_seg >= 2).any()]
    candidates = candidates[:count] or slices[:count]
    preds = evaluation._predict_seg(net, candidates, longitudinal)
    names = []
    for k, (s, pred) in enumerate(zip(candidates, preds)):
        name = f"qualitative_{k}_{s.patient_id}_z{s.slice_index}.png"
        evaluation.render_qualitative(s, pred, s.target_seg, run_dir / name)
        names.append(name)
    return names


def cmd_report(cfg) -> Path:
    runs = Path(cfg["out_dir"]) / "runs"
    if not runs.exists():
        raise ConfigError(f"no runs directory under {cfg['out_dir']}; evaluate checkpoints first")
    out = Path(cfg["out_dir"]) / "reports"
    _, _, written = evaluation.build_reports(runs, out)
    print(f"wrote {len(written)} report files to {out}")
    return out


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _build_parser() -> _Parser:
    parser = _Parser(prog="longict", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="path to the YAML run configuration")
        return p

    add("synth-generate", "generate the synthetic longitudinal dataset")
    add("preprocess", "crop, normalize and register all longitudinal pairs")

    p = add("pretrain", "self-supervised restoration pretraining")
    p.add_argument("--task", required=True, choices=list(train_mod.PRETEXT_TASKS))
    p.add_argument("--variant", choices=["static", "longitudinal"], default="longitudinal")

    p = add("finetune-seg", "train 4-class segmentation")
    p.add_argument("--variant", choices=["static", "longitudinal"], default="longitudinal")
    p.add_argument("--init", default=None, help="pretraining run dir or checkpoint path")

    p = add("finetune-cls", "train 2-label presence classification")
    p.add_argument("--variant", choices=["static", "longitudinal"], default="longitudinal")
    p.add_argument("--init", default=None, help="pretraining run dir or checkpoint path")

    p = add("evaluate", "evaluate a finetuned checkpoint on the held-out split")
    p.add_argument("--checkpoint", required=True, help="finetune run dir or checkpoint path")

    add("report", "aggregate evaluations into the comparison tables")
    return parser


def _resolve_init(init: Optional[str]) -> Optional[str]:
    if init in (None, "", "none"):
        return None
    p = Path(init)
    if p.is_dir():
        p = p / "checkpoint.ckpt.npz"
    return str(p)


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
        cfg = load_config(args.config)
        if args.command == "synth-generate":
            cmd_synth_generate(cfg)
        elif args.command == "preprocess":
            cmd_preprocess(cfg)
        elif args.command == "pretrain":
            cmd_pretrain(cfg, args.task, args.variant == "longitudinal")
        elif args.command == "finetune-seg":
            cmd_finetune_seg(cfg, args.variant == "longitudinal", _resolve_init(args.init))
        elif args.command == "finetune-cls":
            cmd_finetune_cls(cfg, args.variant == "longitudinal", _resolve_init(args.init))
        elif args.command == "evaluate":
            cmd_evaluate(cfg, args.checkpoint)
        elif args.command == "report":
            cmd_report(cfg)
        return 0
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 2


if __name__ == "__main__":
    sys.exit(main())
