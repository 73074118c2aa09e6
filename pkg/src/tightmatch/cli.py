"""Config-driven experiment runner.

Subcommands: train, audit, ablate, adist, gendata, print-config.
Experiments are described by a single JSON config; unknown keys are a
load-time error so typos never silently fall back to defaults.
"""

from __future__ import annotations

import argparse
import copy
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import analysis, datasets, trainer
from .divergence import SampleSet, lemma_audit
from .models import AtmModel, MlpSpec


class ConfigError(Exception):
    pass


DEFAULT_CONFIG = {
    "data": {
        "generator": "two_moons",   # or null when loading from files
        "n": 1000,
        "noise": 0.1,
        "seed": 0,
        "target_seed": 1,
        "shift": {"kind": "rotation", "magnitude": 35.0, "noise": 0.0},
        "source_csv": None,
        "target_csv": None,
        "source_idx": None,         # [image_path, label_path]
        "target_idx": None,
        "standardize": True,
    },
    "model": {
        "layer_widths": [2, 32, 16],
        "n_classes": 2,
        "disc_hidden": 32,
    },
    "train": {
        "alpha": 0.01,
        "lam": 1.0,
        "lr": 0.03,
        "momentum": 0.9,
        "weight_decay": 5e-4,
        "batch_size": 32,
        "max_epochs": 300,
        "seed": 0,
        "term_mask": [True, True, True],
        "grl_coeff": 1.0,
        "grl_ramp": False,
        "lr_decay": [10.0, 0.75],
    },
    "analysis": {
        "seeds": [0, 1, 2],
        "out_dir": "out",
    },
}


def _merge(defaults, override, path="config"):
    if not isinstance(override, dict):
        raise ConfigError(f"{path}: expected an object")
    merged = copy.deepcopy(defaults)
    for key, value in override.items():
        if key not in defaults:
            raise ConfigError(f"{path}: unknown key {key!r}")
        if isinstance(defaults[key], dict) and isinstance(value, dict):
            merged[key] = _merge(defaults[key], value, f"{path}.{key}")
        else:
            merged[key] = value
    return merged


def load_config(path) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ConfigError(f"{path}: invalid JSON at line {err.lineno}, column {err.colno}") from None
    return _merge(DEFAULT_CONFIG, raw)


def build_data(data_cfg):
    """Return (source, target) sample sets per the data section."""
    if data_cfg["source_csv"] or data_cfg["target_csv"]:
        if not (data_cfg["source_csv"] and data_cfg["target_csv"]):
            raise ConfigError("source_csv and target_csv must both be set")
        source = datasets.load_csv(data_cfg["source_csv"])
        target = datasets.load_csv(data_cfg["target_csv"])
    elif data_cfg["source_idx"] or data_cfg["target_idx"]:
        if not (data_cfg["source_idx"] and data_cfg["target_idx"]):
            raise ConfigError("source_idx and target_idx must both be set")
        source = datasets.load_idx(*data_cfg["source_idx"])
        target = datasets.load_idx(*data_cfg["target_idx"])
    elif data_cfg["generator"] == "two_moons":
        source = datasets.gen_two_moons(data_cfg["n"], data_cfg["noise"], data_cfg["seed"])
        target = datasets.gen_two_moons(data_cfg["n"], data_cfg["noise"], data_cfg["target_seed"])
        shift = data_cfg["shift"]
        if shift:
            spec = datasets.ShiftSpec(kind=shift.get("kind", "rotation"),
                                      magnitude=shift.get("magnitude", 0.0),
                                      noise=shift.get("noise", 0.0),
                                      direction=shift.get("direction"))
            target = datasets.apply_shift(target, spec, seed=data_cfg["target_seed"])
    else:
        raise ConfigError(f"unknown generator {data_cfg['generator']!r}")

    source.domain_tag = "source"
    target.domain_tag = "target"
    if data_cfg["standardize"]:
        # target reuses source statistics so the shift stays in the data
        source, stats = datasets.standardize(source)
        target, _ = datasets.standardize(target, stats)
    return source, target


def build_model(model_cfg, seed, grl_coeff=1.0) -> AtmModel:
    return AtmModel(MlpSpec(tuple(model_cfg["layer_widths"])),
                    model_cfg["n_classes"],
                    disc_hidden=model_cfg["disc_hidden"],
                    grl_coeff=grl_coeff, seed=seed)


def build_train_config(train_cfg, **overrides) -> trainer.TrainConfig:
    kwargs = dict(train_cfg)
    kwargs["term_mask"] = tuple(kwargs["term_mask"])
    if kwargs["lr_decay"] is not None:
        kwargs["lr_decay"] = tuple(kwargs["lr_decay"])
    kwargs.update(overrides)
    return trainer.TrainConfig(**kwargs)


def cmd_train(args) -> int:
    config = load_config(args.config)
    out = Path(args.out or config["analysis"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    source, target = build_data(config["data"])
    tc = build_train_config(config["train"])
    model = build_model(config["model"], tc.seed, grl_coeff=tc.grl_coeff)

    started = time.perf_counter()
    model, log = trainer.run(source, target, tc, model)
    wall = time.perf_counter() - started

    log.write_csv(out / "metrics.csv")
    model.save(out / "model.json")
    summary = {
        "epochs_run": len(log.rows),
        "source_acc": log.rows[-1][5] if log.rows else None,
        "target_acc": log.rows[-1][6] if log.rows else None,
        "wall_time_s": wall,
        "config": config,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n")
    print(f"wrote {out / 'metrics.csv'}, {out / 'summary.json'}, {out / 'model.json'}")
    return 0


def cmd_audit(args) -> int:
    report = lemma_audit(args.trials, args.alphabet, args.seed)
    text = report.to_json() + "\n"
    print(text, end="")
    if args.out:
        Path(args.out).write_text(text)
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out = Path(args.out or config["analysis"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    source, target = build_data(config["data"])
    base = build_train_config(config["train"])
    seeds = config["analysis"]["seeds"]
    factory = lambda seed: build_model(config["model"], seed, grl_coeff=base.grl_coeff)

    cells = analysis.ablation_grid(source, target, base, seeds, factory)
    (out / "ablation.csv").write_text(analysis.ablation_csv(cells, seeds))
    failures = [e for cell in cells for e in cell.errors if e]
    for cell in cells:
        print(f"{cell.setting_id} mask={cell.term_mask} mean_acc={cell.mean_acc:.4f}")
    print(f"wrote {out / 'ablation.csv'}")
    return 1 if failures else 0


def cmd_adist(args) -> int:
    config = load_config(args.config)
    out = Path(args.out or config["analysis"]["out_dir"])
    out.mkdir(parents=True, exist_ok=True)

    source, target = build_data(config["data"])
    results = []
    for seed in config["analysis"]["seeds"]:
        tc = build_train_config(config["train"], seed=seed)
        model = build_model(config["model"], seed, grl_coeff=tc.grl_coeff)
        model, _ = trainer.run(source, target, tc, model)
        pre = analysis.a_distance(source.features, target.features, seed)
        from .diffcore import Tensor
        fs = model.forward_features(Tensor(source.features)).data
        ft = model.forward_features(Tensor(target.features)).data
        post = analysis.a_distance(fs, ft, seed)
        results.append({"seed": seed, "pre_adaptation": pre, "post_adaptation": post})
        print(f"seed {seed}: pre={pre:.4f} post={post:.4f}")
    (out / "adist.json").write_text(json.dumps(results, indent=2) + "\n")
    print(f"wrote {out / 'adist.json'}")
    return 0


def cmd_gendata(args) -> int:
    s = datasets.gen_two_moons(args.n, args.noise, args.seed)
    if args.rotate:
        s = datasets.apply_shift(
            s, datasets.ShiftSpec(kind="rotation", magnitude=args.rotate), seed=args.seed)
    lines = []
    for row, label in zip(s.features, s.labels):
        lines.append(",".join([format(v, ".17g") for v in row] + [str(int(label))]))
    Path(args.out).write_text("\n".join(lines) + "\n")
    print(f"wrote {args.out}")
    return 0


def cmd_print_config(args) -> int:
    config = load_config(args.config) if args.config else copy.deepcopy(DEFAULT_CONFIG)
    print(json.dumps(config, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tightmatch",
                                     description="Adversarial tight-match experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the full training loop")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("audit", help="empirical audit of the divergence bounds")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--alphabet", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_audit)

    p = sub.add_parser("ablate", help="8-cell term-mask ablation grid")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("adist", help="pre/post adaptation proxy A-distance")
    p.add_argument("config")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_adist)

    p = sub.add_parser("gendata", help="write a synthetic dataset as CSV")
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--rotate", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gendata)

    p = sub.add_parser("print-config", help="print the (merged) configuration")
    p.add_argument("config", nargs="?", default=None)
    p.set_defaults(func=cmd_print_config)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, datasets.DatasetError, trainer.TrainError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
