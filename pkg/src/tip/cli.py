"""Command-line entry point.

Every subcommand takes the global flags ``--seed``, ``--config`` and
``--out``. The config file holds flat ``key = value`` lines naming
TrainConfig or GeneratorConfig fields; flags given on the command line win.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys

from .core import TipError

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# config file


def read_config_file(path):
    """Parse ``key = value`` lines; '#' starts a comment."""
    out = {}
    try:
        with open(path) as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    for n, raw in enumerate(lines, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected key = value")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{n}: empty key")
        out[key.replace("-", "_")] = value
    return out


def _convert(value, default, name):
    if not isinstance(value, str):
        return value
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
        if isinstance(default, tuple):
            return tuple(float(v) for v in value.replace(" ", "").split(","))
    except ValueError as exc:
        raise ConfigError(f"bad value for {name}: {value!r}") from exc
    return value


def build_config(cls, values):
    """Instantiate a frozen config dataclass from string/typed overrides."""
    proto = cls()
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in values:
            kw[f.name] = _convert(values[f.name], getattr(proto, f.name), f.name)
    try:
        return cls(**kw)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{cls.__name__}: {exc}") from exc


def _field_names(*classes):
    return {f.name for c in classes for f in dataclasses.fields(c)}


# ---------------------------------------------------------------------------
# parser


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def make_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="random seed")
    common.add_argument("--config", default=argparse.SUPPRESS, help="flat key=value config file")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="tip", parents=[common],
                                     description="Task-informed trajectory prediction toolkit")
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True

    g = sub.add_parser("gen", parents=[common], help="generate a synthetic dataset")
    g.add_argument("--n-scenes", type=int)
    g.add_argument("--geometry", choices=["Crossing", "Merging", "Oncoming"])
    g.add_argument("--t-future", type=int)

    def train_flags(p):
        p.add_argument("--data", help="dataset file written by gen")
        p.add_argument("--task", choices=["warning", "planning", "planning_altruistic"])
        p.add_argument("--alpha", type=float)
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch-size", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--k-samples", type=int)
        p.add_argument("--utility-noise-sigma", type=float)

    t = sub.add_parser("train", parents=[common], help="train one predictor")
    train_flags(t)

    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint", help="model.ckpt written by train")
    e.add_argument("--data", help="dataset file written by gen")
    e.add_argument("--task", choices=["warning", "planning", "planning_altruistic"])
    e.add_argument("--split", choices=["val", "train", "all"], default="val")

    a = sub.add_parser("sweep-alpha", parents=[common], help="train and evaluate over alpha values")
    train_flags(a)
    a.add_argument("--alphas", type=_float_list, default=[0.0, 1.0, 5.0, 20.0, 100.0])

    k = sub.add_parser("sweep-k", parents=[common], help="TIP and TAP over sample counts")
    train_flags(k)
    k.add_argument("--ks", type=_int_list, default=[1, 2, 4, 8])

    n = sub.add_parser("noise-robustness", parents=[common], help="train with noisy utilities")
    train_flags(n)
    n.add_argument("--sigmas", type=_float_list, default=[0.0, 0.25])
    return parser


# ---------------------------------------------------------------------------
# commands


def _settings(args):
    """Merge config file values with explicit flags (flags win)."""
    from .harness import TrainConfig
    from .simgen import GeneratorConfig

    values = read_config_file(args.config) if getattr(args, "config", None) else {}
    known = _field_names(TrainConfig, GeneratorConfig) | {"data", "checkpoint", "out"}
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    for key, val in vars(args).items():
        if key in ("command", "config") or val is None:
            continue
        if key == "geometry":
            key = "conflict_geometry"
        values[key] = val
    return values


def _out_dir(values):
    out = values.get("out", ".")
    os.makedirs(out, exist_ok=True)
    return out


def _load(values):
    from .simgen import read_dataset

    path = values.get("data")
    if not path:
        raise ConfigError("no dataset given (--data or 'data' in the config file)")
    return read_dataset(path)


def cmd_gen(values):
    from .simgen import GeneratorConfig, generate_dataset, write_dataset

    cfg = build_config(GeneratorConfig, values)
    out = _out_dir(values)
    path = os.path.join(out, "dataset.jsonl")
    write_dataset(generate_dataset(cfg), path, cfg)
    print(f"wrote {cfg.n_scenes} scenes to {path}")


def cmd_train(values):
    from .harness import TrainConfig, prepare, split_scenes, train

    cfg = build_config(TrainConfig, values)
    out = _out_dir(values)
    tr, _ = split_scenes(_load(values), cfg.split_seed, cfg.train_fraction)
    data = prepare(tr, cfg, with_tasks=cfg.alpha > 0)
    res = train(cfg, data=data, out_dir=out)
    last = res.log[-1]
    print(f"trained {cfg.epochs} epochs, final loss {last['loss']:.6f}; checkpoint {os.path.join(out, 'model.ckpt')}")


def cmd_eval(values, split="val"):
    from .harness import TrainConfig, evaluate, prepare, split_scenes, Predictor
    from .model import load_checkpoint

    ckpt = values.get("checkpoint")
    if not ckpt:
        raise ConfigError("no checkpoint given (--checkpoint)")
    mcfg, params, meta = load_checkpoint(ckpt)
    merged = dict(meta.get("train_config", {}))
    merged.update({k: v for k, v in values.items() if k in _field_names(TrainConfig)})
    cfg = build_config(TrainConfig, merged)
    scenes = _load(values)
    if split != "all":
        tr, va = split_scenes(scenes, cfg.split_seed, cfg.train_fraction)
        scenes = va if split == "val" else tr
    report = evaluate(Predictor(mcfg, params), prepare(scenes, cfg), cfg)
    out = _out_dir(values)
    with open(os.path.join(out, "report.txt"), "w") as fh:
        fh.write(report.to_text())
    with open(os.path.join(out, "report.csv"), "w") as fh:
        fh.write(report.to_csv())
    sys.stdout.write(report.to_text())


def _sweep(values, runner, arg, filename):
    from .harness import TrainConfig, table_csv

    cfg = build_config(TrainConfig, values)
    rows = runner(cfg, values[arg], _load(values))
    text = table_csv(rows)
    with open(os.path.join(_out_dir(values), filename), "w") as fh:
        fh.write(text)
    sys.stdout.write(text)


def main(argv=None):
    parser = make_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    from . import harness

    try:
        values = _settings(args)
        if args.command == "gen":
            cmd_gen(values)
        elif args.command == "train":
            cmd_train(values)
        elif args.command == "eval":
            cmd_eval(values, args.split)
        elif args.command == "sweep-alpha":
            _sweep(values, harness.experiment_alpha_sweep, "alphas", "alpha_sweep.csv")
        elif args.command == "sweep-k":
            _sweep(values, harness.experiment_k_sweep, "ks", "k_sweep.csv")
        elif args.command == "noise-robustness":
            _sweep(values, harness.experiment_noise, "sigmas", "noise_robustness.csv")
    except (ConfigError, harness.ConfigMismatch) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        parser.print_usage(sys.stderr)
        return EXIT_CONFIG
    except (TipError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
