"""Command-line entry point: generate / train / predict / evaluate / ensemble.

Commands compose purely through files (the dataset tree, checkpoint
containers, prediction containers, CSV reports) and print one deterministic
summary line each. Exit codes: 0 success, 2 config/validation error,
3 runtime error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from . import __version__
from .container import ContainerError, read_tensor_file, write_tensor_file
from .data import REGIMES
from .evaluation import (
    evaluate,
    format_report_table,
    naive_average_predict,
    write_report_csv,
)
from .protocols import (
    BenchmarkData,
    SplitAccessError,
    policy_core_eval,
    policy_core_mtl_train,
    policy_extended_eval,
    policy_extended_mtl_train,
    policy_single_city_train,
)
from .synth import default_city_specs, default_layout, make_benchmark
from .training import (
    ConfigError,
    TrainConfig,
    TrainingDivergedError,
    build_for,
    train,
)
from .unet import ConfigError as ArchConfigError
from .unet import UNetConfig, load_checkpoint

PAPER_GRID = (495, 436)
PAPER_TRAIN_DAYS = 181
CHALLENGES = ("core", "extended")
METHODS = ("mtl", "single_city")
SPLITS = ("core_test", "extended_test")


class ValidationError(Exception):
    """Config violations; message lists every violated field."""


def _load_toml(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"config file not found: {p}")
    with open(p, "rb") as f:
        return tomllib.load(f)


def _collect(errors: list[str], condition: bool, message: str) -> None:
    if not condition:
        errors.append(message)


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    raw = _load_toml(args.config) if args.config else {}
    section = raw.get("benchmark", {})
    grid = section.get("grid", PAPER_GRID if args.paper_scale else 64)
    if isinstance(grid, int):
        grid = (grid, grid)
    layout = default_layout(
        n_train=section.get("train_cities", 4),
        n_core=section.get("core_cities", 4),
        n_extended=section.get("extended_cities", 2),
        train_days=section.get("train_days", PAPER_TRAIN_DAYS if args.paper_scale else 20),
        test_days=section.get("test_days", 3),
    )
    specs = default_city_specs(
        layout,
        seed=section.get("seed", 0),
        h=grid[0],
        w=grid[1],
        covid_volume_factor=section.get("covid_volume_factor", 0.6),
        noise_level=section.get("noise_level", 0.03),
    )
    entries = make_benchmark(args.out, layout, specs)
    print(
        f"generate out={args.out} cities={len(layout.all_cities)} "
        f"movies={len(entries)} grid={grid[0]}x{grid[1]} seed={section.get('seed', 0)}"
    )
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _parse_experiment(raw: dict, seeds_override: list[int] | None):
    errors: list[str] = []
    exp = raw.get("experiment", {})
    data_root = exp.get("data_root")
    _collect(errors, data_root is not None, "experiment.data_root: required")
    challenge = exp.get("challenge", "core")
    _collect(
        errors, challenge in CHALLENGES, f"experiment.challenge: {challenge!r} not in {CHALLENGES}"
    )
    method = exp.get("method", "mtl")
    _collect(errors, method in METHODS, f"experiment.method: {method!r} not in {METHODS}")
    seeds = seeds_override if seeds_override is not None else exp.get("seeds", [0])
    _collect(errors, bool(seeds), "experiment.seeds: must be non-empty")

    if data_root is not None and not Path(data_root).exists():
        errors.append(f"experiment.data_root: path {data_root!r} does not exist")

    model_raw = raw.get("model", {})
    default_depth = 4 if challenge == "core" else 1
    arch = UNetConfig(
        depth_k=model_raw.get("depth_k", default_depth),
        base_filters=model_raw.get("base_filters", 16),
        in_channels=model_raw.get("in_channels", 105),
        out_channels=model_raw.get("out_channels", 48),
        channels_per_group=model_raw.get("channels_per_group", 8),
        num_groups=model_raw.get("num_groups"),
    )
    train_raw = raw.get("train", {})
    schedule: dict = {}
    if "max_steps" in train_raw:
        schedule["max_steps"] = train_raw["max_steps"]
    if "epochs" in train_raw:
        schedule["epochs"] = train_raw["epochs"]
    if not schedule:
        schedule = {"epochs": 5} if challenge == "core" else {"max_steps": 50_000}
    cfg = TrainConfig(
        lr=train_raw.get("lr", 1e-4),
        beta1=train_raw.get("beta1", 0.9),
        beta2=train_raw.get("beta2", 0.999),
        batch_size=train_raw.get("batch_size", 8),
        step_scale=train_raw.get("step_scale", 1.0),
        sampling=train_raw.get("sampling", "city_uniform"),
        checkpoint_every=train_raw.get("checkpoint_every"),
        **schedule,
    )
    try:
        arch.validate()
        cfg.validate()
    except (ConfigError, ArchConfigError) as e:
        errors.append(str(e))
    if errors:
        raise ValidationError("invalid config:\n  " + "\n  ".join(errors))
    return data_root, challenge, method, [int(s) for s in seeds], arch, cfg


def _training_sets(data: BenchmarkData, challenge: str, method: str):
    """Named training corpora per the challenge's split policy."""
    roles = data.roles
    if challenge == "core":
        if method == "mtl":
            handle = data.restrict(policy_core_mtl_train(roles))
            sets = [handle.training_set(c, REGIMES) for c in roles.train_cities]
            sets += [handle.training_set(c, ("pre_covid",)) for c in roles.core_cities]
            return {"": sets}
        out = {}
        for city in roles.core_cities:
            handle = data.restrict(policy_single_city_train(city, ("pre_covid",)))
            out[city] = [handle.training_set(city, ("pre_covid",))]
        return out
    if method == "mtl":
        handle = data.restrict(policy_extended_mtl_train(roles))
        return {"": [handle.training_set(c, REGIMES) for c in roles.train_cities]}
    proxy = roles.train_cities[0]
    handle = data.restrict(policy_single_city_train(proxy, REGIMES))
    return {"": [handle.training_set(proxy, REGIMES)]}


def cmd_train(args) -> int:
    raw = _load_toml(args.config)
    seeds_override = [int(s) for s in args.seeds.split(",")] if args.seeds else None
    data_root, challenge, method, seeds, arch, cfg = _parse_experiment(raw, seeds_override)
    data = BenchmarkData.open(data_root)
    corpora = _training_sets(data, challenge, method)
    out_root = Path(args.out)
    for seed in seeds:
        for name, sets in corpora.items():
            run_dir = out_root / f"seed_{seed}" / name if name else out_root / f"seed_{seed}"
            model = build_for(arch, seed)
            record = train(model, replace(cfg, seed=seed), sets, out_dir=run_dir)
            final = record.losses[-1] if record.losses else float("nan")
            tag = f" city={name}" if name else ""
            print(
                f"train challenge={challenge} method={method} seed={seed}{tag} "
                f"steps={len(record.losses)} final_loss={final!r} out={run_dir}"
            )
    return 0


# ---------------------------------------------------------------------------
# predict
# ---------------------------------------------------------------------------


def _eval_split(data: BenchmarkData, split: str, stride: int):
    """Instances per (city), pooled over the split's regimes."""
    roles = data.roles
    if split == "core_test":
        handle = data.restrict(policy_core_eval(roles))
        return {
            city: handle.eval_instances(city, "in_covid", "test", stride)
            for city in roles.core_cities
        }
    handle = data.restrict(policy_extended_eval(roles))
    return {
        city: handle.eval_instances(city, "pre_covid", "test", stride)
        + handle.eval_instances(city, "in_covid", "test", stride)
        for city in roles.extended_cities
    }


def _checkpoints_for(path: Path, cities) -> dict[str, Path]:
    """A checkpoint file serves every city; a directory maps city -> model."""
    if path.is_file():
        return {city: path for city in cities}
    out = {}
    for city in cities:
        candidate = path / city / "checkpoint.gct"
        if not candidate.exists():
            raise FileNotFoundError(f"no checkpoint for city {city!r} at {candidate}")
        out[city] = candidate
    return out


def cmd_predict(args) -> int:
    from .protocols import predict_instances

    data = BenchmarkData.open(args.data)
    instances = _eval_split(data, args.split, args.stride)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    n_total = 0
    if args.method == "naive":
        for city, inst in instances.items():
            preds = np.stack([naive_average_predict(x) for x, _, _ in inst]).astype(np.float32)
            _write_predictions(out_dir / f"{city}.gct", preds, inst)
            n_total += len(inst)
    else:
        if not args.checkpoint:
            raise ValidationError("invalid config:\n  --checkpoint required unless --method naive")
        ckpt_path = Path(args.checkpoint)
        if not ckpt_path.exists():
            raise FileNotFoundError(f"checkpoint path not found: {ckpt_path}")
        per_city = _checkpoints_for(ckpt_path, instances.keys())
        models = {}
        for city, p in per_city.items():
            models.setdefault(p, load_checkpoint(p))
        for city, inst in instances.items():
            model = models[per_city[city]]
            pairs = predict_instances([model], data.static(city), inst)
            preds = np.stack([p for p, _ in pairs]).astype(np.float32)
            _write_predictions(out_dir / f"{city}.gct", preds, inst)
            n_total += len(inst)
    print(
        f"predict split={args.split} method={args.method} cities={len(instances)} "
        f"instances={n_total} out={out_dir}"
    )
    return 0


def _write_predictions(path: Path, preds: np.ndarray, instances) -> None:
    starts = np.array([t for _, _, t in instances], dtype=np.float64)
    write_tensor_file(path, {"pred": preds, "start": starts})


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    data = BenchmarkData.open(args.data)
    instances = _eval_split(data, args.split, args.stride)
    regime = "in_covid" if args.split == "core_test" else "both"
    reports = []
    for label_dir in args.pred:
        label, _, pred_dir = label_dir.partition("=")
        if not pred_dir:
            label, pred_dir = Path(label_dir).name, label_dir
        city_pairs = {}
        for city, inst in instances.items():
            pfile = Path(pred_dir) / f"{city}.gct"
            if not pfile.exists():
                raise FileNotFoundError(f"prediction file missing: {pfile}")
            stored = read_tensor_file(pfile)
            preds = stored["pred"]
            starts = stored["start"].astype(int)
            expected = np.array([t for _, _, t in inst])
            if preds.shape[0] != len(inst) or not np.array_equal(starts, expected):
                raise ValidationError(
                    f"invalid config:\n  predictions in {pfile} do not match "
                    f"split {args.split} (instance starts differ)"
                )
            city_pairs[city] = [
                (preds[i].astype(np.float64), truth) for i, (_, truth, _) in enumerate(inst)
            ]
        reports.append(evaluate(city_pairs, scale=args.scale, method=label, regime=regime))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_report_csv(out_dir / "report.csv", reports)
    (out_dir / "report.txt").write_text(format_report_table(reports) + "\n")
    for report in reports:
        print(
            f"evaluate split={args.split} method={report.method} scale={args.scale} "
            f"aggregate={report.aggregate!r}"
        )
    return 0


# ---------------------------------------------------------------------------
# ensemble
# ---------------------------------------------------------------------------


def cmd_ensemble(args) -> int:
    dirs = [Path(d) for d in args.pred_dirs]
    for d in dirs:
        if not d.is_dir():
            raise FileNotFoundError(f"prediction directory not found: {d}")
    city_files = sorted(p.name for p in dirs[0].glob("*.gct"))
    if not city_files:
        raise ValidationError("invalid config:\n  first prediction directory has no .gct files")
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in city_files:
        stacks = []
        starts_ref = None
        for d in dirs:
            f = d / name
            if not f.exists():
                raise FileNotFoundError(f"prediction file missing from member: {f}")
            stored = read_tensor_file(f)
            stacks.append(stored["pred"].astype(np.float64))
            if starts_ref is None:
                starts_ref = stored["start"]
            elif not np.array_equal(starts_ref, stored["start"]):
                raise ValidationError(
                    f"invalid config:\n  member predictions disagree on instances for {name}"
                )
        mean = np.mean(stacks, axis=0).astype(np.float32)
        write_tensor_file(out_dir / name, {"pred": mean, "start": starts_ref})
    print(f"ensemble members={len(dirs)} cities={len(city_files)} out={out_dir}")
    return 0


# ---------------------------------------------------------------------------
# wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridcast",
        description="Desk-scale grid traffic forecasting benchmark and U-Net trainer.",
    )
    parser.add_argument("--version", action="version", version=f"gridcast {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic benchmark dataset")
    p.add_argument("--config", help="TOML with a [benchmark] section")
    p.add_argument("--out", required=True, help="dataset root to create")
    p.add_argument("--paper-scale", action="store_true",
                   help="full 495x436 grid and 181 train days")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train models per the experiment config")
    p.add_argument("--config", required=True, help="TOML experiment config")
    p.add_argument("--out", required=True, help="run directory root")
    p.add_argument("--seeds", help="comma-separated seed list (overrides config)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="write predictions for a test split")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", required=True, choices=SPLITS)
    p.add_argument("--checkpoint", help="checkpoint file, or run dir with per-city models")
    p.add_argument("--method", default="model", choices=("model", "naive"))
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score prediction dirs against a test split")
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--split", required=True, choices=SPLITS)
    p.add_argument("--pred", action="append", required=True,
                   metavar="LABEL=DIR", help="repeatable prediction source")
    p.add_argument("--scale", default="byte", choices=("unit", "byte"))
    p.add_argument("--stride", type=int, default=24)
    p.add_argument("--out", required=True, help="report directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="average prediction directories")
    p.add_argument("pred_dirs", nargs="+", help="member prediction directories")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ensemble)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, ConfigError, ArchConfigError, ValueError, FileExistsError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (
        FileNotFoundError,
        SplitAccessError,
        TrainingDivergedError,
        ContainerError,
        RuntimeError,
    ) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
