"""Experiment protocols over a generated benchmark: guarded data access, the
temporal-shift (core) and spatial-shift (extended) comparisons, and the
training-data-mixture ablation.

Every read of movie data goes through a :class:`BenchmarkData` handle that
checks the requested (city, regime, split) against an explicit allow-list;
protocol runners hand their training loops a handle that can only see the
splits that setup legitimately permits, so an accidental read of held-out
data is a hard error rather than a silent leak.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    ManifestEntry,
    REGIMES,
    StaticMap,
    assemble_sample,
    evaluation_window_starts,
    load_movie,
    load_static,
    read_manifest,
    stack_to_frames,
    static_path,
)
from .evaluation import EvalReport, evaluate, naive_average_predict
from .training import CityTrainingSet, TrainConfig, build_for, train
from .unet import UNetConfig, UNetModel, forward

SplitKey = tuple[str, str, str]  # (city_id, regime, split)


class SplitAccessError(RuntimeError):
    """A protocol tried to read a split its policy forbids."""


@dataclass(frozen=True)
class BenchmarkRoles:
    train_cities: tuple[str, ...]
    core_cities: tuple[str, ...]
    extended_cities: tuple[str, ...]


def roles_from_manifest(entries: list[ManifestEntry]) -> BenchmarkRoles:
    seen: dict[str, list[str]] = {"train": [], "core": [], "extended": []}
    for e in entries:
        if e.city_id not in seen[e.role]:
            seen[e.role].append(e.city_id)
    return BenchmarkRoles(
        tuple(seen["train"]), tuple(seen["core"]), tuple(seen["extended"])
    )


class BenchmarkData:
    """Manifest-backed catalog with a split allow-list."""

    def __init__(self, root, entries: list[ManifestEntry], allowed: frozenset[SplitKey]):
        self.root = Path(root)
        self.entries = entries
        self.allowed = allowed
        self.roles = roles_from_manifest(entries)

    @classmethod
    def open(cls, root) -> "BenchmarkData":
        entries = read_manifest(root)
        every = frozenset((e.city_id, e.regime, e.split) for e in entries)
        return cls(root, entries, every)

    def restrict(self, allowed: frozenset[SplitKey]) -> "BenchmarkData":
        return BenchmarkData(self.root, self.entries, allowed)

    def _check(self, city_id: str, regime: str, split: str) -> None:
        if (city_id, regime, split) not in self.allowed:
            raise SplitAccessError(
                f"policy forbids reading split (city={city_id!r}, regime={regime!r}, "
                f"split={split!r})"
            )

    def static(self, city_id: str) -> StaticMap:
        # static rasters are published for every city in the benchmark
        return load_static(static_path(self.root, city_id), city_id)

    def movies(self, city_id: str, regime: str, split: str):
        self._check(city_id, regime, split)
        out = []
        for e in self.entries:
            if e.city_id == city_id and e.regime == regime and e.split == split:
                out.append(load_movie(self.root / e.path, city_id, e.day_index))
        if not out:
            raise SplitAccessError(
                f"no movies for (city={city_id!r}, regime={regime!r}, split={split!r})"
            )
        return out

    def training_set(self, city_id: str, regimes: tuple[str, ...]) -> CityTrainingSet:
        """All train-split movies for the given regimes, as one training set."""
        movies = []
        for regime in regimes:
            movies.extend(self.movies(city_id, regime, "train"))
        return CityTrainingSet.from_movies(self.static(city_id), movies)

    def eval_instances(
        self,
        city_id: str,
        regime: str,
        split: str = "test",
        stride: int = 24,
        last_days: int | None = None,
    ) -> list[tuple[np.ndarray, np.ndarray, int]]:
        """(input_frames[12,H,W,8], truth_frames[6,H,W,8], start) per window,
        in [0,1] unit scale, at deterministic strided starts."""
        movies = self.movies(city_id, regime, split)
        if last_days is not None:
            movies = movies[-last_days:]
        static = self.static(city_id)
        out = []
        for movie in movies:
            T = movie.frames.shape[0]
            for t in evaluation_window_starts(T, stride=stride):
                sample = assemble_sample(movie, static, t)
                inputs = movie.frames[t : t + 12].astype(np.float64) / 255.0
                truth = stack_to_frames(sample.target.astype(np.float64))
                out.append((inputs, truth, t))
        return out


# ---------------------------------------------------------------------------
# policies
# ---------------------------------------------------------------------------


def policy_core_mtl_train(roles: BenchmarkRoles) -> frozenset[SplitKey]:
    keys = {(c, r, "train") for c in roles.train_cities for r in REGIMES}
    keys |= {(c, "pre_covid", "train") for c in roles.core_cities}
    return frozenset(keys)


def policy_single_city_train(city_id: str, regimes: tuple[str, ...]) -> frozenset[SplitKey]:
    return frozenset((city_id, r, "train") for r in regimes)


def policy_core_eval(roles: BenchmarkRoles) -> frozenset[SplitKey]:
    return frozenset((c, "in_covid", "test") for c in roles.core_cities)


def policy_extended_mtl_train(roles: BenchmarkRoles) -> frozenset[SplitKey]:
    return frozenset((c, r, "train") for c in roles.train_cities for r in REGIMES)


def policy_extended_eval(roles: BenchmarkRoles) -> frozenset[SplitKey]:
    return frozenset((c, r, "test") for c in roles.extended_cities for r in REGIMES)


# ---------------------------------------------------------------------------
# prediction plumbing
# ---------------------------------------------------------------------------


def predict_instances(
    models: list[UNetModel],
    static: StaticMap,
    instances: list[tuple[np.ndarray, np.ndarray, int]],
    batch_size: int = 8,
) -> list[tuple[np.ndarray, np.ndarray]]:
    """Seed-ensemble predictions for prepared eval instances.

    Returns (prediction, truth) pairs in (6,H,W,8) unit-scale layout; a
    single-model list is plain prediction.
    """
    dtype = models[0].dtype
    static_block = (static.channels.astype(dtype) / dtype.type(255.0))
    xs = []
    for inputs, _, _ in instances:
        frames = inputs.astype(dtype)  # (12,H,W,8)
        h, w = frames.shape[1], frames.shape[2]
        x = np.concatenate(
            [frames.transpose(0, 3, 1, 2).reshape(96, h, w), static_block], axis=0
        )
        xs.append(x)
    preds: list[np.ndarray] = []
    for lo in range(0, len(xs), batch_size):
        batch = np.stack(xs[lo : lo + batch_size])
        acc = None
        for model in models:
            y = forward(model, batch).astype(np.float64)
            acc = y if acc is None else acc + y
        acc /= len(models)
        preds.extend(stack_to_frames(p) for p in acc)
    return [(pred, truth) for pred, (_, truth, _) in zip(preds, instances)]


def naive_instances(
    instances: list[tuple[np.ndarray, np.ndarray, int]],
) -> list[tuple[np.ndarray, np.ndarray]]:
    return [(naive_average_predict(inputs), truth) for inputs, truth, _ in instances]


# ---------------------------------------------------------------------------
# protocol runners
# ---------------------------------------------------------------------------


@dataclass
class ProtocolResult:
    reports: list[EvalReport]

    def by_method(self) -> dict[str, list[EvalReport]]:
        out: dict[str, list[EvalReport]] = {}
        for r in self.reports:
            out.setdefault(r.method, []).append(r)
        return out


def run_core_protocol(
    root,
    seeds: tuple[int, ...],
    arch: UNetConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    stride: int = 24,
    with_single_city: bool = True,
) -> ProtocolResult:
    """Temporal-shift comparison on the core cities' held-out in-covid data.

    Per seed: one multi-task model over (train cities, both regimes) +
    (core cities, pre-covid); optionally one per-core-city model on that
    city's pre-covid data alone. The naive-average row needs no training.
    Finishes with the seed-ensemble of the multi-task predictions.
    """
    data = BenchmarkData.open(root)
    roles = data.roles
    eval_handle = data.restrict(policy_core_eval(roles))
    instances = {
        city: eval_handle.eval_instances(city, "in_covid", "test", stride)
        for city in roles.core_cities
    }
    statics = {city: data.static(city) for city in roles.core_cities}

    reports = [
        evaluate(
            {city: naive_instances(instances[city]) for city in roles.core_cities},
            method="naive_average",
        )
    ]

    mtl_handle = data.restrict(policy_core_mtl_train(roles))
    mtl_sets = [mtl_handle.training_set(c, REGIMES) for c in roles.train_cities]
    mtl_sets += [mtl_handle.training_set(c, ("pre_covid",)) for c in roles.core_cities]

    single_sets = {}
    if with_single_city:
        for city in roles.core_cities:
            handle = data.restrict(policy_single_city_train(city, ("pre_covid",)))
            single_sets[city] = [handle.training_set(city, ("pre_covid",))]

    mtl_preds_by_seed = []
    for seed in seeds:
        model = build_for(arch, seed)
        run_dir = None if out_dir is None else Path(out_dir) / f"mtl_seed_{seed}"
        train(model, _with_seed(cfg, seed), mtl_sets, out_dir=run_dir)
        per_city = {
            city: predict_instances([model], statics[city], instances[city])
            for city in roles.core_cities
        }
        mtl_preds_by_seed.append(per_city)
        reports.append(
            evaluate(per_city, method="mtl", seed_list=(seed,))
        )

        if with_single_city:
            single_city_scores = {}
            for city in roles.core_cities:
                cm = build_for(arch, seed)
                run_dir = (
                    None if out_dir is None else Path(out_dir) / f"single_{city}_seed_{seed}"
                )
                train(cm, _with_seed(cfg, seed), single_sets[city], out_dir=run_dir)
                single_city_scores[city] = predict_instances(
                    [cm], statics[city], instances[city]
                )
            reports.append(
                evaluate(single_city_scores, method="single_city", seed_list=(seed,))
            )

    if len(seeds) > 1:
        ens = {
            city: _average_predictions([p[city] for p in mtl_preds_by_seed])
            for city in roles.core_cities
        }
        reports.append(evaluate(ens, method="mtl_ensemble", seed_list=tuple(seeds)))
    return ProtocolResult(reports)


def run_extended_protocol(
    root,
    seeds: tuple[int, ...],
    arch: UNetConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    stride: int = 24,
    with_single_city: bool = True,
) -> ProtocolResult:
    """Spatial-shift comparison: trained on the train cities only, evaluated
    on the extended cities (both regimes pooled per city). The reference
    single-model baseline trains on the first train city, both regimes."""
    data = BenchmarkData.open(root)
    roles = data.roles
    eval_handle = data.restrict(policy_extended_eval(roles))
    instances = {
        city: (
            eval_handle.eval_instances(city, "pre_covid", "test", stride)
            + eval_handle.eval_instances(city, "in_covid", "test", stride)
        )
        for city in roles.extended_cities
    }
    statics = {city: data.static(city) for city in roles.extended_cities}

    reports = [
        evaluate(
            {c: naive_instances(instances[c]) for c in roles.extended_cities},
            method="naive_average",
            regime="both",
        )
    ]

    mtl_handle = data.restrict(policy_extended_mtl_train(roles))
    mtl_sets = [mtl_handle.training_set(c, REGIMES) for c in roles.train_cities]
    proxy_city = roles.train_cities[0]
    proxy_handle = data.restrict(policy_single_city_train(proxy_city, REGIMES))
    proxy_sets = [proxy_handle.training_set(proxy_city, REGIMES)]

    mtl_preds_by_seed = []
    for seed in seeds:
        model = build_for(arch, seed)
        run_dir = None if out_dir is None else Path(out_dir) / f"mtl_seed_{seed}"
        train(model, _with_seed(cfg, seed), mtl_sets, out_dir=run_dir)
        per_city = {
            city: predict_instances([model], statics[city], instances[city])
            for city in roles.extended_cities
        }
        mtl_preds_by_seed.append(per_city)
        reports.append(evaluate(per_city, method="mtl", regime="both", seed_list=(seed,)))

        if with_single_city:
            sm = build_for(arch, seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"single_seed_{seed}"
            train(sm, _with_seed(cfg, seed), proxy_sets, out_dir=run_dir)
            single = {
                city: predict_instances([sm], statics[city], instances[city])
                for city in roles.extended_cities
            }
            reports.append(
                evaluate(single, method="single_city", regime="both", seed_list=(seed,))
            )

    if len(seeds) > 1:
        ens = {
            city: _average_predictions([p[city] for p in mtl_preds_by_seed])
            for city in roles.extended_cities
        }
        reports.append(
            evaluate(ens, method="mtl_ensemble", regime="both", seed_list=tuple(seeds))
        )
    return ProtocolResult(reports)


# ---------------------------------------------------------------------------
# training-data-mixture ablation
# ---------------------------------------------------------------------------


def mixture_definitions(roles: BenchmarkRoles) -> list[tuple[str, list[tuple[str, tuple[str, ...]]]]]:
    """The six training mixtures, validated on the target city's in-covid days.

    target = first train city; "pair" = the second one. Labels are ordered
    from no-target-data to the full mixture.
    """
    target = roles.train_cities[0]
    others = list(roles.train_cities[1:])
    pair = others[0]
    both = ("pre_covid", "in_covid")
    pre = ("pre_covid",)
    return [
        ("others_both", [(c, both) for c in others]),
        ("target_pre", [(target, pre)]),
        ("target_pre+others_pre", [(target, pre)] + [(c, pre) for c in others]),
        ("target_pre+others_in", [(target, pre)] + [(c, ("in_covid",)) for c in others]),
        ("target_pre+pair_both", [(target, pre), (pair, both)]),
        ("target_pre+others_both", [(target, pre)] + [(c, both) for c in others]),
    ]


@dataclass
class AblationResult:
    target_city: str
    scores: dict[str, dict[int, float]]  # mixture label -> seed -> mse
    reports: list[EvalReport]

    def mean_scores(self) -> dict[str, float]:
        return {label: float(np.mean(list(by_seed.values()))) for label, by_seed in self.scores.items()}

    def best_label(self, seed: int) -> str:
        return min(self.scores, key=lambda label: self.scores[label][seed])

    def worst_label(self, seed: int) -> str:
        return max(self.scores, key=lambda label: self.scores[label][seed])


def run_mixture_ablation(
    root,
    seeds: tuple[int, ...],
    arch: UNetConfig,
    cfg: TrainConfig,
    out_dir: str | Path | None = None,
    stride: int = 24,
    validation_days: int | None = 5,
) -> AblationResult:
    """Train the six mixtures and score each on the target city's in-covid
    days (held out from every mixture by the split policy)."""
    data = BenchmarkData.open(root)
    roles = data.roles
    if len(roles.train_cities) < 3:
        raise ValueError("mixture ablation needs at least 3 train cities")
    target = roles.train_cities[0]

    val_handle = data.restrict(frozenset({(target, "in_covid", "train")}))
    val_instances = val_handle.eval_instances(
        target, "in_covid", "train", stride, last_days=validation_days
    )
    target_static = data.static(target)

    scores: dict[str, dict[int, float]] = {}
    reports: list[EvalReport] = []
    for label, recipe in mixture_definitions(roles):
        allowed = frozenset(
            (city, regime, "train") for city, regimes in recipe for regime in regimes
        )
        if (target, "in_covid", "train") in allowed:
            raise SplitAccessError(
                f"mixture {label!r} would train on the validation split"
            )
        handle = data.restrict(allowed)
        sets = [handle.training_set(city, regimes) for city, regimes in recipe]
        scores[label] = {}
        for seed in seeds:
            model = build_for(arch, seed)
            run_dir = None if out_dir is None else Path(out_dir) / f"{label}_seed_{seed}"
            train(model, _with_seed(cfg, seed), sets, out_dir=run_dir)
            pairs = predict_instances([model], target_static, val_instances)
            report = evaluate(
                {target: pairs}, method=label, regime="in_covid", seed_list=(seed,)
            )
            scores[label][seed] = report.aggregate
            reports.append(report)
    return AblationResult(target, scores, reports)


def _with_seed(cfg: TrainConfig, seed: int) -> TrainConfig:
    from dataclasses import replace

    return replace(cfg, seed=seed)


def _average_predictions(
    per_seed: list[list[tuple[np.ndarray, np.ndarray]]]
) -> list[tuple[np.ndarray, np.ndarray]]:
    out = []
    for idx in range(len(per_seed[0])):
        pred = np.mean([p[idx][0] for p in per_seed], axis=0)
        out.append((pred, per_seed[0][idx][1]))
    return out
