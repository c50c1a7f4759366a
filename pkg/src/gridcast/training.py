"""Multi-task training: city-uniform sampling, the Adam loop, seed ensembles.

A training corpus is a list of :class:`CityTrainingSet`, one per city, each
holding whole-day movies plus the shared static map; samples are assembled
lazily per batch. The loss is the mean squared error in [0,1] model space
over the batch. With ``city_uniform`` sampling each batch slot picks a city
uniformly and then an instance uniformly inside it, matching an objective
that weights cities equally regardless of how many instances they have;
``pooled`` draws uniformly over the union of all instances (kept for the
training-data-mixture ablation).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import Sample, StaticMap, TrafficMovie, WindowIndex, assemble_sample, build_window_index
from .engine import Graph, adam_step, init_adam
from .unet import UNetConfig, UNetModel, build_unet, forward, forward_graph, save_checkpoint


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingDivergedError(RuntimeError):
    """Loss left the finite range; carries step, city mix and loss value."""


@dataclass
class CityTrainingSet:
    """One city's trainable movies plus its static raster and window index."""

    city_id: str
    static: StaticMap
    movies: list[TrafficMovie]
    window: WindowIndex

    @classmethod
    def from_movies(
        cls, static: StaticMap, movies: list[TrafficMovie], latest_start_cap: int = 240
    ) -> "CityTrainingSet":
        if not movies:
            raise ConfigError(f"city {static.city_id!r} has no movies")
        T = movies[0].frames.shape[0]
        return cls(static.city_id, static, movies, build_window_index(T, latest_start_cap))

    @property
    def n_instances(self) -> int:
        return len(self.movies) * len(self.window)

    def instance(self, i: int, dtype=np.float32) -> Sample:
        starts = self.window.valid_starts
        movie = self.movies[i // len(starts)]
        return assemble_sample(movie, self.static, starts[i % len(starts)], dtype=dtype)


@dataclass
class TrainConfig:
    """Optimizer and schedule settings; defaults follow the reference recipe."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 8
    epochs: int | None = None
    max_steps: int | None = None
    step_scale: float = 1.0
    seed: int = 0
    sampling: str = "city_uniform"
    checkpoint_every: int | None = None
    precision: str = "single"

    def validate(self) -> None:
        if (self.epochs is None) == (self.max_steps is None):
            raise ConfigError("exactly one of epochs / max_steps must be set")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.sampling not in ("city_uniform", "pooled"):
            raise ConfigError(f"unknown sampling mode {self.sampling!r}")
        if self.step_scale <= 0:
            raise ConfigError(f"step_scale must be positive, got {self.step_scale}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"unknown precision {self.precision!r}")


@dataclass
class RunRecord:
    losses: list[float]
    checkpoint_path: Path | None
    wall_time_s: float
    seed: int
    step_wall_ms: list[float] = field(default_factory=list)


def planned_steps(config: TrainConfig, datasets: list[CityTrainingSet]) -> int:
    """Step budget: max_steps, or epochs over the pooled instance count; then
    scaled by config.step_scale (minimum 1 step unless the budget is 0)."""
    if config.max_steps is not None:
        nominal = config.max_steps
    else:
        total = sum(d.n_instances for d in datasets)
        nominal = -(-total // config.batch_size) * config.epochs
    if nominal == 0:
        return 0
    return max(1, round(nominal * config.step_scale))


def sample_batch(
    datasets: list[CityTrainingSet],
    rng: np.random.Generator,
    mode: str = "city_uniform",
    batch_size: int = 8,
    dtype=np.float32,
) -> list[Sample]:
    """Draw one batch of samples; draw order is fixed so runs are replayable."""
    if not datasets:
        raise ConfigError("no city datasets to sample from")
    for d in datasets:
        if d.n_instances < 1:
            raise ConfigError(f"city {d.city_id!r} has no instances")
    out = []
    if mode == "city_uniform":
        for _ in range(batch_size):
            d = datasets[int(rng.integers(len(datasets)))]
            out.append(d.instance(int(rng.integers(d.n_instances)), dtype=dtype))
    elif mode == "pooled":
        counts = np.array([d.n_instances for d in datasets])
        bounds = np.cumsum(counts)
        for _ in range(batch_size):
            g = int(rng.integers(bounds[-1]))
            ci = int(np.searchsorted(bounds, g, side="right"))
            offset = g - (bounds[ci - 1] if ci else 0)
            out.append(datasets[ci].instance(int(offset), dtype=dtype))
    else:
        raise ConfigError(f"unknown sampling mode {mode!r}")
    return out


def batch_arrays(samples: list[Sample]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([s.input for s in samples])
    y = np.stack([s.target for s in samples])
    return x, y


def train(
    model: UNetModel,
    config: TrainConfig,
    datasets: list[CityTrainingSet],
    out_dir: str | Path | None = None,
) -> RunRecord:
    """Run the training loop, mutating ``model.params`` in place.

    Per step: sample a batch, forward, mean-squared-error loss, reverse
    pass, Adam update. The budget is a fixed step cap; checkpoints are
    written into ``out_dir`` every ``checkpoint_every`` steps (default: every
    10% of the budget) and at the end.
    """
    config.validate()
    if not datasets:
        raise ConfigError("training needs at least one city dataset")
    steps = planned_steps(config, datasets)
    ckpt_every = config.checkpoint_every or max(1, steps // 10)
    dtype = np.float32 if config.precision == "single" else np.float64

    out_path: Path | None = None
    if out_dir is not None:
        out_path = Path(out_dir)
        out_path.mkdir(parents=True, exist_ok=True)
        (out_path / "config.txt").write_text(_config_snapshot(config, model.config))

    rng = np.random.default_rng(config.seed)
    state = init_adam(model.params, lr=config.lr, beta1=config.beta1, beta2=config.beta2)
    losses: list[float] = []
    wall_ms: list[float] = []
    t_start = time.perf_counter()

    for step in range(steps):
        t0 = time.perf_counter()
        batch = sample_batch(datasets, rng, config.sampling, config.batch_size, dtype=dtype)
        x, y = batch_arrays(batch)
        g = Graph()
        out = forward_graph(model, g, g.input(x))
        loss_id = g.mse(out, g.input(y))
        loss = float(g.value(loss_id))
        if not np.isfinite(loss):
            mix = {}
            for s in batch:
                mix[s.city_id] = mix.get(s.city_id, 0) + 1
            raise TrainingDivergedError(
                f"non-finite loss {loss} at step {step} (batch city mix {mix})"
            )
        grads = g.backward(loss_id)
        adam_step(model.params, grads, state)
        losses.append(loss)
        wall_ms.append((time.perf_counter() - t0) * 1e3)
        if out_path is not None and (step + 1) % ckpt_every == 0 and (step + 1) < steps:
            save_checkpoint(model, out_path / f"step_{step + 1:06d}.gct")

    wall = time.perf_counter() - t_start
    ckpt: Path | None = None
    if out_path is not None:
        ckpt = out_path / "checkpoint.gct"
        save_checkpoint(model, ckpt)
        _write_loss_csv(out_path / "loss.csv", losses, wall_ms)
    return RunRecord(losses, ckpt, wall, config.seed, wall_ms)


def _config_snapshot(config: TrainConfig, arch: UNetConfig) -> str:
    lines = ["[train]"]
    for key in ("lr", "beta1", "beta2", "batch_size", "epochs", "max_steps",
                "step_scale", "seed", "sampling", "checkpoint_every", "precision"):
        value = getattr(config, key)
        lines.append(f"{key} = {value!r}" if isinstance(value, str) else f"{key} = {value}")
    lines.append("")
    lines.append("[model]")
    for key in ("depth_k", "base_filters", "in_channels", "out_channels",
                "channels_per_group", "num_groups", "seed"):
        lines.append(f"{key} = {getattr(arch, key)}")
    return "\n".join(lines) + "\n"


def _write_loss_csv(path: Path, losses: list[float], wall_ms: list[float]) -> None:
    rows = ["step,loss,wall_ms"]
    rows += [f"{i},{loss!r},{ms:.3f}" for i, (loss, ms) in enumerate(zip(losses, wall_ms))]
    path.write_text("\n".join(rows) + "\n")


def ensemble_predict(models: list[UNetModel], x: np.ndarray) -> np.ndarray:
    """Arithmetic mean of the member models' predictions."""
    if not models:
        raise ValueError("ensemble_predict needs at least one model")
    out = forward(models[0], x).astype(np.float64)
    for m in models[1:]:
        out += forward(m, x)
    return out / len(models)


# ---------------------------------------------------------------------------
# reference challenge recipes
# ---------------------------------------------------------------------------


def core_challenge_setup(
    seed: int = 0,
    base_filters: int = 16,
    step_scale: float = 1.0,
    lr: float = 1e-4,
) -> tuple[UNetConfig, TrainConfig]:
    """Deep model (4 down/up blocks) trained for 5 epochs."""
    arch = UNetConfig(depth_k=4, base_filters=base_filters, seed=seed)
    cfg = TrainConfig(lr=lr, epochs=5, step_scale=step_scale, seed=seed)
    return arch, cfg


def extended_challenge_setup(
    seed: int = 0,
    base_filters: int = 16,
    step_scale: float = 1.0,
    lr: float = 1e-4,
) -> tuple[UNetConfig, TrainConfig]:
    """Shallow model (1 down/up block) trained for a fixed 50,000-step cap."""
    arch = UNetConfig(depth_k=1, base_filters=base_filters, seed=seed)
    cfg = TrainConfig(lr=lr, max_steps=50_000, step_scale=step_scale, seed=seed)
    return arch, cfg


def build_for(arch: UNetConfig, seed: int, precision: str = "single") -> UNetModel:
    """Fresh model with the architecture's seed replaced by ``seed``."""
    return build_unet(replace(arch, seed=seed), precision=precision)
