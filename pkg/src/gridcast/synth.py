"""Procedural cities: road rasters and daily traffic movies with rush-hour
structure and controllable regime shifts.

Every city is a pure function of its seeds. The static map is an arterial
grid plus random branches; volume follows base_volume x diurnal profile
(a floor plus two rush-hour bumps) x road density x multiplicative noise,
and speed drops with local volume. The in-covid regime multiplies volume
by ``covid_volume_factor`` and flattens the rush-hour bumps by the same
factor, so a factor of 1 reproduces the pre-covid movie bit for bit.

Channel layout per frame: (volume, speed) pairs for each heading quadrant
NE, SE, SW, NW -> volume channels 0,2,4,6 and speed channels 1,3,5,7.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    BINS_PER_DAY,
    ManifestEntry,
    REGIME_YEAR,
    REGIMES,
    StaticMap,
    TrafficMovie,
    movie_path,
    save_movie,
    save_static,
    static_path,
    write_manifest,
)

VOLUME_CHANNELS = (0, 2, 4, 6)
SPEED_CHANNELS = (1, 3, 5, 7)

_STATIC_STREAM = 1
_CITY_STREAM = 2
_MOVIE_STREAM = 3


@dataclass(frozen=True)
class CitySpec:
    """Recipe for one synthetic city."""

    city_id: str
    h: int = 64
    w: int = 64
    road_seed: int = 0
    base_volume: float = 0.7
    base_speed: float = 0.6
    rush_hours: tuple[tuple[int, int], tuple[int, int]] = ((96, 12), (210, 14))
    covid_volume_factor: float = 0.6
    noise_level: float = 0.03

    def validate(self) -> None:
        if self.h < 8 or self.w < 8:
            raise ValueError(f"grid must be at least 8x8, got {self.h}x{self.w}")
        if not (0.0 < self.base_volume and 0.0 < self.base_speed):
            raise ValueError("base_volume and base_speed must be positive")
        if not (0.0 < self.covid_volume_factor <= 1.0):
            raise ValueError(f"covid_volume_factor must be in (0,1], got {self.covid_volume_factor}")
        if self.noise_level < 0.0:
            raise ValueError(f"noise_level must be >= 0, got {self.noise_level}")
        for center, width in self.rush_hours:
            if not (0 <= center <= BINS_PER_DAY - 1) or width < 1:
                raise ValueError(f"bad rush hour (center={center}, width={width})")


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def _quantize_inplace(x: np.ndarray) -> np.ndarray:
    """Clip to [0,255] and round half up, reusing the input buffer."""
    np.clip(x, 0.0, 255.0, out=x)
    x += 0.5
    np.floor(x, out=x)
    return x.astype(np.uint8)


def generate_static(spec: CitySpec) -> StaticMap:
    """Road raster: connected arterial grid plus random branch walks."""
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([spec.road_seed, _STATIC_STREAM]))
    h, w = spec.h, spec.w
    road = np.zeros((h, w), dtype=bool)

    spacing = int(rng.integers(8, 13))
    for r in range(int(rng.integers(2, spacing)), h, spacing):
        road[min(r + int(rng.integers(-2, 3)), h - 1), :] = True
    for c in range(int(rng.integers(2, spacing)), w, spacing):
        road[:, min(c + int(rng.integers(-2, 3)), w - 1)] = True

    # branch walks start on the arterials so the network stays connected
    arterial_cells = np.argwhere(road)
    n_branches = max(1, (h * w) // 96)
    steps = {0: (-1, 0), 1: (0, 1), 2: (1, 0), 3: (0, -1)}
    for _ in range(n_branches):
        r, c = arterial_cells[rng.integers(len(arterial_cells))]
        heading = int(rng.integers(4))
        for _ in range(int(rng.integers(4, 12))):
            if rng.random() < 0.2:
                heading = int(rng.integers(4))
            dr, dc = steps[heading]
            r, c = r + dr, c + dc
            if not (0 <= r < h and 0 <= c < w):
                break
            road[r, c] = True

    channels = np.zeros((9, h, w), dtype=np.uint8)
    # density: local road fraction, only meaningful on road cells
    padded = np.pad(road.astype(np.float64), 1)
    frac = sum(
        padded[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        for dr in (-1, 0, 1)
        for dc in (-1, 0, 1)
    ) / 9.0
    channels[0] = np.where(road, _round_half_up(255.0 * frac), 0.0).astype(np.uint8)

    offsets = {
        "N": (-1, 0), "NE": (-1, 1), "E": (0, 1), "SE": (1, 1),
        "S": (1, 0), "SW": (1, -1), "W": (0, -1), "NW": (-1, -1),
    }
    padded_road = np.pad(road, 1)
    for i, name in enumerate(("N", "NE", "E", "SE", "S", "SW", "W", "NW")):
        dr, dc = offsets[name]
        neighbor = padded_road[1 + dr : 1 + dr + h, 1 + dc : 1 + dc + w]
        channels[1 + i] = np.where(road & neighbor, 255, 0).astype(np.uint8)
    return StaticMap(spec.city_id, channels)


def _city_profile_params(spec: CitySpec) -> dict[str, np.ndarray | float]:
    """Per-city diurnal constants, fixed across days and regimes."""
    rng = np.random.default_rng(np.random.SeedSequence([spec.road_seed, _CITY_STREAM]))
    return {
        "floor": 0.15,
        "amp_morning": float(rng.uniform(0.85, 1.15)),
        "amp_evening": float(rng.uniform(0.85, 1.15)),
        # heading mix differs between the two rushes (work-bound vs home-bound)
        "w_morning": rng.uniform(0.55, 1.0, size=4),
        "w_evening": rng.uniform(0.55, 1.0, size=4),
    }


def generate_movie(
    spec: CitySpec, day: int, regime: str, static: StaticMap | None = None
) -> TrafficMovie:
    """One day of traffic; deterministic in (road_seed, day, regime).

    ``static`` may carry the city's precomputed road raster to skip
    rebuilding it per day.
    """
    spec.validate()
    if regime not in REGIMES:
        raise ValueError(f"unknown regime {regime!r}, expected one of {REGIMES}")
    f = spec.covid_volume_factor if regime == "in_covid" else 1.0
    if static is None:
        static = generate_static(spec)
    params = _city_profile_params(spec)
    rng = np.random.default_rng(np.random.SeedSequence([spec.road_seed, _MOVIE_STREAM, day]))

    t = np.arange(BINS_PER_DAY, dtype=np.float64)
    (c1, s1), (c2, s2) = spec.rush_hours
    g_morning = np.exp(-0.5 * ((t - c1) / s1) ** 2)
    g_evening = np.exp(-0.5 * ((t - c2) / s2) ** 2)
    # (T, 4): bumps flattened by f on top of the floor, whole profile scaled by f
    profile = params["floor"] + f * (
        params["amp_morning"] * np.outer(g_morning, params["w_morning"])
        + params["amp_evening"] * np.outer(g_evening, params["w_evening"])
    )
    density = (static.channels[0].astype(np.float32) / np.float32(255.0))  # zero off-road

    h, w = spec.h, spec.w
    vol = profile.astype(np.float32)[:, None, None, :] * density[None, :, :, None]
    vol *= np.float32(255.0 * spec.base_volume * f)
    if spec.noise_level > 0.0:
        eta = rng.standard_normal(size=(BINS_PER_DAY, h, w, 4), dtype=np.float32)
        eta *= np.float32(spec.noise_level)
        eta += np.float32(1.0)
        vol *= eta

    v_rel = np.clip(vol * np.float32(1.0 / 255.0), 0.0, 1.0)
    v_rel *= np.float32(-0.5)
    v_rel += np.float32(1.0)
    speed = v_rel  # renamed in place: base_speed * (1 - 0.5 * v_rel), masked to roads
    speed *= np.float32(255.0 * spec.base_speed)
    speed *= (density > 0)[None, :, :, None]

    frames = np.empty((BINS_PER_DAY, h, w, 8), dtype=np.uint8)
    frames[..., VOLUME_CHANNELS] = _quantize_inplace(vol)
    frames[..., SPEED_CHANNELS] = _quantize_inplace(speed)
    return TrafficMovie(spec.city_id, day, frames)


# ---------------------------------------------------------------------------
# benchmark assembly
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BenchmarkLayout:
    """Which cities play which role, and how many days each split gets."""

    train_cities: tuple[str, ...]
    core_cities: tuple[str, ...]
    extended_cities: tuple[str, ...]
    train_days: int = 20
    test_days: int = 3

    def validate(self) -> None:
        roles = [self.train_cities, self.core_cities, self.extended_cities]
        all_cities = [c for group in roles for c in group]
        if len(set(all_cities)) != len(all_cities):
            dupes = sorted({c for c in all_cities if all_cities.count(c) > 1})
            raise ValueError(f"city role collision: {dupes}")
        if self.train_days < 1 or self.test_days < 1:
            raise ValueError("train_days and test_days must be >= 1")

    @property
    def all_cities(self) -> tuple[str, ...]:
        return self.train_cities + self.core_cities + self.extended_cities


def default_layout(
    n_train: int = 4, n_core: int = 4, n_extended: int = 2,
    train_days: int = 20, test_days: int = 3,
) -> BenchmarkLayout:
    return BenchmarkLayout(
        train_cities=tuple(f"train-{chr(97 + i)}" for i in range(n_train)),
        core_cities=tuple(f"core-{chr(97 + i)}" for i in range(n_core)),
        extended_cities=tuple(f"ext-{chr(97 + i)}" for i in range(n_extended)),
        train_days=train_days,
        test_days=test_days,
    )


def default_city_specs(
    layout: BenchmarkLayout,
    seed: int = 0,
    h: int = 64,
    w: int = 64,
    covid_volume_factor: float = 0.6,
    noise_level: float = 0.03,
) -> dict[str, CitySpec]:
    """Per-city recipes with jittered traffic constants, all derived from ``seed``."""
    specs = {}
    for idx, city in enumerate(layout.all_cities):
        rng = np.random.default_rng(np.random.SeedSequence([seed, idx]))
        specs[city] = CitySpec(
            city_id=city,
            h=h,
            w=w,
            road_seed=int(rng.integers(0, 2**31)),
            base_volume=float(rng.uniform(0.55, 0.8)),
            base_speed=float(rng.uniform(0.5, 0.75)),
            rush_hours=(
                (int(96 + rng.integers(-9, 10)), int(rng.integers(10, 15))),
                (int(210 + rng.integers(-9, 10)), int(rng.integers(12, 17))),
            ),
            covid_volume_factor=float(
                np.clip(covid_volume_factor + rng.uniform(-0.05, 0.05), 0.05, 1.0)
            ),
            noise_level=noise_level,
        )
    return specs


def _split_days(layout: BenchmarkLayout, role: str, regime: str) -> tuple[str, range] | None:
    """(split, day range) a (role, regime) pair contributes, or None."""
    if role == "train":
        return "train", range(layout.train_days)
    if role == "core":
        if regime == "pre_covid":
            return "train", range(layout.train_days)
        return "test", range(layout.test_days)
    if role == "extended":
        return "test", range(layout.test_days)
    raise ValueError(f"unknown role {role!r}")


def make_benchmark(
    root, layout: BenchmarkLayout, specs: dict[str, CitySpec]
) -> list[ManifestEntry]:
    """Write the full dataset tree plus its manifest; returns the manifest."""
    layout.validate()
    missing = [c for c in layout.all_cities if c not in specs]
    if missing:
        raise ValueError(f"no CitySpec for cities: {missing}")
    root = Path(root)
    if root.exists() and any(root.iterdir()):
        raise FileExistsError(f"benchmark root {root} exists and is not empty")
    root.mkdir(parents=True, exist_ok=True)

    entries: list[ManifestEntry] = []
    for role, cities in (
        ("train", layout.train_cities),
        ("core", layout.core_cities),
        ("extended", layout.extended_cities),
    ):
        for city in cities:
            spec = specs[city]
            static = generate_static(spec)
            save_static(static_path(root, city), static)
            for regime in REGIMES:
                split_days = _split_days(layout, role, regime)
                if split_days is None:
                    continue
                _, days = split_days
                year = REGIME_YEAR[regime]
                for day in days:
                    movie = generate_movie(spec, day, regime, static=static)
                    path = movie_path(root, city, year, day)
                    save_movie(path, movie)
                    entries.append(
                        ManifestEntry(
                            role, city, regime, str(path.relative_to(root)), movie.frames.shape[0]
                        )
                    )
    write_manifest(root, entries)
    return entries
