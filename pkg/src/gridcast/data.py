"""Traffic movies, static road maps, sliding-window instances, and sample assembly.

A day of traffic is a (T, H, W, 8) uint8 movie: T five-minute bins, eight
channels per cell (volume and speed for the four heading quadrants NE, SE,
SW, NW). A city's static map is a (9, H, W) uint8 raster: road density
plus connectivity to the eight neighbours in the order N, NE, E, SE, S,
SW, W, NW.

One training instance takes 12 consecutive frames starting at bin t plus
the static map as a 105-channel input, and the frames at offsets
+{12,13,14,17,20,23} (i.e. 5/10/15/30/45/60 minutes past the input hour)
as a 48-channel target. Values are scaled by 1/255 into [0,1]; scaling
back and rounding recovers the original bytes exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .container import read_tensor_file, write_tensor_file

FRAME_CHANNELS = 8
INPUT_FRAMES = 12
TARGET_OFFSETS = (12, 13, 14, 17, 20, 23)
STATIC_CHANNELS = 9
INPUT_CHANNELS = INPUT_FRAMES * FRAME_CHANNELS + STATIC_CHANNELS  # 105
TARGET_CHANNELS = len(TARGET_OFFSETS) * FRAME_CHANNELS  # 48
BINS_PER_DAY = 288
EVENING_CAP = 240  # 8 p.m. as a bin index: 20 hours x 12 bins
NEIGHBOR_ORDER = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")

REGIMES = ("pre_covid", "in_covid")
REGIME_YEAR = {"pre_covid": 2019, "in_covid": 2020}


@dataclass
class TrafficMovie:
    city_id: str
    day_index: int
    frames: np.ndarray  # (T, H, W, 8) uint8

    def __post_init__(self) -> None:
        f = self.frames
        if f.ndim != 4 or f.shape[3] != FRAME_CHANNELS:
            raise ValueError(f"movie frames must be (T,H,W,8), got {f.shape}")
        if f.dtype != np.uint8:
            raise ValueError(f"movie frames must be uint8, got {f.dtype}")


@dataclass
class StaticMap:
    city_id: str
    channels: np.ndarray  # (9, H, W) uint8

    def __post_init__(self) -> None:
        c = self.channels
        if c.ndim != 3 or c.shape[0] != STATIC_CHANNELS:
            raise ValueError(f"static map must be (9,H,W), got {c.shape}")
        if c.dtype != np.uint8:
            raise ValueError(f"static map must be uint8, got {c.dtype}")


@dataclass(frozen=True)
class WindowIndex:
    valid_starts: tuple[int, ...]

    def __len__(self) -> int:
        return len(self.valid_starts)


def build_window_index(T: int, latest_start_cap: int = EVENING_CAP) -> WindowIndex:
    """All start bins t with a full 24-bin window and t <= the start-time cap."""
    if T < 36:
        raise ValueError(f"day too short: T={T} < 36, no complete sample fits")
    last = min(latest_start_cap, T - (TARGET_OFFSETS[-1] + 1))
    return WindowIndex(tuple(range(last + 1)))


def evaluation_window_starts(T: int, latest_start_cap: int = EVENING_CAP, stride: int = 24) -> tuple[int, ...]:
    """Deterministic evaluation slots: every ``stride``-th valid start bin."""
    return build_window_index(T, latest_start_cap).valid_starts[::stride]


@dataclass
class Sample:
    input: np.ndarray  # (105, H, W) float in [0,1]
    target: np.ndarray  # (48, H, W) float in [0,1]
    city_id: str
    t: int


def assemble_sample(
    movie: TrafficMovie, static: StaticMap, t: int, dtype=np.float32
) -> Sample:
    """Build the (105, H, W) input and (48, H, W) target for start bin ``t``."""
    T = movie.frames.shape[0]
    last_needed = t + TARGET_OFFSETS[-1]
    if t < 0 or last_needed > T - 1:
        raise ValueError(f"window start {t} out of range for a {T}-bin movie")
    scale = np.asarray(1.0 / 255.0, dtype=dtype)
    frames = movie.frames
    x_frames = frames[t : t + INPUT_FRAMES]  # (12, H, W, 8)
    h, w = x_frames.shape[1], x_frames.shape[2]
    x = np.empty((INPUT_CHANNELS, h, w), dtype=dtype)
    x[: INPUT_FRAMES * FRAME_CHANNELS] = (
        x_frames.transpose(0, 3, 1, 2).reshape(INPUT_FRAMES * FRAME_CHANNELS, h, w) * scale
    )
    x[INPUT_FRAMES * FRAME_CHANNELS :] = static.channels * scale
    y_frames = frames[[t + off for off in TARGET_OFFSETS]]
    y = (y_frames.transpose(0, 3, 1, 2).reshape(TARGET_CHANNELS, h, w) * scale).astype(
        dtype, copy=False
    )
    return Sample(x, y, movie.city_id, t)


def stack_to_frames(stack: np.ndarray) -> np.ndarray:
    """(48, H, W) prediction/target stack -> (6, H, W, 8) frame layout."""
    n_frames = stack.shape[0] // FRAME_CHANNELS
    return stack.reshape(n_frames, FRAME_CHANNELS, *stack.shape[1:]).transpose(0, 2, 3, 1)


def frames_to_stack(frames: np.ndarray) -> np.ndarray:
    """(6, H, W, 8) frame layout -> (48, H, W) channel stack."""
    t, h, w, c = frames.shape
    return np.ascontiguousarray(frames.transpose(0, 3, 1, 2)).reshape(t * c, h, w)


# ---------------------------------------------------------------------------
# on-disk layout
# ---------------------------------------------------------------------------


def movie_path(root, city_id: str, year: int, day_index: int) -> Path:
    return Path(root) / city_id / "movies" / f"{year}-{day_index:03d}.gct"


def static_path(root, city_id: str) -> Path:
    return Path(root) / city_id / "static.gct"


def save_movie(path, movie: TrafficMovie) -> None:
    write_tensor_file(path, {"frames": movie.frames})


def load_movie(path, city_id: str, day_index: int) -> TrafficMovie:
    return TrafficMovie(city_id, day_index, read_tensor_file(path)["frames"])


def save_static(path, static: StaticMap) -> None:
    write_tensor_file(path, {"channels": static.channels})


def load_static(path, city_id: str) -> StaticMap:
    return StaticMap(city_id, read_tensor_file(path)["channels"])


@dataclass(frozen=True)
class ManifestEntry:
    role: str  # train | core | extended
    city_id: str
    regime: str  # pre_covid | in_covid
    path: str  # relative to the dataset root
    bins: int

    @property
    def split(self) -> str:
        """Train/test membership is fully determined by role and regime."""
        if self.role == "train":
            return "train"
        if self.role == "core":
            return "train" if self.regime == "pre_covid" else "test"
        if self.role == "extended":
            return "test"
        raise ValueError(f"unknown role {self.role!r}")

    @property
    def day_index(self) -> int:
        return int(Path(self.path).stem.split("-")[1])


MANIFEST_NAME = "manifest.txt"
_MANIFEST_HEADER = ("role", "city", "regime", "path", "bins")


def write_manifest(root, entries: list[ManifestEntry]) -> Path:
    rows = [_MANIFEST_HEADER]
    rows += [(e.role, e.city_id, e.regime, e.path, str(e.bins)) for e in entries]
    widths = [max(len(r[i]) for r in rows) for i in range(len(_MANIFEST_HEADER))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    out = Path(root) / MANIFEST_NAME
    out.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return out


def read_manifest(root) -> list[ManifestEntry]:
    path = Path(root) / MANIFEST_NAME
    if not path.exists():
        raise FileNotFoundError(f"no dataset manifest at {path}")
    lines = path.read_text(encoding="utf-8").splitlines()
    entries = []
    for line in lines[1:]:
        if not line.strip():
            continue
        role, city, regime, rel, bins = line.split()
        entries.append(ManifestEntry(role, city, regime, rel, int(bins)))
    return entries
