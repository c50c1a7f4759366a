"""Configurable-depth U-Net over the graph engine.

The network is K encoder blocks (two 3x3 conv + group-norm + relu stages,
then a stride-2 max-pool), a two-stage bridge, K decoder blocks (2x2
transposed conv, channel-concat with the matching encoder activation, two
conv stages) and a linear 1x1 head. Filter width doubles at every encoder
level and halves back up the decoder. Inputs of arbitrary spatial size are
zero-padded to the next multiple of 2^K and the output is cropped back, so
forward preserves spatial dims exactly.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .container import read_tensor_file, write_tensor_file
from .engine import DTYPES, Graph
from .engine.ops import CropRecord, crop_to, pad_to_multiple  # noqa: F401  (re-export)


class ConfigError(ValueError):
    """Invalid architecture hyperparameters."""


@dataclass(frozen=True)
class UNetConfig:
    """Architecture hyperparameters.

    ``depth_k`` is the number of down/up blocks; filter width at encoder
    level i is base_filters * 2^i, so the bridge runs base_filters * 2^K
    wide. Group normalization groups ``channels_per_group`` channels unless
    ``num_groups`` pins the group count instead.
    """

    depth_k: int = 4
    base_filters: int = 16
    in_channels: int = 105
    out_channels: int = 48
    channels_per_group: int = 8
    num_groups: int | None = None
    seed: int = 0

    def validate(self) -> None:
        if self.depth_k < 1:
            raise ConfigError(f"depth_k must be >= 1, got {self.depth_k}")
        if self.base_filters < 1 or self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("base_filters/in_channels/out_channels must be positive")
        if self.num_groups is None and self.channels_per_group < 1:
            raise ConfigError(f"channels_per_group must be >= 1, got {self.channels_per_group}")
        if self.num_groups is not None and self.num_groups < 1:
            raise ConfigError(f"num_groups must be >= 1, got {self.num_groups}")
        divisor = self.num_groups if self.num_groups is not None else self.channels_per_group
        for name, width in self._conv_widths():
            if width % divisor:
                mode = (
                    f"num_groups={self.num_groups}"
                    if self.num_groups is not None
                    else f"channels_per_group={self.channels_per_group}"
                )
                raise ConfigError(f"layer {name}: {width} filters not divisible under {mode}")

    def _groups_for(self, width: int) -> int:
        if self.num_groups is not None:
            return self.num_groups
        return width // self.channels_per_group

    def group_width(self, width: int) -> int:
        """Channels per normalization group for a conv of ``width`` filters."""
        return width // self._groups_for(width)

    def level_width(self, i: int) -> int:
        return self.base_filters * (2**i)

    def _conv_widths(self) -> list[tuple[str, int]]:
        """Every group-normalized conv layer and its output width."""
        out = []
        for i in range(self.depth_k):
            w = self.level_width(i)
            out += [(f"enc{i}.conv1", w), (f"enc{i}.conv2", w)]
        wb = self.level_width(self.depth_k)
        out += [("bridge.conv1", wb), ("bridge.conv2", wb)]
        for i in reversed(range(self.depth_k)):
            w = self.level_width(i)
            out += [(f"dec{i}.conv1", w), (f"dec{i}.conv2", w)]
        return out


@dataclass
class UNetModel:
    config: UNetConfig
    params: dict[str, np.ndarray]

    @property
    def dtype(self) -> np.dtype:
        return next(iter(self.params.values())).dtype


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int, dtype) -> np.ndarray:
    bound = np.sqrt(1.0 / (c_in * k * k))
    return rng.uniform(-bound, bound, size=(c_out, c_in, k, k)).astype(dtype)


def _upconv_init(rng: np.random.Generator, c_in: int, c_out: int, dtype) -> np.ndarray:
    # stride == kernel, so each output cell sees exactly c_in taps
    bound = np.sqrt(1.0 / c_in)
    return rng.uniform(-bound, bound, size=(c_in, c_out, 2, 2)).astype(dtype)


def build_unet(config: UNetConfig, precision: str = "single") -> UNetModel:
    """Materialize parameters for ``config``, deterministically in its seed."""
    config.validate()
    dtype = DTYPES[precision]
    rng = np.random.default_rng(config.seed)
    params: dict[str, np.ndarray] = {}

    def conv_block(prefix: str, c_in: int, c_out: int) -> None:
        params[f"{prefix}.w"] = _conv_init(rng, c_out, c_in, 3, dtype)
        params[f"{prefix}.b"] = np.zeros(c_out, dtype=dtype)

    def gn_block(prefix: str, c: int) -> None:
        params[f"{prefix}.gamma"] = np.ones(c, dtype=dtype)
        params[f"{prefix}.beta"] = np.zeros(c, dtype=dtype)

    prev = config.in_channels
    for i in range(config.depth_k):
        width = config.level_width(i)
        conv_block(f"enc{i}.conv1", prev, width)
        gn_block(f"enc{i}.gn1", width)
        conv_block(f"enc{i}.conv2", width, width)
        gn_block(f"enc{i}.gn2", width)
        prev = width

    wb = config.level_width(config.depth_k)
    conv_block("bridge.conv1", prev, wb)
    gn_block("bridge.gn1", wb)
    conv_block("bridge.conv2", wb, wb)
    gn_block("bridge.gn2", wb)

    for i in reversed(range(config.depth_k)):
        width = config.level_width(i)
        above = config.level_width(i + 1)
        params[f"dec{i}.up.w"] = _upconv_init(rng, above, width, dtype)
        params[f"dec{i}.up.b"] = np.zeros(width, dtype=dtype)
        conv_block(f"dec{i}.conv1", 2 * width, width)
        gn_block(f"dec{i}.gn1", width)
        conv_block(f"dec{i}.conv2", width, width)
        gn_block(f"dec{i}.gn2", width)

    params["head.w"] = _conv_init(rng, config.out_channels, config.base_filters, 1, dtype)
    params["head.b"] = np.zeros(config.out_channels, dtype=dtype)
    return UNetModel(config, params)


def forward_graph(model: UNetModel, g: Graph, x: int) -> int:
    """Record the full forward pass on tape ``g``; returns the output node id."""
    cfg = model.config
    xv = g.value(x)
    if xv.shape[-3] != cfg.in_channels:
        raise ConfigError(
            f"input has {xv.shape[-3]} channels, model expects {cfg.in_channels}"
        )
    p = {name: g.param(name, arr) for name, arr in model.params.items()}

    def stage(h: int, prefix: str, gn: str, width: int) -> int:
        h = g.conv2d(h, p[f"{prefix}.w"], p[f"{prefix}.b"], pad=1)
        h = g.group_norm(h, p[f"{gn}.gamma"], p[f"{gn}.beta"], cfg.group_width(width))
        return g.relu(h)

    rec = CropRecord(xv.shape[-2], xv.shape[-1])
    h = g.pad_to_multiple(x, 2**cfg.depth_k)
    skips: list[int] = []
    for i in range(cfg.depth_k):
        width = cfg.level_width(i)
        h = stage(h, f"enc{i}.conv1", f"enc{i}.gn1", width)
        h = stage(h, f"enc{i}.conv2", f"enc{i}.gn2", width)
        skips.append(h)
        h = g.maxpool2(h)

    wb = cfg.level_width(cfg.depth_k)
    h = stage(h, "bridge.conv1", "bridge.gn1", wb)
    h = stage(h, "bridge.conv2", "bridge.gn2", wb)

    for i in reversed(range(cfg.depth_k)):
        width = cfg.level_width(i)
        h = g.conv_transpose2d(h, p[f"dec{i}.up.w"], p[f"dec{i}.up.b"])
        h = g.concat_channels(skips[i], h)
        h = stage(h, f"dec{i}.conv1", f"dec{i}.gn1", width)
        h = stage(h, f"dec{i}.conv2", f"dec{i}.gn2", width)

    h = g.conv2d(h, p["head.w"], p["head.b"], pad=0)
    return g.crop_to(h, rec)


def forward(model: UNetModel, x: np.ndarray) -> np.ndarray:
    """Pure forward pass: (in,H,W) -> (out,H,W), batched stacks likewise."""
    g = Graph()
    return g.value(forward_graph(model, g, g.input(np.asarray(x, dtype=model.dtype))))


def parameter_count(model: UNetModel) -> int:
    return sum(a.size for a in model.params.values())


_CONFIG_KEY = "__config__"


def save_checkpoint(model: UNetModel, path) -> None:
    """One container entry per named parameter plus a textual config manifest."""
    cfg = model.config
    lines = [
        f"depth_k = {cfg.depth_k}",
        f"base_filters = {cfg.base_filters}",
        f"in_channels = {cfg.in_channels}",
        f"out_channels = {cfg.out_channels}",
        f"channels_per_group = {cfg.channels_per_group}",
        f"num_groups = {'none' if cfg.num_groups is None else cfg.num_groups}",
        f"seed = {cfg.seed}",
    ]
    manifest = np.frombuffer("\n".join(lines).encode("utf-8"), dtype=np.uint8).copy()
    entries: dict[str, np.ndarray] = {_CONFIG_KEY: manifest}
    entries.update(model.params)
    write_tensor_file(path, entries)


def load_checkpoint(path) -> UNetModel:
    entries = read_tensor_file(path)
    if _CONFIG_KEY not in entries:
        raise ConfigError(f"{path}: checkpoint has no config manifest")
    fields: dict[str, str] = {}
    for line in bytes(entries.pop(_CONFIG_KEY)).decode("utf-8").splitlines():
        key, _, value = line.partition("=")
        fields[key.strip()] = value.strip()
    config = UNetConfig(
        depth_k=int(fields["depth_k"]),
        base_filters=int(fields["base_filters"]),
        in_channels=int(fields["in_channels"]),
        out_channels=int(fields["out_channels"]),
        channels_per_group=int(fields["channels_per_group"]),
        num_groups=None if fields["num_groups"] == "none" else int(fields["num_groups"]),
        seed=int(fields["seed"]),
    )
    return UNetModel(config, entries)


def with_seed(config: UNetConfig, seed: int) -> UNetConfig:
    return replace(config, seed=seed)
