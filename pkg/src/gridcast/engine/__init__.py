"""From-scratch tensor engine: raster operators, reverse-mode tape, Adam.

Values are plain numpy arrays; ``DTYPES`` maps the two supported precision
names ("single" for training speed, "double" for gradient checks) to their
dtypes.
"""

import numpy as np

from .graph import Graph, GraphError, Node
from .ops import (
    CropRecord,
    ShapeError,
    concat_channels,
    conv2d,
    conv_transpose2d,
    crop_to,
    group_norm,
    maxpool2,
    mse,
    pad_to_multiple,
    relu,
)
from .optim import AdamState, adam_step, init_adam

DTYPES = {"single": np.float32, "double": np.float64}

__all__ = [
    "AdamState",
    "CropRecord",
    "DTYPES",
    "Graph",
    "GraphError",
    "Node",
    "ShapeError",
    "adam_step",
    "concat_channels",
    "conv2d",
    "conv_transpose2d",
    "crop_to",
    "group_norm",
    "init_adam",
    "maxpool2",
    "mse",
    "pad_to_multiple",
    "relu",
]
