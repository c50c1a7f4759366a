"""gridcast: desk-scale grid traffic forecasting.

Synthetic city benchmark with temporal and spatial regime shifts, a
from-scratch convolutional engine with exact reverse-mode gradients, a
configurable-depth U-Net, multi-task training across cities, and the
evaluation protocols (baselines, seed ensembles, training-data-mixture
ablation) that go with it.
"""

__version__ = "0.1.0"
