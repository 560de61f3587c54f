"""Dropout at neuron, channel, path and layer granularity for convolutional
networks, on a small numpy deep-learning core."""

from .blocks import BlockConfig, build_block, census, count_params
from .dropout import DropSpec, fold_rescale_into_weights
from .errors import ConfigError, ShapeError, StateError
from .network import NetworkSpec, StageSpec, build, preset
from .trainer import TrainConfig, train

__all__ = [
    "BlockConfig", "ConfigError", "DropSpec", "NetworkSpec", "ShapeError", "StageSpec",
    "StateError", "TrainConfig", "build", "build_block", "census", "count_params",
    "fold_rescale_into_weights", "preset", "train",
]
__version__ = "0.1.0"
