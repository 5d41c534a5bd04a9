"""Capsule networks with a family of norm-based squash functions, in numpy."""
from .capsnet import Architecture, CapsNet, CapsNetParams, forward, init_params, preset
from .data import Dataset, kfold_split, load_cifar10, load_idx
from .errors import (CapsKitError, ChecksumError, ConfigError, FormatError, InvalidArgument,
                     OracleError, VersionError)
from .routing import RoutingSpec, dynamic_routing, self_routing
from .squash import SquashSpec
from .train import TrainConfig, evaluate, run_experiment, run_fold

__version__ = "0.1.0"
