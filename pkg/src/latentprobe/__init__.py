"""Robustness probing of image classifiers via generator activation perturbations."""

__version__ = "0.1.0"

from .tensor import Tensor, ShapeError, GraphError, backward
from .network import (
    LayerSpec,
    Network,
    NetworkSpec,
    PerturbationSet,
    SigmaProfile,
    forward,
    predict,
)
from .archive import ArchiveError, load_archive, save_archive
from .sigma import calibrate
from .search import (
    Adam,
    AttackConfig,
    AttackRecord,
    MNIST_PROFILE,
    attack,
    cw_loss,
    project_norm,
    relax_bound,
    sample_tuples,
)

__all__ = [
    "Adam",
    "ArchiveError",
    "AttackConfig",
    "AttackRecord",
    "GraphError",
    "LayerSpec",
    "MNIST_PROFILE",
    "Network",
    "NetworkSpec",
    "PerturbationSet",
    "ShapeError",
    "SigmaProfile",
    "Tensor",
    "attack",
    "backward",
    "calibrate",
    "cw_loss",
    "forward",
    "load_archive",
    "predict",
    "project_norm",
    "relax_bound",
    "sample_tuples",
    "save_archive",
]
