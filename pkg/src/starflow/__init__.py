"""Injective normalizing flows on star-like manifolds.

Densities live on manifolds whose points are ``r(theta) * u(theta)`` for
spherical angles ``theta``; the volume term of the injective map is computed
in ``O(d^2)`` by :func:`starflow.jacdet.fast_log_det`.
"""

from .flow import FlowModel, build_flow, load_checkpoint, sample_and_logprob, save_checkpoint
from .jacdet import fast_log_det, oracle_log_det
from .manifolds import DeformedSphere, LpBall, Simplex, Sphere
from .vi import TrainConfig, train

__all__ = [
    "DeformedSphere", "FlowModel", "LpBall", "Simplex", "Sphere", "TrainConfig", "build_flow",
    "fast_log_det", "load_checkpoint", "oracle_log_det", "sample_and_logprob", "save_checkpoint", "train",
]
__version__ = "0.1.0"
