"""Riemannian flow-matching samplers on spheres and SPD matrices, with rate-measurement tooling."""
__version__ = "0.1.0"

from .errors import DomainError, InvalidArgument, NumericFailure, RFMError
from .geometry import SPD, Euclidean, ManifoldDescriptor, Sphere, make_manifold
from .kernels import BACKEND
from .sampler import (GuardReport, StepSchedule, batch_sample, euler_sample, make_schedule,
                      step_guard)

__all__ = [
    "BACKEND", "DomainError", "Euclidean", "GuardReport", "InvalidArgument", "ManifoldDescriptor",
    "NumericFailure", "RFMError", "SPD", "Sphere", "StepSchedule", "batch_sample", "euler_sample",
    "make_manifold", "make_schedule", "step_guard", "__version__",
]
