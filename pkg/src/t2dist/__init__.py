"""T2 distribution estimation from multi-echo spin-echo MRI.

Simulation (EPG forward model, Gaussian-mixture ground truth, Rician noise),
classical NNLS inversion and small numpy neural estimators that take the
echo times as an input alongside the signal.
"""
from ._backend import BACKEND
from .core import (
    EchoTrain,
    MultiEchoSignal,
    T2Distribution,
    T2Grid,
    dense_grid,
    inference_grid,
    make_t2_grid,
)
from .errors import (
    ContainerError,
    ConvergenceError,
    DegenerateInputError,
    ParameterError,
    T2DistError,
)

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "ContainerError",
    "ConvergenceError",
    "DegenerateInputError",
    "EchoTrain",
    "MultiEchoSignal",
    "ParameterError",
    "T2DistError",
    "T2Distribution",
    "T2Grid",
    "dense_grid",
    "inference_grid",
    "make_t2_grid",
]
