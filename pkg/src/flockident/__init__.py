"""Flocking data generation and mean-field PDE parameter identification.

The package covers the full pipeline: simulate a bounded 3D flock with
cubic obstacles, histogram the agent positions and velocities, fit a
neural parametrization of the initial density and momentum, and identify
the ten physical parameters of a non-locally forced compressible Euler
model by minimizing a time-averaged squared Hellinger misfit with a
Newton-conjugate-gradient method.
"""

from flockident.workspace import Workspace
from flockident.observation import GridSpec, PVHistogram, build_histogram, hellinger_sq
from flockident.hydro import PdeParams, FieldState, solve_forward
from flockident.ident import IdentProblem, IdentResult, NewtonConfig, newton_cg

__version__ = "0.1.0"

__all__ = [
    "Workspace",
    "GridSpec",
    "PVHistogram",
    "build_histogram",
    "hellinger_sq",
    "PdeParams",
    "FieldState",
    "solve_forward",
    "IdentProblem",
    "IdentResult",
    "NewtonConfig",
    "newton_cg",
    "__version__",
]
