"""
bqflow: pseudo-spectral simulation and verification of buoyancy-driven
incompressible flow on a periodic box, in the mild (Duhamel) formulation.
"""

__version__ = "0.1.0"

from .grid import (  # noqa: F401
    Field,
    GridSpec,
    RegionSpec,
    set_fft_workers,
)
