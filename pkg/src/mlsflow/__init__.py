"""Meshless incompressible flow solver.

Derivative operators are built on scattered nodes by weighted moving least
squares (quadratic basis, Gaussian window) and the Navier-Stokes equations
are advanced with an equal-order projection scheme.
"""

__version__ = "0.1.0"

from .nodeset import (  # noqa: F401
    BoundaryTag,
    ChannelGeom,
    GridSpec,
    NodeSet,
    TagKind,
    generate_cavity_2d,
    generate_cavity_3d_half,
    generate_channel,
    stretch_coordinate,
)
