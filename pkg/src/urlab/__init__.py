"""Numerical laboratory for flatness statistics, regularized distances,
Whitney geometry, Carleson estimates, and degenerate elliptic boundary
behaviour on low-dimensional sets."""

__version__ = "0.1.0"

from .geometry import (
    DiscreteMeasure,
    Ball,
    AhlforsReport,
    make_plane_set,
    make_lipschitz_graph,
    make_cantor_set,
    ahlfors_constant,
    corkscrew_point,
    save_measure,
    load_measure,
)

__all__ = [
    "DiscreteMeasure",
    "Ball",
    "AhlforsReport",
    "make_plane_set",
    "make_lipschitz_graph",
    "make_cantor_set",
    "ahlfors_constant",
    "corkscrew_point",
    "save_measure",
    "load_measure",
    "__version__",
]
