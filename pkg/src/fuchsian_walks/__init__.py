"""Random walks on Fuchsian Coxeter groups and their regular buildings.

Coxeter systems and ShortLex normal forms, cone-type automata, retracted
building walks (simulation and exact laws), Green functions and entropy
estimators, nested cone coverings, and a config-driven command line.
"""
__version__ = "0.1.0"

from .coxeter import CoxeterSystem, Element, build_coxeter_system, build_generic_system  # noqa: E402
from .automata import Acceptor, build_acceptor, recurrent_subgraph, sphere_counts  # noqa: E402
from .walk import BuildingParams, WalkSpec, exact_distribution, simulate  # noqa: E402

__all__ = [
    "__version__",
    "CoxeterSystem",
    "Element",
    "build_coxeter_system",
    "build_generic_system",
    "Acceptor",
    "build_acceptor",
    "recurrent_subgraph",
    "sphere_counts",
    "BuildingParams",
    "WalkSpec",
    "exact_distribution",
    "simulate",
]
