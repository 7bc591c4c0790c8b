"""Distributed model-free online feedback optimization over networks."""

from . import bounds, controller, netgraph, objective, plant
from .errors import DistOFOError

__version__ = "0.1.0"

__all__ = ["bounds", "controller", "netgraph", "objective", "plant", "DistOFOError"]
