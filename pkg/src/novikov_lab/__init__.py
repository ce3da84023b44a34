"""Novikov complexes of closed 1-forms on flat tori, computed twice: from
gradient trajectories and from the small spectrum of the Witten Laplacian."""

from .exceptions import NovikovLabError
from .manifold import ModelManifold, cosine_model
from .ring import Lattice, RingElement
from .runner import RunConfig, __version__, run

__all__ = ["Lattice", "ModelManifold", "NovikovLabError", "RingElement", "RunConfig", "__version__", "cosine_model", "run"]
