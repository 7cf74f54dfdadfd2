"""FMM for the electric dyadic Green's function in layered media."""

from .layerstack import LayerStack, ReactionKey, UP, DOWN, all_reaction_keys
from .sommerfeld import QuadratureSpec, NonConvergence
from .fmm_core import build_tree, freespace_fmm
from .layered_fmm import evaluate_layered, reaction_fmm
from .oracle import direct_layered, free_space_dyadic

__all__ = [
    "LayerStack", "ReactionKey", "UP", "DOWN", "all_reaction_keys",
    "QuadratureSpec", "NonConvergence",
    "build_tree", "freespace_fmm", "evaluate_layered", "reaction_fmm",
    "direct_layered", "free_space_dyadic",
]
__version__ = "0.1.0"
