"""Certified sampling from deep generative models under STL requirements."""

__version__ = "0.1.0"

from .certify import CertifiedLatent, ExpansionConfig, PivotSearchConfig, certify, expand_box, pivot_search
from .generators import DiffusionSpec, GeneratorSpec, Model, ddim_generate, gan_generate, reward_graph
from .graph import Graph, backward, forward, gradient
from .latent import EmptyRegionError, TruncatedMixture, box_log_prob, build_mixture
from .stl import eval_boolean, eval_robustness, lower_to_graph
from .verify import Box, crown, ibp, verify_box

__all__ = [
    "Box", "CertifiedLatent", "DiffusionSpec", "EmptyRegionError", "ExpansionConfig", "Graph",
    "GeneratorSpec", "Model", "PivotSearchConfig", "TruncatedMixture", "backward", "box_log_prob",
    "build_mixture", "certify", "crown", "ddim_generate", "eval_boolean", "eval_robustness",
    "expand_box", "forward", "gan_generate", "gradient", "ibp", "lower_to_graph", "pivot_search",
    "reward_graph", "verify_box",
]
