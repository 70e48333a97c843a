from . import autodiff
from .autodiff import Tensor, no_grad
from .checks import grad_check
from .layers import GCN, MLP, Adapter, Linear, Module, gcn_layer, normalized_adjacency
from .losses import info_nce, info_nce_value, triplet_loss, triplet_value
from .optim import Adam, OptimizerState, hard_update, polyak_update

__all__ = [
    "autodiff", "Tensor", "no_grad", "grad_check", "GCN", "MLP", "Adapter", "Linear", "Module",
    "gcn_layer", "normalized_adjacency", "info_nce", "info_nce_value", "triplet_loss",
    "triplet_value", "Adam", "OptimizerState", "hard_update", "polyak_update",
]
