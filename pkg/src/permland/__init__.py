"""Permutation points in the loss landscapes of small multilayer perceptrons."""

__version__ = "0.1.0"

from .network import (Dataset, NetworkParams, forward, gradient, hessian, init_network, load_checkpoint,
                      loss, loss_and_gradient, save_checkpoint)
from .numerics import Rng, SpectrumReport, jacobi_eigh, symmetric_eigen
from .symmetry import MergePlan, PermutationSpec, apply_permutation, build_kth_order_point, swap_pair

__all__ = [
    "Dataset", "NetworkParams", "forward", "gradient", "hessian", "init_network", "load_checkpoint",
    "loss", "loss_and_gradient", "save_checkpoint", "Rng", "SpectrumReport", "jacobi_eigh",
    "symmetric_eigen", "MergePlan", "PermutationSpec", "apply_permutation", "build_kth_order_point",
    "swap_pair", "__version__",
]
