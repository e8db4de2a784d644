"""Continuous SO(3) kernels from Gaussian RBF weights over a parameter grid."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import rotations as rot
from .grids import RotationGrid, uniformity_stats


@dataclass(frozen=True)
class RbfConfig:
    sigma: float
    normalize: bool = True

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError(f"RBF width must be positive, got {self.sigma}")


def default_sigma(grid: RotationGrid) -> float:
    """Width matched to the grid spacing: the mean nearest-neighbour distance."""
    if grid.resolution < 2:
        return math.pi
    return uniformity_stats(grid)["mean_nearest_neighbor"]


def interp_weights(targets, sources: RotationGrid, cfg: RbfConfig) -> np.ndarray:
    """Normalized Gaussian weights, shape (M, N); every row sums to one."""
    src = sources.elements if isinstance(sources, RotationGrid) else rot.as_quat(sources).reshape(-1, 4)
    d = rot.pairwise_distance(targets, src)
    # subtracting the row minimum leaves the normalized weights unchanged and avoids underflow
    logits = -(d**2) / (2.0 * cfg.sigma**2)
    logits -= logits.max(axis=1, keepdims=True)
    w = np.exp(logits)
    return w / w.sum(axis=1, keepdims=True)


class GroupMixingKernel:
    """Learnable anchors ``params[o, i, n]`` living on ``param_grid[n]``."""

    def __init__(self, param_grid: RotationGrid, params: np.ndarray, rbf: RbfConfig | None = None):
        params = np.asarray(params, dtype=np.float64)
        if params.ndim != 3 or params.shape[2] != param_grid.resolution:
            raise ValueError(
                f"params must have shape (C_out, C_in, {param_grid.resolution}), got {params.shape}"
            )
        if not np.all(np.isfinite(params)):
            raise ValueError("mixing kernel parameters must be finite")
        self.param_grid = param_grid
        self.params = params
        self.rbf = rbf if rbf is not None else RbfConfig(default_sigma(param_grid))

    @classmethod
    def init(cls, param_grid: RotationGrid, c_out: int, c_in: int, rng: np.random.Generator):
        bound = math.sqrt(1.0 / (c_in * param_grid.resolution))
        params = rng.uniform(-bound, bound, size=(c_out, c_in, param_grid.resolution))
        return cls(param_grid, params)

    @property
    def shape(self):
        return self.params.shape

    def weights(self, targets) -> np.ndarray:
        return interp_weights(targets, self.param_grid, self.rbf)


def expand_kernel(kernel: GroupMixingKernel, targets, weights: np.ndarray | None = None) -> np.ndarray:
    """Evaluate the kernel at ``targets`` (M rotations): array (C_out, C_in, M)."""
    a = kernel.weights(targets) if weights is None else weights
    return kernel.params @ a.T


def expand_kernel_backward(
    kernel: GroupMixingKernel, targets, upstream: np.ndarray, weights: np.ndarray | None = None
) -> np.ndarray:
    """Adjoint of :func:`expand_kernel` with respect to ``params``."""
    a = kernel.weights(targets) if weights is None else weights
    c_out, c_in, _ = kernel.params.shape
    if upstream.shape != (c_out, c_in, a.shape[0]):
        raise ValueError(f"upstream gradient has shape {upstream.shape}, expected {(c_out, c_in, a.shape[0])}")
    return upstream @ a
