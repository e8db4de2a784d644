"""Lifting and separable group convolutions on SE(3) with hand-written backward passes.

Group feature maps are arrays ``(B, C, G, D, H, W)``: batch, channel, grid
element, then space. Every layer caches what its backward pass needs during
``forward`` and accumulates parameter gradients into ``self.grads``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _kernels
from . import rotations as rot
from .grids import RotationGrid
from .rbf import GroupMixingKernel, expand_kernel, expand_kernel_backward
from .volume import (
    check_bank,
    correlate_padded,
    correlate_padded_backward,
    pad_same,
    kernel_rotation_matrices,
)


@dataclass
class GroupFeatureMap:
    data: np.ndarray  # (..., C, G, D, H, W)
    grid: RotationGrid

    def __post_init__(self):
        if self.data.shape[-4] != self.grid.resolution:
            raise ValueError(
                f"group axis has length {self.data.shape[-4]} but the grid has {self.grid.resolution} elements"
            )


class Layer:
    """Minimal module protocol: named parameters with matching gradient buffers."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._cache = None

    def zero_grad(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def _accumulate(self, name, g):
        if name in self.grads:
            self.grads[name] += g
        else:
            self.grads[name] = np.array(g, copy=True)


def _as_group_batch(f):
    data = f.data if isinstance(f, GroupFeatureMap) else np.asarray(f)
    if data.ndim == 5:
        return data[None], True
    return data, False


# -- lifting ----------------------------------------------------------------

class LiftingLayer(Layer):
    """Correlate a volume with rotated copies of a dense kernel bank, one per grid element."""

    def __init__(self, bank: np.ndarray, out_grid_resolution: int, grid_mode="sampled"):
        super().__init__()
        self.params["bank"] = check_bank(bank).copy()
        self.out_grid_resolution = out_grid_resolution
        self.grid_mode = grid_mode
        self.zero_grad()

    @classmethod
    def init(cls, c_out, c_in, k, out_grid_resolution, rng, grid_mode="sampled"):
        bound = np.sqrt(3.0 / (c_in * k**3))
        return cls(rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k)), out_grid_resolution, grid_mode)

    @property
    def kernel_size(self):
        return self.params["bank"].shape[-1]

    def rotated_bank(self, grid: RotationGrid) -> tuple[np.ndarray, np.ndarray]:
        bank = self.params["bank"]
        c_out, c_in, k = bank.shape[0], bank.shape[1], bank.shape[-1]
        mats = kernel_rotation_matrices(grid.elements, k)
        rb = np.einsum("gvu,oiu->ogiv", mats, bank.reshape(c_out, c_in, -1))
        return rb.reshape(c_out * grid.resolution, c_in, k, k, k), mats

    def forward(self, x: np.ndarray, grid: RotationGrid) -> np.ndarray:
        bank = self.params["bank"]
        if x.shape[1] != bank.shape[1]:
            raise ValueError(f"lifting layer expects {bank.shape[1]} input channels, got {x.shape[1]}")
        rb, mats = self.rotated_bank(grid)
        xp = pad_same(x, self.kernel_size // 2)
        out = correlate_padded(xp, rb, "dense")
        self._cache = (xp, rb, mats, grid.resolution)
        b = x.shape[0]
        return out.reshape((b, bank.shape[0], grid.resolution) + x.shape[2:])

    def backward(self, upstream: np.ndarray, need_input: bool = True):
        xp, rb, mats, g = self._cache
        bank = self.params["bank"]
        c_out, c_in, k = bank.shape[0], bank.shape[1], bank.shape[-1]
        up = upstream.reshape((upstream.shape[0], c_out * g) + upstream.shape[3:])
        grad_x, grad_rb = correlate_padded_backward(xp, rb, up, "dense", need_input=need_input)
        grad_rb = grad_rb.reshape(c_out, g, c_in, -1)
        self._accumulate("bank", np.einsum("gvu,ogiv->oiu", mats, grad_rb).reshape(bank.shape))
        return grad_x


# -- separable group convolution -----------------------------------------------

def relative_rotations(out_grid: RotationGrid, in_grid: RotationGrid) -> np.ndarray:
    """``R_out^-1 R_in`` for every (out, in) pair, flattened to (G_out * G_in, 4)."""
    inv = rot.quat_inverse(out_grid.elements)
    return rot.quat_mul(inv[:, None, :], in_grid.elements[None, :, :]).reshape(-1, 4)


class GroupConvLayer(Layer):
    """Separable group convolution: RBF-interpolated channel/group mixing, then a rotated depthwise kernel."""

    def __init__(self, mixing: GroupMixingKernel, depthwise_bank: np.ndarray, out_grid_resolution: int,
                 grid_mode="sampled"):
        super().__init__()
        bank = check_bank(depthwise_bank)
        if bank.shape[1] != 1 or bank.shape[0] != mixing.params.shape[0]:
            raise ValueError(
                f"depthwise bank must be ({mixing.params.shape[0]}, 1, k, k, k), got {bank.shape}"
            )
        self.mixing = mixing
        self.params["mixing"] = mixing.params  # shared storage
        self.params["bank"] = bank.copy()
        self.out_grid_resolution = out_grid_resolution
        self.grid_mode = grid_mode
        self._weight_cache = {}
        self.zero_grad()

    @classmethod
    def init(cls, c_out, c_in, k, param_grid: RotationGrid, rng, grid_mode="sampled"):
        mixing = GroupMixingKernel.init(param_grid, c_out, c_in, rng)
        bound = np.sqrt(3.0 / k**3)
        bank = rng.uniform(-bound, bound, size=(c_out, 1, k, k, k))
        return cls(mixing, bank, param_grid.resolution, grid_mode)

    @property
    def kernel_size(self):
        return self.params["bank"].shape[-1]

    def interpolation_weights(self, out_grid, in_grid) -> np.ndarray:
        key = (out_grid.elements.tobytes(), in_grid.elements.tobytes())
        a = self._weight_cache.get(key)
        if a is None:
            a = self.mixing.weights(relative_rotations(out_grid, in_grid))
            if len(self._weight_cache) > 8:
                self._weight_cache.clear()
            self._weight_cache[key] = a
        return a

    def mixing_matrix(self, out_grid, in_grid):
        """Dense (C_out * G_out, C_in * G_in) operator including the 1/G_in quadrature weight."""
        a = self.interpolation_weights(out_grid, in_grid)
        w = expand_kernel(self.mixing, None, weights=a)
        c_out, c_in = w.shape[:2]
        go, gi = out_grid.resolution, in_grid.resolution
        m = w.reshape(c_out, c_in, go, gi).transpose(0, 2, 1, 3).reshape(c_out * go, c_in * gi)
        return m / gi, a

    def rotated_bank(self, grid):
        bank = self.params["bank"]
        c_out, k = bank.shape[0], bank.shape[-1]
        mats = kernel_rotation_matrices(grid.elements, k)
        rb = np.einsum("gvu,ou->ogv", mats, bank.reshape(c_out, -1))
        return rb.reshape(c_out * grid.resolution, 1, k, k, k), mats

    def forward(self, f: np.ndarray, in_grid: RotationGrid, out_grid: Optional[RotationGrid] = None) -> np.ndarray:
        out_grid = in_grid if out_grid is None else out_grid
        b, c_in, g_in = f.shape[:3]
        spatial = f.shape[3:]
        c_out = self.params["mixing"].shape[0]
        if c_in != self.params["mixing"].shape[1] or g_in != in_grid.resolution:
            raise ValueError(f"input of shape {f.shape} does not match the layer/grid")
        self.mixing.params = self.params["mixing"]
        m, a = self.mixing_matrix(out_grid, in_grid)
        fin = f.reshape(b, c_in * g_in, -1)
        h = np.matmul(m, fin).reshape((b, c_out * out_grid.resolution) + spatial)
        k = self.kernel_size
        if k == 1:
            rb, mats = None, None
            scale = np.repeat(self.params["bank"].reshape(c_out), out_grid.resolution)
            out = h * scale[None, :, None, None, None]
        else:
            rb, mats = self.rotated_bank(out_grid)
            h = pad_same(h, k // 2)
            out = correlate_padded(h, rb, "depthwise")
        self._cache = (fin, m, a, h, rb, mats, in_grid.resolution, out_grid.resolution, spatial)
        return out.reshape((b, c_out, out_grid.resolution) + spatial)

    def backward(self, upstream: np.ndarray, need_input: bool = True):
        fin, m, a, h, rb, mats, g_in, g_out, spatial = self._cache
        b = upstream.shape[0]
        c_out, c_in, _ = self.params["mixing"].shape
        up = upstream.reshape((b, c_out * g_out) + spatial)
        k = self.kernel_size
        if k == 1:
            scale = np.repeat(self.params["bank"].reshape(c_out), g_out)
            grad_h = up * scale[None, :, None, None, None]
            gs = np.einsum("bpv,bpv->p", up.reshape(b, c_out * g_out, -1), h.reshape(b, c_out * g_out, -1)).reshape(c_out, g_out).sum(axis=1)
            self._accumulate("bank", gs.reshape(self.params["bank"].shape))
        else:
            grad_h, grad_rb = correlate_padded_backward(h, rb, up, "depthwise")
            grad_rb = grad_rb.reshape(c_out, g_out, -1)
            self._accumulate("bank", np.einsum("gvu,ogv->ou", mats, grad_rb).reshape(self.params["bank"].shape))
        gh = grad_h.reshape(b, c_out * g_out, -1)
        grad_m = np.matmul(gh, fin.transpose(0, 2, 1)).sum(axis=0) / g_in
        grad_w = grad_m.reshape(c_out, g_out, c_in, g_in).transpose(0, 2, 1, 3).reshape(c_out, c_in, -1)
        self._accumulate("mixing", expand_kernel_backward(self.mixing, None, grad_w, weights=a))
        if not need_input:
            return None
        grad_f = np.matmul(m.T, gh)
        return grad_f.reshape((b, c_in, g_in) + spatial)


# -- normalization, pooling, activations ---------------------------------------

class _Norm(Layer):
    """Shared affine standardization; subclasses choose the statistics."""

    over_batch = False

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.params["scale"] = np.ones(channels)
        self.params["shift"] = np.zeros(channels)
        self.zero_grad()

    def _normalize(self, x, mu, inv, train):
        b, c = x.shape[:2]
        flat = np.ascontiguousarray(x).reshape(b, c, -1)
        xhat = np.empty_like(flat)
        out = np.empty_like(flat)
        _kernels.norm_apply(flat, mu, inv, self.params["scale"], self.params["shift"], xhat, out)
        self._cache = (xhat, inv, x.shape, train)
        return out.reshape(x.shape)

    def _stats(self, x):
        b, c = x.shape[:2]
        flat = np.ascontiguousarray(x).reshape(b, c, -1)
        mu = np.empty((b, c))
        inv = np.empty((b, c))
        _kernels.norm_stats(flat, self.over_batch, self.eps, mu, inv)
        return mu, inv

    def backward(self, upstream):
        xhat, inv, shape, train = self._cache
        b, c = shape[:2]
        g = np.ascontiguousarray(upstream, dtype=xhat.dtype).reshape(b, c, -1)
        dx = np.empty_like(g)
        gscale = np.zeros(c)
        gshift = np.zeros(c)
        _kernels.norm_backward(g, xhat, inv, self.params["scale"], self.over_batch, train, gscale, gshift, dx)
        self._accumulate("scale", gscale)
        self._accumulate("shift", gshift)
        return dx.reshape(shape)


class GroupInstanceNorm(_Norm):
    """Per-sample, per-channel standardization over (group, space), then a learnable affine map."""

    def forward(self, x):
        mu, inv = self._stats(x)
        return self._normalize(x, mu, inv, True)


class GroupBatchNorm(_Norm):
    """Batch norm with per-channel statistics over (batch, group, space); running stats for eval."""

    over_batch = True

    def __init__(self, channels: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__(channels, eps)
        self.momentum = momentum
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)

    def forward(self, x, training: bool):
        b = x.shape[0]
        if training:
            mu, inv = self._stats(x)
            var = 1.0 / inv[0] ** 2 - self.eps
            m = self.momentum
            self.running_mean = (1 - m) * self.running_mean + m * mu[0]
            self.running_var = (1 - m) * self.running_var + m * var
        else:
            mu = np.broadcast_to(self.running_mean, (b, len(self.running_mean))).copy()
            inv = np.broadcast_to(1.0 / np.sqrt(self.running_var + self.eps), mu.shape).copy()
        return self._normalize(x, mu, inv, training)


class ReLU(Layer):
    def forward(self, x):
        x = np.ascontiguousarray(x)
        out = np.empty_like(x)
        _kernels.relu_fwd(x.reshape(-1), out.reshape(-1))
        self._cache = out
        return out

    def backward(self, upstream):
        y = self._cache
        g = np.ascontiguousarray(upstream, dtype=y.dtype)
        out = np.empty_like(y)
        _kernels.relu_bwd(y.reshape(-1), g.reshape(-1), out.reshape(-1))
        return out


class SpatialMaxPool(Layer):
    """Non-overlapping 2x2x2 max over the trailing spatial axes."""

    def forward(self, x):
        *lead, d, h, w = x.shape
        if d % 2 or h % 2 or w % 2:
            raise ValueError(f"max pooling needs even spatial dims, got {(d, h, w)}")
        v = np.ascontiguousarray(x).reshape(-1, d, h, w)
        out = np.empty((v.shape[0], d // 2, h // 2, w // 2), dtype=x.dtype)
        arg = np.empty(out.shape, dtype=np.int8)
        _kernels.maxpool2_fwd(v, out, arg)
        self._cache = (arg, x.shape)
        return out.reshape(*lead, d // 2, h // 2, w // 2)

    def backward(self, upstream):
        arg, shape = self._cache
        g = np.ascontiguousarray(upstream).reshape(arg.shape)
        out = np.zeros((arg.shape[0],) + tuple(shape[-3:]), dtype=g.dtype)
        _kernels.maxpool2_bwd(g, arg, out)
        return out.reshape(shape)


class GlobalInvariantPool(Layer):
    """Mean over the group axis and space: (B, C, G, D, H, W) -> (B, C)."""

    def forward(self, x):
        self._cache = x.shape
        b, c = x.shape[:2]
        return x.reshape(b, c, -1).mean(axis=2)

    def backward(self, upstream):
        shape = self._cache
        n = int(np.prod(shape[2:]))
        return np.broadcast_to((upstream / n)[:, :, None], (shape[0], shape[1], n)).reshape(shape).copy()


# -- functional surface ---------------------------------------------------------

def lifting_forward(layer: LiftingLayer, f, out_grid: RotationGrid) -> GroupFeatureMap:
    if out_grid.resolution != layer.out_grid_resolution:
        raise ValueError(f"layer expects an output grid of {layer.out_grid_resolution} elements")
    x = np.asarray(getattr(f, "data", f), dtype=np.float64)
    single = x.ndim == 4
    out = layer.forward(x[None] if single else x, out_grid)
    return GroupFeatureMap(out[0] if single else out, out_grid)


def lifting_backward(layer: LiftingLayer, f, out_grid: RotationGrid, upstream):
    """Returns ``(grad_input, {"bank": grad_bank})``."""
    x = np.asarray(getattr(f, "data", f), dtype=np.float64)
    single = x.ndim == 4
    up = np.asarray(upstream)
    layer.forward(x[None] if single else x, out_grid)
    saved = layer.grads
    layer.grads = {}
    try:
        gx = layer.backward(up[None] if single else up)
        grads = layer.grads
    finally:
        layer.grads = saved
    return (gx[0] if single else gx), grads


def gconv_forward(layer: GroupConvLayer, f: GroupFeatureMap, out_grid: RotationGrid) -> GroupFeatureMap:
    if f.grid.resolution < 1:
        raise ValueError("empty input grid")
    data, single = _as_group_batch(f)
    out = layer.forward(data, f.grid, out_grid)
    return GroupFeatureMap(out[0] if single else out, out_grid)


def gconv_backward(layer: GroupConvLayer, f: GroupFeatureMap, out_grid: RotationGrid, upstream):
    """Returns ``(grad_input, {"mixing": ..., "bank": ...})``."""
    data, single = _as_group_batch(f)
    up = np.asarray(upstream)
    layer.forward(data, f.grid, out_grid)
    saved = layer.grads
    layer.grads = {}
    try:
        gx = layer.backward(up[None] if single else up)
        grads = layer.grads
    finally:
        layer.grads = saved
    return (gx[0] if single else gx), grads


def group_instance_norm(f: GroupFeatureMap, eps: float = 1e-5, scale=None, shift=None) -> GroupFeatureMap:
    data, single = _as_group_batch(f)
    norm = GroupInstanceNorm(data.shape[1], eps)
    if scale is not None:
        norm.params["scale"] = np.asarray(scale, dtype=np.float64)
    if shift is not None:
        norm.params["shift"] = np.asarray(shift, dtype=np.float64)
    out = norm.forward(data)
    return GroupFeatureMap(out[0] if single else out, f.grid)


def spatial_max_pool(f: GroupFeatureMap) -> GroupFeatureMap:
    return GroupFeatureMap(SpatialMaxPool().forward(f.data), f.grid)


def global_invariant_pool(f: GroupFeatureMap) -> np.ndarray:
    data, single = _as_group_batch(f)
    out = GlobalInvariantPool().forward(data)
    return out[0] if single else out
