"""Finite-difference and adjoint checks for every hand-written backward pass."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import grids, rbf
from .gconv import GroupBatchNorm, GroupConvLayer, GroupInstanceNorm, LiftingLayer
from .model import Conv3d, Linear, Model, ModelConfig
from .train import cross_entropy
from .volume import correlate3d, correlate3d_backward, rotate_kernel, rotate_kernel_adjoint

STEP = 1e-5
LAYER_TOL = 1e-5
MODEL_TOL = 1e-4
ADJOINT_TOL = 1e-10


@dataclass(frozen=True)
class CheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return bool(np.isfinite(self.error) and self.error < self.tol)


def relative_error(a: float, b: float) -> float:
    return abs(a - b) / max(abs(a), abs(b), 1e-12)


def directional_derivative(loss, arr: np.ndarray, direction: np.ndarray, h: float = STEP) -> float:
    """Central difference of ``loss()`` along ``direction``, perturbing ``arr`` in place."""
    arr += h * direction
    up = loss()
    arr -= 2 * h * direction
    down = loss()
    arr += h * direction
    return (up - down) / (2 * h)


def check_tensors(loss, analytic: dict, tensors: dict, rng, h: float = STEP, n_dirs: int = 2) -> dict:
    """Worst relative error per tensor over ``n_dirs`` random unit directions.

    ``loss()`` must re-run the forward pass on the current tensor values;
    ``analytic[name]`` is the gradient computed at the unperturbed point.
    """
    out = {}
    for name, arr in tensors.items():
        worst = 0.0
        for _ in range(n_dirs):
            d = rng.standard_normal(arr.shape)
            d /= np.linalg.norm(d)
            fd = directional_derivative(loss, arr, d, h)
            worst = max(worst, relative_error(fd, float(np.sum(analytic[name] * d))))
        out[name] = worst
    return out


def _layer_case(kind: str, rng):
    """(layer, input, forward callable, backward callable) for a small instance of ``kind``."""
    g4 = grids.generate_uniform_grid(4, np.random.default_rng(1))
    if kind == "lifting":
        layer = LiftingLayer.init(2, 2, 3, 4, rng)
        x = rng.standard_normal((2, 2, 5, 5, 5))
        return layer, x, (lambda z: layer.forward(z, g4)), layer.backward
    if kind == "gconv":
        layer = GroupConvLayer.init(3, 2, 3, g4, rng)
        x = rng.standard_normal((2, 2, 4, 5, 5, 5))
        # an output grid different from the parameter grid exercises the RBF interpolation path
        out_grid = grids.randomize_grid(g4, np.random.default_rng(7))
        return layer, x, (lambda z: layer.forward(z, g4, out_grid)), layer.backward
    if kind == "gconv-1x1":
        layer = GroupConvLayer.init(3, 2, 1, g4, rng)
        x = rng.standard_normal((2, 2, 4, 4, 4, 4))
        return layer, x, (lambda z: layer.forward(z, g4)), layer.backward
    if kind == "instance-norm":
        layer = GroupInstanceNorm(3)
        layer.params["scale"] = rng.uniform(0.5, 1.5, 3)
        layer.params["shift"] = rng.standard_normal(3)
        x = 3.0 * rng.standard_normal((2, 3, 4, 3, 3, 3))
        return layer, x, layer.forward, layer.backward
    if kind == "batch-norm":
        layer = GroupBatchNorm(3)
        layer.params["scale"] = rng.uniform(0.5, 1.5, 3)
        layer.params["shift"] = rng.standard_normal(3)
        x = 3.0 * rng.standard_normal((2, 3, 4, 3, 3, 3))
        return layer, x, (lambda z: layer.forward(z, True)), layer.backward
    if kind == "conv3d":
        layer = Conv3d.init(3, 2, 3, rng)
        x = rng.standard_normal((2, 2, 1, 5, 5, 5))
        return layer, x, layer.forward, layer.backward
    if kind == "linear":
        layer = Linear.init(4, 5, rng)
        x = rng.standard_normal((3, 5))
        return layer, x, layer.forward, layer.backward
    raise ValueError(f"unknown layer kind {kind!r}")


LAYER_KINDS = ("lifting", "gconv", "gconv-1x1", "instance-norm", "batch-norm", "conv3d", "linear")


def layer_gradcheck(kind: str, seed: int = 0, h: float = STEP) -> list[CheckResult]:
    """Gradients of ``<layer(x), u>`` w.r.t. every parameter tensor and the input."""
    rng = np.random.default_rng(seed)
    layer, x, fwd, bwd = _layer_case(kind, rng)
    u = rng.standard_normal(fwd(x).shape)

    def loss():
        return float(np.sum(fwd(x) * u))

    loss()
    layer.zero_grad()
    gx = bwd(u)
    analytic = dict(layer.grads)
    analytic["input"] = gx
    tensors = dict(layer.params)
    tensors["input"] = x
    errs = check_tensors(loss, analytic, tensors, rng, h)
    return [CheckResult(f"{kind}.{name}", e, LAYER_TOL) for name, e in errs.items()]


def model_gradcheck(variant: str, seed: int = 0, h: float = STEP) -> list[CheckResult]:
    """End-to-end cross-entropy gradient of a small model on a 2-sample batch."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(variant, resolution=4, channels=(2, 2, 3), num_classes=3, seed=seed, grid_seed=seed)
    model = Model(cfg)
    x = rng.standard_normal((2, 1, 8, 8, 8))
    y = np.array([0, 2])
    grid = model.sample_grid(np.random.default_rng(seed + 1))

    def loss():
        return cross_entropy(model.forward(x, grid, training=True), y)[0]

    model.zero_grad()
    _, g = cross_entropy(model.forward(x, grid, training=True), y)
    gx = model.backward(g, need_input=True)
    analytic = dict(model.gradients())
    analytic["input"] = gx
    tensors = dict(model.parameters())
    tensors["input"] = x
    errs = check_tensors(loss, analytic, tensors, rng, h, n_dirs=1)
    return [CheckResult(f"{variant}.{name}", e, MODEL_TOL) for name, e in errs.items()]


def _inner_identity(lhs: float, rhs: float) -> float:
    return abs(lhs - rhs) / max(1.0, abs(lhs), abs(rhs))


def adjoint_checks(seed: int = 0) -> list[CheckResult]:
    """``<A x, y> == <x, A^T y>`` for the linear maps whose adjoints the backward passes rely on."""
    rng = np.random.default_rng(seed)
    out = []
    q = grids.rot.haar_sample(rng)
    a, b = rng.standard_normal((2, 3, 3, 3, 3)), rng.standard_normal((2, 3, 3, 3, 3))
    out.append(CheckResult("adjoint.rotate_kernel", _inner_identity(
        np.sum(rotate_kernel(a, q) * b), np.sum(a * rotate_kernel_adjoint(b, q))), ADJOINT_TOL))

    f = rng.standard_normal((2, 5, 6, 4))
    bank = rng.standard_normal((3, 2, 3, 3, 3))
    u = rng.standard_normal((3, 5, 6, 4))
    gx, gb = correlate3d_backward(f, bank, u, "dense")
    val = np.sum(correlate3d(f, bank, "dense") * u)
    out.append(CheckResult("adjoint.correlate.input", _inner_identity(val, np.sum(f * gx)), ADJOINT_TOL))
    out.append(CheckResult("adjoint.correlate.bank", _inner_identity(val, np.sum(bank * gb)), ADJOINT_TOL))

    dw = rng.standard_normal((3, 1, 3, 3, 3))
    fd = rng.standard_normal((3, 5, 6, 4))
    gx, gb = correlate3d_backward(fd, dw, u, "depthwise")
    val = np.sum(correlate3d(fd, dw, "depthwise") * u)
    out.append(CheckResult("adjoint.depthwise.input", _inner_identity(val, np.sum(fd * gx)), ADJOINT_TOL))
    out.append(CheckResult("adjoint.depthwise.bank", _inner_identity(val, np.sum(dw * gb)), ADJOINT_TOL))

    g8 = grids.generate_uniform_grid(8, np.random.default_rng(3))
    kern = rbf.GroupMixingKernel.init(g8, 2, 3, rng)
    targets = grids.rot.haar_sample(rng, 11)
    up = rng.standard_normal((2, 3, 11))
    lhs = np.sum(rbf.expand_kernel(kern, targets) * up)
    rhs = np.sum(kern.params * rbf.expand_kernel_backward(kern, targets, up))
    out.append(CheckResult("adjoint.expand_kernel", _inner_identity(lhs, rhs), ADJOINT_TOL))
    return out


def run_suite(variant: str = "gcnn", seed: int = 0) -> list[CheckResult]:
    """All layer checks, all adjoint identities and the end-to-end check of one model variant."""
    results = []
    for kind in LAYER_KINDS:
        results += layer_gradcheck(kind, seed)
    results += adjoint_checks(seed)
    results += model_gradcheck(variant, seed)
    return results
