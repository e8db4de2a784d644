"""Small residual networks: a plain 3D CNN and a separable SE(3) group CNN."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import grids
from .gconv import (
    GlobalInvariantPool,
    GroupBatchNorm,
    GroupConvLayer,
    GroupInstanceNorm,
    Layer,
    LiftingLayer,
    ReLU,
    SpatialMaxPool,
)
from .volume import check_bank, correlate_padded, correlate_padded_backward, pad_same

VARIANTS = ("cnn-baseline", "cnn-big", "gcnn")
GRID_KINDS = ("repulsion", "iid-random", "V4", "T12", "O24")

# half-width baseline keeps parameter counts close to gcnn(4), so comparisons are at matched capacity
DEFAULT_CHANNELS = {"cnn-baseline": (4, 4, 8), "cnn-big": (8, 8, 16), "gcnn": (8, 8, 16)}


@dataclass(frozen=True)
class ModelConfig:
    variant: str = "gcnn"
    grid_kind: str = "repulsion"
    resolution: int = 8
    channels: Optional[tuple] = None
    kernel_size: int = 3
    num_classes: int = 4
    in_channels: int = 1
    seed: int = 0
    grid_seed: int = 0

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown model variant {self.variant!r}; expected one of {VARIANTS}")
        if self.grid_kind not in GRID_KINDS:
            raise ValueError(f"unknown grid kind {self.grid_kind!r}; expected one of {GRID_KINDS}")
        if self.channels is not None:
            ch = tuple(int(c) for c in self.channels)
            if len(ch) != 3 or min(ch) < 1:
                raise ValueError(f"channels must be three positive integers, got {self.channels}")
            object.__setattr__(self, "channels", ch)
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise ValueError("kernel_size must be a positive odd integer")
        if self.variant == "gcnn" and self.resolution < 1:
            raise ValueError("grid resolution must be >= 1")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")

    @property
    def widths(self) -> tuple:
        return self.channels if self.channels is not None else DEFAULT_CHANNELS[self.variant]

    @property
    def is_group(self) -> bool:
        return self.variant == "gcnn"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.widths)
        return d


def make_param_grid(cfg: ModelConfig) -> grids.RotationGrid:
    if cfg.grid_kind in grids.rot.SUBGROUP_ORDERS:
        return grids.finite_subgroup(cfg.grid_kind)
    rng = np.random.default_rng(cfg.grid_seed)
    if cfg.grid_kind == "iid-random":
        return grids.iid_random_grid(cfg.resolution, rng, seed=cfg.grid_seed)
    return grids.generate_uniform_grid(cfg.resolution, rng, seed=cfg.grid_seed)


IDENTITY_GRID = grids.RotationGrid(grids.rot.IDENTITY[None], kind="finite-subgroup", name="C1")


class Conv3d(Layer):
    """Dense 3D correlation acting on (B, C, 1, D, H, W) maps."""

    def __init__(self, bank):
        super().__init__()
        self.params["bank"] = check_bank(bank).copy()
        self.zero_grad()

    @classmethod
    def init(cls, c_out, c_in, k, rng):
        bound = np.sqrt(3.0 / (c_in * k**3))
        return cls(rng.uniform(-bound, bound, size=(c_out, c_in, k, k, k)))

    def forward(self, x, grid=None):
        x5 = x[:, :, 0] if x.ndim == 6 else x
        bank = self.params["bank"]
        k = bank.shape[-1]
        if k == 1:
            b, c = x5.shape[:2]
            out = np.matmul(bank[:, :, 0, 0, 0], x5.reshape(b, c, -1)).reshape((b, bank.shape[0]) + x5.shape[2:])
            xp = x5
        else:
            xp = pad_same(x5, k // 2)
            out = correlate_padded(xp, bank, "dense")
        self._cache = xp
        return out[:, :, None]

    def backward(self, upstream, need_input=True):
        xp = self._cache
        bank = self.params["bank"]
        up = np.ascontiguousarray(upstream[:, :, 0])
        if bank.shape[-1] == 1:
            b, co = up.shape[:2]
            g2 = up.reshape(b, co, -1)
            x2 = xp.reshape(b, xp.shape[1], -1)
            self._accumulate("bank", np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(bank.shape))
            gx = np.matmul(bank[:, :, 0, 0, 0].T, g2).reshape(xp.shape) if need_input else None
        else:
            gx, gb = correlate_padded_backward(xp, bank, up, "dense", need_input=need_input)
            self._accumulate("bank", gb)
        return None if gx is None else gx[:, :, None]


class Linear(Layer):
    def __init__(self, weight, bias):
        super().__init__()
        self.params["weight"] = np.asarray(weight, dtype=np.float64)
        self.params["bias"] = np.asarray(bias, dtype=np.float64)
        self.zero_grad()

    @classmethod
    def init(cls, c_out, c_in, rng):
        bound = 1.0 / np.sqrt(c_in)
        return cls(rng.uniform(-bound, bound, (c_out, c_in)), rng.uniform(-bound, bound, c_out))

    def forward(self, x):
        self._cache = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, upstream):
        self._accumulate("weight", upstream.T @ self._cache)
        self._accumulate("bias", upstream.sum(axis=0))
        return upstream @ self.params["weight"]


class ResidualBlock:
    """conv -> norm -> relu -> conv -> norm, plus identity (or 1x1 projection) skip, then relu."""

    def __init__(self, conv1, conv2, c_out, proj=None):
        self.conv1, self.conv2, self.proj = conv1, conv2, proj
        self.norm1, self.norm2 = GroupInstanceNorm(c_out), GroupInstanceNorm(c_out)
        self.relu1, self.relu_out = ReLU(), ReLU()

    def named_layers(self):
        items = [("conv1", self.conv1), ("norm1", self.norm1), ("conv2", self.conv2), ("norm2", self.norm2)]
        if self.proj is not None:
            items.append(("proj", self.proj))
        return items

    def forward(self, x, grid):
        y = self.relu1.forward(self.norm1.forward(self.conv1.forward(x, grid)))
        y = self.norm2.forward(self.conv2.forward(y, grid))
        skip = x if self.proj is None else self.proj.forward(x, grid)
        return self.relu_out.forward(y + skip)

    def backward(self, g):
        g = self.relu_out.backward(g)
        gy = self.conv2.backward(self.norm2.backward(g))
        gx = self.conv1.backward(self.norm1.backward(self.relu1.backward(gy)))
        return gx + (g if self.proj is None else self.proj.backward(g))


class Model:
    """Stem conv + norm, residual block, 2x2x2 max pool, residual block, global pool, linear head."""

    def __init__(self, cfg: ModelConfig, param_grid: Optional[grids.RotationGrid] = None):
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        s, b1, b2 = cfg.widths
        k = cfg.kernel_size
        if cfg.is_group:
            self.param_grid = param_grid if param_grid is not None else make_param_grid(cfg)
            pg = self.param_grid
            self.stem = LiftingLayer.init(s, cfg.in_channels, k, pg.resolution, rng)

            def conv(co, ci, kk):
                return GroupConvLayer.init(co, ci, kk, pg, rng)
        else:
            self.param_grid = IDENTITY_GRID

            def conv(co, ci, kk):
                return Conv3d.init(co, ci, kk, rng)

            self.stem = conv(s, cfg.in_channels, k)
        self.stem_norm = GroupBatchNorm(s)
        self.stem_relu = ReLU()
        self.block1 = ResidualBlock(conv(b1, s, k), conv(b1, b1, k), b1, None if s == b1 else conv(b1, s, 1))
        self.pool = SpatialMaxPool()
        self.block2 = ResidualBlock(conv(b2, b1, k), conv(b2, b2, k), b2, None if b1 == b2 else conv(b2, b1, 1))
        self.gpool = GlobalInvariantPool()
        self.head = Linear.init(cfg.num_classes, b2, rng)
        self.training = False

    # parameter bookkeeping

    def named_layers(self):
        items = [("stem", self.stem), ("stem_norm", self.stem_norm)]
        for name, block in (("block1", self.block1), ("block2", self.block2)):
            items += [(f"{name}.{n}", layer) for n, layer in block.named_layers()]
        items.append(("head", self.head))
        return items

    def parameters(self) -> dict:
        return {f"{ln}.{pn}": p for ln, layer in self.named_layers() for pn, p in layer.params.items()}

    def gradients(self) -> dict:
        return {f"{ln}.{pn}": layer.grads[pn] for ln, layer in self.named_layers() for pn in layer.params}

    def buffers(self) -> dict:
        return {"stem_norm.running_mean": self.stem_norm.running_mean, "stem_norm.running_var": self.stem_norm.running_var}

    def set_tensor(self, name: str, value: np.ndarray):
        if name in self.buffers():
            setattr(self.stem_norm, name.split(".")[1], np.array(value, dtype=np.float64))
            return
        lname, pname = name.rsplit(".", 1)
        layer = dict(self.named_layers())[lname]
        layer.params[pname] = np.array(value, dtype=np.float64)
        if isinstance(layer, GroupConvLayer) and pname == "mixing":
            layer.mixing.params = layer.params["mixing"]

    def num_parameters(self) -> int:
        return int(sum(p.size for p in self.parameters().values()))

    def zero_grad(self):
        for _, layer in self.named_layers():
            layer.zero_grad()

    # grids

    def eval_grid(self) -> grids.RotationGrid:
        return self.param_grid

    def sample_grid(self, rng: np.random.Generator) -> grids.RotationGrid:
        """Training-time grid: a random global rotation of the parameter grid (subgroup grids stay fixed)."""
        if not self.cfg.is_group or self.cfg.grid_kind in grids.rot.SUBGROUP_ORDERS:
            return self.param_grid
        return grids.randomize_grid(self.param_grid, rng)

    # forward / backward

    def features(self, x: np.ndarray, grid: Optional[grids.RotationGrid] = None, training: bool = False):
        """Invariant descriptors (B, C) of a batch of volumes (B, C_in, D, H, W)."""
        grid = self.eval_grid() if grid is None else grid
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 4:
            x = x[None]
        y = self.stem.forward(x, grid)
        y = self.stem_relu.forward(self.stem_norm.forward(y, training))
        y = self.block1.forward(y, grid)
        y = self.pool.forward(y)
        y = self.block2.forward(y, grid)
        return self.gpool.forward(y)

    def forward(self, x, grid=None, training: bool = False) -> np.ndarray:
        return self.head.forward(self.features(x, grid, training))

    def backward(self, grad_logits: np.ndarray, need_input: bool = False):
        g = self.head.backward(grad_logits)
        g = self.gpool.backward(g)
        g = self.block2.backward(g)
        g = self.pool.backward(g)
        g = self.block1.backward(g)
        g = self.stem_norm.backward(self.stem_relu.backward(g))
        gx = self.stem.backward(g, need_input=need_input)
        return gx[:, :, 0] if gx is not None and gx.ndim == 6 else gx


def build_model(cfg: ModelConfig) -> Model:
    return Model(cfg)
