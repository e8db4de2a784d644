"""Synthetic volumetric classification data: rigid tetracube solids or spherical shells."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache
from typing import Optional

import numpy as np
from scipy.ndimage import gaussian_filter

from . import rotations as rot
from .volume import rotate_volume

# unit-cube cells of the eight tetracubes that are distinct under proper rotations
TETRACUBES = {
    "L": [(0, 0, 0), (1, 0, 0), (2, 0, 0), (2, 1, 0)],
    "T": [(0, 0, 0), (1, 0, 0), (2, 0, 0), (1, 1, 0)],
    "S": [(0, 0, 0), (1, 0, 0), (1, 1, 0), (2, 1, 0)],
    "screw-right": [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 1, 1)],
    "screw-left": [(0, 0, 1), (1, 0, 1), (1, 1, 1), (1, 1, 0)],
    "branch": [(0, 0, 0), (1, 0, 0), (1, 1, 0), (1, 0, 1)],
    "I": [(0, 0, 0), (1, 0, 0), (2, 0, 0), (3, 0, 0)],
    "O": [(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0)],
}
SHAPE_ORDER = list(TETRACUBES)


@dataclass(frozen=True)
class SyntheticSpec:
    volume_size: int = 16
    num_classes: int = 4
    anisotropy: str = "anisotropic"
    rotate_train: bool = False
    rotate_test: bool = True
    n_train: int = 400
    n_test: int = 200
    seed: int = 0
    noise: float = 0.1
    smoothing: float = 1.0
    cube_size: float = 2.5
    jitter: int = 1

    def __post_init__(self):
        if self.volume_size < 2 or self.volume_size % 2:
            raise ValueError("volume_size must be even (2x2x2 pooling)")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.anisotropy not in ("isotropic", "anisotropic"):
            raise ValueError(f"anisotropy must be 'isotropic' or 'anisotropic', got {self.anisotropy!r}")
        if self.anisotropy == "anisotropic" and self.num_classes > len(TETRACUBES):
            raise ValueError(f"at most {len(TETRACUBES)} anisotropic classes are available")
        if self.n_train < 0 or self.n_test < 0:
            raise ValueError("sample counts must be non-negative")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Dataset:
    volumes: np.ndarray  # (N, 1, D, H, W)
    labels: np.ndarray  # (N,)
    rotations: Optional[np.ndarray] = None  # (N, 4) applied rotations, if any

    def __len__(self):
        return len(self.labels)

    def __post_init__(self):
        if len(self.volumes) != len(self.labels):
            raise ValueError("volumes and labels differ in length")


@dataclass
class SyntheticData:
    train: Dataset
    test: Dataset
    rotated_test: Optional[Dataset]


def shape_occupancy(name: str, size: int, cube: float, offset=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Binary-ish occupancy of a tetracube centred in a size^3 volume (cell-area antialiased)."""
    key = tuple(float(o) for o in offset)
    return _occupancy(name, int(size), float(cube), key).copy()


@lru_cache(maxsize=512)
def _occupancy(name: str, size: int, cube: float, offset: tuple) -> np.ndarray:
    cells = np.asarray(TETRACUBES[name], dtype=np.float64)
    cells -= cells.mean(axis=0)
    centre = (size - 1) / 2.0 + np.asarray(offset)
    sub = 3  # supersampling per axis
    ticks = (np.arange(size * sub) + 0.5) / sub - 0.5
    p = np.stack(np.meshgrid(ticks, ticks, ticks, indexing="ij"), -1) - centre
    occ = np.zeros(p.shape[:3], dtype=bool)
    for c in cells:
        occ |= np.all(np.abs(p / cube - c) <= 0.5, axis=-1)
    return occ.reshape(size, sub, size, sub, size, sub).mean(axis=(1, 3, 5))


def shell(size: int, radius: float, width: float = 1.0) -> np.ndarray:
    c = (size - 1) / 2.0
    ax = np.arange(size) - c
    r = np.sqrt(ax[:, None, None] ** 2 + ax[None, :, None] ** 2 + ax[None, None, :] ** 2)
    return np.exp(-0.5 * ((r - radius) / width) ** 2)


def _clean_sample(spec: SyntheticSpec, label: int, rng) -> np.ndarray:
    n = spec.volume_size
    if spec.anisotropy == "isotropic":
        radii = np.linspace(0.2 * n, 0.42 * n, spec.num_classes)
        vol = shell(n, radii[label] + rng.uniform(-0.25, 0.25))
        return vol * rng.uniform(0.8, 1.2)
    offset = rng.integers(-spec.jitter, spec.jitter + 1, size=3) if spec.jitter else np.zeros(3)
    vol = shape_occupancy(SHAPE_ORDER[label], n, spec.cube_size, offset)
    if spec.smoothing > 0:
        vol = gaussian_filter(vol, spec.smoothing, mode="constant")
    return vol * rng.uniform(0.8, 1.2)


def _make_split(spec: SyntheticSpec, count: int, rng, rotate: bool, with_rotated: bool):
    labels = np.arange(count) % spec.num_classes
    rng.shuffle(labels)
    n = spec.volume_size
    clean = np.stack([_clean_sample(spec, int(y), rng) for y in labels]) if count else np.zeros((0, n, n, n))
    noise_free = spec.anisotropy == "isotropic"
    noise = np.zeros_like(clean) if noise_free else spec.noise * rng.standard_normal(clean.shape)
    quats = rot.haar_sample(rng, count) if (rotate or with_rotated) and count else np.zeros((count, 4))
    if rotate:
        clean = np.stack([rotate_volume(v, q) for v, q in zip(clean, quats)]) if count else clean
        base = Dataset((clean + noise)[:, None], labels, quats)
        return base, None
    base = Dataset((clean + noise)[:, None], labels)
    if not with_rotated:
        return base, None
    rotated = np.stack([rotate_volume(v, q) for v, q in zip(clean, quats)]) if count else clean
    return base, Dataset((rotated + noise)[:, None], labels, quats)


def generate_synthetic(spec: SyntheticSpec) -> SyntheticData:
    """Train split, unrotated test split and (when ``rotate_test``) its Haar-rotated twin.

    Noise is drawn after rotation and shared between the two test splits,
    so they differ only by the rigid motion of the underlying shapes.
    Isotropic shells are noise-free and centred, hence exactly symmetric.
    """
    rng = np.random.default_rng(spec.seed)
    train, _ = _make_split(spec, spec.n_train, rng, spec.rotate_train, False)
    test, rotated = _make_split(spec, spec.n_test, rng, False, spec.rotate_test)
    return SyntheticData(train, test, rotated)
