"""Rotation grids: repulsion-uniform, finite subgroups and iid samples, plus a text file format."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import rotations as rot

KINDS = ("uniform-repulsion", "finite-subgroup", "iid-random")
FORMAT_VERSION = 1
_MAGIC = "# so3-grid"


class GridFormatError(ValueError):
    """Raised when a grid file cannot be parsed or violates a grid invariant."""

    def __init__(self, message: str, field: Optional[str] = None):
        super().__init__(message)
        self.field = field


@dataclass(frozen=True)
class RepulsionOptions:
    power: float = 3.0
    step_size: float = 0.01
    max_iters: int = 2000
    tol: float = 1e-6


@dataclass(frozen=True, eq=False)
class RotationGrid:
    elements: np.ndarray
    kind: str = "iid-random"
    seed: Optional[int] = None
    name: Optional[str] = None  # subgroup name for finite-subgroup grids
    uniformity: float = field(default=math.nan)

    def __post_init__(self):
        q = np.array(np.atleast_2d(self.elements), dtype=np.float64)
        if np.abs(np.linalg.norm(q, axis=-1) - 1.0).max() > 1e-15:
            q = rot.normalize(q)
        q = rot.canonicalize(q)
        q.setflags(write=False)
        object.__setattr__(self, "elements", q)
        if self.kind not in KINDS:
            raise ValueError(f"unknown grid kind {self.kind!r}")
        if len(q) == 0:
            raise ValueError("a rotation grid needs at least one element")
        if math.isnan(self.uniformity):
            object.__setattr__(self, "uniformity", min_pairwise_distance(q))

    @property
    def resolution(self) -> int:
        return len(self.elements)

    def __len__(self):
        return len(self.elements)

    def __eq__(self, other):
        if not isinstance(other, RotationGrid):
            return NotImplemented
        return (
            self.kind == other.kind
            and self.seed == other.seed
            and self.name == other.name
            and np.array_equal(self.elements, other.elements)
        )

    def matrices(self) -> np.ndarray:
        return rot.quat_to_matrix(self.elements)

    def distance_matrix(self) -> np.ndarray:
        return rot.pairwise_distance(self.elements)


def min_pairwise_distance(q) -> float:
    q = np.asarray(q).reshape(-1, 4)
    if len(q) < 2:
        return math.pi
    d = rot.pairwise_distance(q)
    np.fill_diagonal(d, np.inf)
    return float(d.min())


def uniformity_stats(grid: RotationGrid) -> dict:
    """Brute-force minimum and mean nearest-neighbour geodesic distance."""
    if grid.resolution < 2:
        raise ValueError("uniformity statistics need at least two grid elements")
    d = grid.distance_matrix()
    np.fill_diagonal(d, np.inf)
    nn = d.min(axis=1)
    return {"min": float(nn.min()), "mean_nearest_neighbor": float(nn.mean())}


def finite_subgroup(name: str) -> RotationGrid:
    return RotationGrid(rot.finite_subgroup_elements(name), kind="finite-subgroup", name=name)


def iid_random_grid(n: int, rng: np.random.Generator, seed: Optional[int] = None) -> RotationGrid:
    if n < 1:
        raise ValueError("grid resolution must be >= 1")
    return RotationGrid(rot.haar_sample(rng, n), kind="iid-random", seed=seed)


def _repulsion_step(q: np.ndarray, opts: RepulsionOptions) -> np.ndarray:
    """Tangent-space displacement of every point on the projective 3-sphere."""
    n = len(q)
    disp = np.zeros_like(q)
    for sign in (1.0, -1.0):
        v = sign * q  # (n, 4) images of the other points
        c = np.clip(q @ v.T, -1.0, 1.0)  # c[i, j] = <q_i, s q_j>
        theta = np.arccos(c)
        away = c[..., None] * q[:, None, :] - v[None, :, :]  # tangent at q_i pointing away from s q_j
        norm = np.linalg.norm(away, axis=-1)
        mask = norm > 1e-15
        if sign > 0:
            mask &= ~np.eye(n, dtype=bool)
        dist = np.where(mask, 2.0 * theta, 1.0)  # SO(3) distance of the pair
        mag = np.where(mask, dist ** (-opts.power) / np.where(mask, norm, 1.0), 0.0)
        disp += np.einsum("ij,ijk->ik", mag, away)
    # project away any radial drift before stepping
    disp -= np.sum(disp * q, axis=1, keepdims=True) * q
    return opts.step_size * disp


def generate_uniform_grid(
    n: int, rng: np.random.Generator, opts: RepulsionOptions = RepulsionOptions(), seed: Optional[int] = None
) -> RotationGrid:
    """Spread ``n`` Haar samples over SO(3) by pairwise inverse-power repulsion.

    Each point is pushed away from every other point and its antipode, so
    the packing happens on SO(3) rather than on one hemisphere of S^3. The
    iterate with the largest minimum pairwise distance is returned, which is
    never worse than the random initialisation.
    """
    if n < 1:
        raise ValueError("grid resolution must be >= 1")
    q = rot.haar_sample(rng, n)
    if n == 1:
        return RotationGrid(q, kind="uniform-repulsion", seed=seed, uniformity=math.pi)
    best, best_min = q.copy(), min_pairwise_distance(q)
    for _ in range(opts.max_iters):
        step = _repulsion_step(q, opts)
        q = rot.normalize(q + step)
        cur = min_pairwise_distance(q)
        if cur > best_min:
            best, best_min = q.copy(), cur
        if np.linalg.norm(step, axis=1).max() < opts.tol:
            break
    return RotationGrid(best, kind="uniform-repulsion", seed=seed)


def randomize_grid(grid: RotationGrid, rng: np.random.Generator) -> RotationGrid:
    """Left-multiply every element by one shared Haar-random rotation."""
    return rotate_grid(grid, rot.haar_sample(rng))


def rotate_grid(grid: RotationGrid, g) -> RotationGrid:
    elems = rot.quat_mul(np.asarray(g)[None, :], grid.elements)
    return replace(grid, elements=elems, uniformity=grid.uniformity)


def check_closure(q: np.ndarray, tol: float = 1e-10) -> bool:
    prods = rot.quat_mul(q[:, None, :], q[None, :, :]).reshape(-1, 4)
    d = rot.pairwise_distance(prods, q)
    return bool(np.all(d.min(axis=1) <= tol))


# -- file format -----------------------------------------------------------

_HEADER_FIELDS = ("format-version", "N", "kind", "name", "seed", "min-distance", "mean-nn-distance")


def format_grid(grid: RotationGrid) -> str:
    if grid.resolution >= 2:
        stats = uniformity_stats(grid)
        mind, mnn = stats["min"], stats["mean_nearest_neighbor"]
    else:
        mind = mnn = math.pi
    header = {
        "format-version": FORMAT_VERSION,
        "N": grid.resolution,
        "kind": grid.kind,
        "name": grid.name if grid.name is not None else "none",
        "seed": grid.seed if grid.seed is not None else "none",
        "min-distance": repr(float(mind)),
        "mean-nn-distance": repr(float(mnn)),
    }
    lines = [_MAGIC] + [f"{k}: {header[k]}" for k in _HEADER_FIELDS] + ["---"]
    for q in rot.canonicalize(grid.elements):
        lines.append(" ".join(f"{c:.17e}" for c in q))
    return "\n".join(lines) + "\n"


def save_grid(grid: RotationGrid, path) -> None:
    Path(path).write_text(format_grid(grid))


def parse_grid(text: str) -> RotationGrid:
    lines = text.splitlines()
    if not lines or lines[0].strip() != _MAGIC:
        raise GridFormatError("missing grid file magic line", field="magic")
    header = {}
    i = 1
    while i < len(lines) and lines[i].strip() != "---":
        key, sep, value = lines[i].partition(":")
        if not sep:
            raise GridFormatError(f"malformed header line {i + 1}: {lines[i]!r}", field=key.strip())
        header[key.strip()] = value.strip()
        i += 1
    for key in _HEADER_FIELDS:
        if key not in header:
            raise GridFormatError(f"grid header is missing field {key!r}", field=key)
    if i >= len(lines):
        raise GridFormatError("grid header is not terminated by '---'", field="---")
    if int(header["format-version"]) != FORMAT_VERSION:
        raise GridFormatError(f"unsupported format-version {header['format-version']}", field="format-version")
    try:
        n = int(header["N"])
    except ValueError:
        raise GridFormatError(f"N is not an integer: {header['N']!r}", field="N") from None
    kind = header["kind"]
    if kind not in KINDS:
        raise GridFormatError(f"unknown grid kind {kind!r}", field="kind")
    body = [ln for ln in lines[i + 1:] if ln.strip()]
    if len(body) < n:
        raise GridFormatError(f"expected {n} quaternion rows, found {len(body)}", field=f"element[{len(body)}]")
    if len(body) > n:
        raise GridFormatError(f"expected {n} quaternion rows, found {len(body)}", field="N")
    try:
        q = np.array([[float(t) for t in ln.split()] for ln in body])
    except ValueError as exc:
        raise GridFormatError(f"non-numeric quaternion component: {exc}", field="elements") from None
    if q.shape != (n, 4):
        raise GridFormatError("every quaternion row needs exactly four components", field="elements")
    dev = np.abs(np.linalg.norm(q, axis=1) - 1.0)
    if dev.max() > 1e-6:
        raise GridFormatError(f"quaternion norm deviates from 1 by {dev.max():.3g} (> 1e-6)", field="elements")
    if dev.max() > 1e-12:
        warnings.warn(f"grid quaternions deviate from unit norm by {dev.max():.3g}; renormalizing", stacklevel=3)
    seed = None if header["seed"] == "none" else int(header["seed"])
    name = None if header["name"] == "none" else header["name"]
    grid = RotationGrid(q, kind=kind, seed=seed, name=name)
    if kind == "finite-subgroup" and not check_closure(grid.elements):
        raise GridFormatError("finite-subgroup grid is not closed under composition", field="elements")
    return grid


def load_grid(path) -> RotationGrid:
    return parse_grid(Path(path).read_text())
