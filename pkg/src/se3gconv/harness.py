"""Equivariance and invariance measurements, plus the rotated-test accuracy protocol."""
from __future__ import annotations

import csv
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import rotations as rot
from .gconv import LiftingLayer, GroupConvLayer
from .grids import RotationGrid
from .train import evaluate
from .volume import rotate_volume

REPORT_COLUMNS = (
    "model_variant", "grid_resolution", "seed", "acc", "rotated_acc", "drop_percent", "mean_inv_error", "max_inv_error",
)
MODES = ("exact-subgroup", "continuous")


def group_permutation(grid: RotationGrid, g, tol: float = 1e-8) -> np.ndarray:
    """Index array ``p`` with ``grid[p[j]] == g^-1 grid[j]``; raises if ``g`` does not map the grid to itself."""
    target = rot.quat_mul(rot.quat_inverse(rot.as_quat(g))[None], grid.elements)
    dist = rot.pairwise_distance(target, grid.elements)
    perm = dist.argmin(axis=1)
    if dist[np.arange(len(perm)), perm].max() > tol or len(set(perm.tolist())) != len(perm):
        raise ValueError("rotation does not permute the grid (is it an element of the grid's subgroup?)")
    return perm


def act_on_group_map(f: np.ndarray, grid: RotationGrid, g) -> np.ndarray:
    """``(T_g F)(x, R) = F(g^-1 x, g^-1 R)`` for maps (..., G, D, H, W) on a subgroup grid."""
    perm = group_permutation(grid, g)
    return rotate_volume(np.take(f, perm, axis=-4), g)


def _rel(a, b) -> float:
    return float(np.linalg.norm(a - b) / (np.linalg.norm(b) + 1e-12))


def invariance_error(model, volume: np.ndarray, g) -> float:
    """Relative L2 change of the pre-classifier descriptor when the input volume is rotated by ``g``."""
    v = np.asarray(volume, dtype=np.float64)
    single = v.ndim == 4
    batch = v[None] if single else v
    d = model.features(batch)
    dr = model.features(rotate_volume(batch, g))
    errs = np.linalg.norm(dr - d, axis=1) / (np.linalg.norm(d, axis=1) + 1e-12)
    return float(errs[0]) if single else errs


def layer_equivariance_error(layer, f: np.ndarray, g, grid: RotationGrid) -> float:
    """``|Layer(T_g f) - T'_g Layer(f)| / |T'_g Layer(f)|`` with permutation actions on a subgroup grid.

    Lifting layers take plain volumes (B, C, D, H, W); every other layer takes
    group maps (B, C, G, D, H, W). ``g`` must lie in the grid's subgroup.
    """
    group_permutation(grid, g)  # validates g before any work
    f = np.asarray(f, dtype=np.float64)
    if isinstance(layer, (LiftingLayer, GroupConvLayer)):
        def apply(x):
            return layer.forward(x, grid)
    else:
        apply = layer.forward
    if isinstance(layer, LiftingLayer):
        moved_in = rotate_volume(f, g)
    else:
        moved_in = act_on_group_map(f, grid, g)
    expected = act_on_group_map(apply(f), grid, g)
    return _rel(apply(moved_in), expected)


@dataclass
class EquivarianceReport:
    mode: str
    grid_resolution: int
    per_rotation: list = field(default_factory=list)  # (angle, mean relative error over inputs)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    @property
    def errors(self) -> np.ndarray:
        return np.array([e for _, e in self.per_rotation])

    @property
    def mean(self) -> float:
        return float(self.errors.mean()) if self.per_rotation else 0.0

    @property
    def max(self) -> float:
        return float(self.errors.max()) if self.per_rotation else 0.0


def equivariance_report(model, volumes: np.ndarray, rotations: np.ndarray, mode: str) -> EquivarianceReport:
    """Invariance error of ``model`` for every rotation, averaged over the input volumes."""
    volumes = np.asarray(volumes, dtype=np.float64)
    base = model.features(volumes)
    norms = np.linalg.norm(base, axis=1) + 1e-12
    report = EquivarianceReport(mode, model.param_grid.resolution)
    for q in rot.as_quat(rotations).reshape(-1, 4):
        moved = model.features(rotate_volume(volumes, q))
        err = np.linalg.norm(moved - base, axis=1) / norms
        if not np.all(np.isfinite(err)):
            raise FloatingPointError("non-finite invariance error")
        report.per_rotation.append((float(rot.rotation_angle(q)), float(err.mean())))
    return report


def exact_subgroup_report(model, volumes: np.ndarray, subgroup: str = "O24") -> EquivarianceReport:
    return equivariance_report(model, volumes, rot.finite_subgroup_elements(subgroup), "exact-subgroup")


def continuous_report(model, volumes: np.ndarray, n_rotations: int = 50, seed: int = 0) -> EquivarianceReport:
    qs = rot.haar_sample(np.random.default_rng(seed), n_rotations)
    return equivariance_report(model, volumes, qs, "continuous")


def resolution_sweep(make_model, volumes: np.ndarray, resolutions=(4, 8, 16), seeds=(0, 1, 2),
                     n_rotations: int = 50) -> dict:
    """Mean continuous invariance error per grid resolution, averaged over seeds.

    ``make_model(resolution, seed)`` builds the model; the Haar rotations for a
    seed are shared by every resolution so the comparison is paired.
    """
    out = {}
    for res in resolutions:
        errs = [continuous_report(make_model(res, s), volumes, n_rotations, seed=s).mean for s in seeds]
        out[res] = float(np.mean(errs))
    return out


def is_non_increasing(values, max_inversions: int = 1, tolerance: float = 0.05) -> bool:
    """True when every step is non-increasing, except at most ``max_inversions`` rises of at most ``tolerance`` (relative)."""
    inversions = 0
    for prev, cur in zip(values, values[1:]):
        if cur > prev:
            if cur > prev * (1 + tolerance):
                return False
            inversions += 1
    return inversions <= max_inversions


def drop_in_accuracy_report(model, test_set, rotated_test_set, train_set=None) -> dict:
    """Accuracy on the unrotated and rotated test sets and the relative drop in percent.

    The drop is NaN (with a warning) when the unrotated accuracy is zero.
    """
    acc = evaluate(model, test_set)
    rotated_acc = evaluate(model, rotated_test_set)
    if acc == 0:
        warnings.warn("unrotated accuracy is zero; drop in accuracy is undefined", RuntimeWarning, stacklevel=2)
        drop = math.nan
    else:
        drop = 100.0 * (acc - rotated_acc) / acc
    out = {"acc": acc, "rotated_acc": rotated_acc, "drop_percent": drop}
    if train_set is not None:
        out["train_acc"] = evaluate(model, train_set)
    return out


def write_csv(rows, path, columns) -> None:
    """Rows as CSV in ``columns`` order; floats are written with repr so they round-trip exactly."""
    with open(Path(path), "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def write_report_csv(rows, path) -> None:
    write_csv(rows, path, REPORT_COLUMNS)
