"""End-to-end protocols shared by the CLI, the acceptance tests and the scripts."""
from __future__ import annotations

import csv
import dataclasses
import logging
from pathlib import Path

import numpy as np

from . import grids, harness
from . import rotations as rot
from .checkpoint import save_checkpoint
from .config import RunConfig
from .data import SyntheticSpec, generate_synthetic
from .model import Model, ModelConfig, make_param_grid
from .train import train
from .volume import save_volume

log = logging.getLogger(__name__)

EQUIV_COLUMNS = ("mode", "grid_kind", "grid_resolution", "seed", "n_rotations", "mean_error", "max_error")


def build(model_cfg: ModelConfig, grid_opts: grids.RepulsionOptions | None = None) -> Model:
    """Model whose repulsion grid (if any) uses ``grid_opts``."""
    if model_cfg.is_group and model_cfg.grid_kind == "repulsion" and grid_opts is not None:
        rng = np.random.default_rng(model_cfg.grid_seed)
        grid = grids.generate_uniform_grid(model_cfg.resolution, rng, grid_opts, seed=model_cfg.grid_seed)
        return Model(model_cfg, param_grid=grid)
    return Model(model_cfg, param_grid=make_param_grid(model_cfg) if model_cfg.is_group else None)


def seeded(model_cfg: ModelConfig, variant: str, seed: int) -> ModelConfig:
    """Variant ``variant`` with model, grid seeds set to ``seed`` (explicit channels are kept only for the same variant)."""
    channels = model_cfg.channels if variant == model_cfg.variant else None
    return dataclasses.replace(model_cfg, variant=variant, seed=seed, grid_seed=seed, channels=channels)


def eval_sets(data) -> dict:
    sets = {"train_eval": data.train, "test": data.test}
    if data.rotated_test is not None:
        sets["rotated_test"] = data.rotated_test
    return sets


def write_echo(cfg: RunConfig, path) -> None:
    Path(path).write_text(cfg.to_yaml())


# -- train ------------------------------------------------------------------------

def run_train(cfg: RunConfig, out_dir) -> dict:
    """Train ``cfg.model`` on synthetic data; writes config.yaml, metrics.csv and model.ckpt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_echo(cfg, out / "config.yaml")
    data = generate_synthetic(cfg.data)
    model = build(cfg.model, cfg.grid)
    result = train(model, data.train, cfg.train, eval_sets(data), metrics_path=out / "metrics.csv")
    save_checkpoint(model, out / "model.ckpt")
    return {"model": model, "result": result, "data": data}


# -- synth ------------------------------------------------------------------------

def run_synth(spec: SyntheticSpec, out_dir) -> int:
    """Write every sample as a volume file plus a labels.csv index; returns the sample count."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = generate_synthetic(spec)
    rows = []
    for split, ds in (("train", data.train), ("test", data.test), ("rotated_test", data.rotated_test)):
        if ds is None:
            continue
        (out / split).mkdir(exist_ok=True)
        for i, (vol, label) in enumerate(zip(ds.volumes, ds.labels)):
            name = f"{split}/{i:05d}.vol"
            extra = {"label": str(int(label)), "split": split}
            if ds.rotations is not None:
                extra["rotation"] = " ".join(repr(float(c)) for c in ds.rotations[i])
            save_volume(vol, out / name, extra)
            rows.append((name, split, int(label)))
    with open(out / "labels.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("path", "split", "label"))
        w.writerows(rows)
    return len(rows)


# -- drop-in-accuracy report ------------------------------------------------------------

def run_report(cfg: RunConfig, results: dict | None = None) -> list[dict]:
    """Train every (variant, seed) of ``cfg.report`` and measure accuracy drop and invariance.

    Data come from ``cfg.data`` (one dataset shared by all runs); each run
    seeds its model, grid and training order from the report seed. When
    ``results`` is a dict it receives the TrainResult of every run, keyed by
    ``(variant, seed)``.
    """
    if not cfg.data.rotate_test:
        raise ValueError("the drop-in-accuracy protocol needs rotate_test: true")
    data = generate_synthetic(cfg.data)
    probe = probe_volumes(cfg.data, cfg.report.n_inv_volumes)
    rows = []
    for variant in cfg.report.variants:
        for seed in cfg.report.seeds:
            model = build(seeded(cfg.model, variant, seed), cfg.grid)
            tcfg = dataclasses.replace(cfg.train, seed=seed)
            res = train(model, data.train, tcfg, eval_sets(data))
            if results is not None:
                results[(variant, seed)] = res
            drop = harness.drop_in_accuracy_report(model, data.test, data.rotated_test)
            qs = rot.haar_sample(np.random.default_rng(10_000 + seed), cfg.report.n_inv_rotations)
            inv = harness.equivariance_report(model, probe, qs, "continuous")
            row = {
                "model_variant": variant,
                "grid_resolution": model.param_grid.resolution,
                "seed": seed,
                **drop,
                "mean_inv_error": inv.mean,
                "max_inv_error": inv.max,
            }
            log.info("report %s seed %d: acc %.3f rotated %.3f drop %.1f%%", variant, seed,
                     row["acc"], row["rotated_acc"], row["drop_percent"])
            rows.append(row)
    return rows


# -- equivariance sweeps ---------------------------------------------------------------

def probe_volumes(spec: SyntheticSpec, n: int) -> np.ndarray:
    """Noise-free smooth shapes for continuous invariance measurements.

    White noise is not band-limited, so trilinear resampling of it is not a
    faithful rotation; leaving it out keeps the metric about the model.
    """
    spec = dataclasses.replace(spec, n_train=0, n_test=n, rotate_test=False, rotate_train=False, noise=0.0)
    return generate_synthetic(spec).test.volumes


def run_equiv(cfg: RunConfig) -> list[dict]:
    """Exact-subgroup reports for ``cfg.equiv.subgroups`` and the continuous resolution sweep."""
    rows = []
    e = cfg.equiv
    rng = np.random.default_rng(cfg.data.seed)
    n = cfg.data.volume_size
    noise = rng.standard_normal((e.n_subgroup_volumes, cfg.model.in_channels, n, n, n))
    for name in e.subgroups:
        model = build(dataclasses.replace(cfg.model, variant="gcnn", grid_kind=name, channels=None))
        rep = harness.exact_subgroup_report(model, noise, name)
        rows.append({"mode": rep.mode, "grid_kind": name, "grid_resolution": rep.grid_resolution,
                     "seed": cfg.model.seed, "n_rotations": len(rep.per_rotation), "mean_error": rep.mean,
                     "max_error": rep.max})
    probe = probe_volumes(cfg.data, e.n_volumes)
    for res in e.resolutions:
        for seed in e.seeds:
            mcfg = dataclasses.replace(cfg.model, variant="gcnn", grid_kind="repulsion", resolution=res,
                                       seed=seed, grid_seed=seed, channels=None)
            rep = harness.continuous_report(build(mcfg, cfg.grid), probe, e.n_rotations, seed=seed)
            rows.append({"mode": rep.mode, "grid_kind": "repulsion", "grid_resolution": res, "seed": seed,
                         "n_rotations": e.n_rotations, "mean_error": rep.mean, "max_error": rep.max})
    return rows


def sweep_means(rows: list[dict]) -> dict:
    """Seed-averaged continuous mean error per resolution from :func:`run_equiv` rows."""
    out: dict = {}
    for r in rows:
        if r["mode"] == "continuous":
            out.setdefault(r["grid_resolution"], []).append(r["mean_error"])
    return {k: float(np.mean(v)) for k, v in sorted(out.items())}

