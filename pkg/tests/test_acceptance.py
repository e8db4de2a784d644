"""Acceptance gate: one test per criterion, each printing a single PASS/FAIL line.

Criteria 6 and 7 share one training run of every (variant, seed) pair, which
dominates the runtime of the whole suite (tens of minutes on one core).
"""
import math
import time

import numpy as np
import pytest

from se3gconv import cli, experiments, grids, harness, rbf
from se3gconv import rotations as rot
from se3gconv.checkpoint import load_checkpoint, save_checkpoint
from se3gconv.config import run_config_from_dict
from se3gconv.gconv import GroupConvLayer, LiftingLayer
from se3gconv.gradcheck import LAYER_KINDS, adjoint_checks, layer_gradcheck
from se3gconv.model import Model, ModelConfig
from se3gconv.train import evaluate

SEEDS = (0, 1, 2)
EPOCHS = 30


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'} {title}: {detail}")
        assert ok, detail
    return emit


# 1 -----------------------------------------------------------------------------------

def test_criterion_1_exact_subgroup_equivariance(verdict):
    start = time.perf_counter()
    o24 = grids.finite_subgroup("O24")
    model = Model(ModelConfig("gcnn", grid_kind="O24"))
    x = np.random.default_rng(0).standard_normal((10, 1, 16, 16, 16))
    net = harness.exact_subgroup_report(model, x, "O24").max
    rng = np.random.default_rng(1)
    layer_errs = []
    lift = LiftingLayer.init(4, 1, 3, 24, rng)
    gc = GroupConvLayer.init(4, 4, 3, o24, rng)
    h = rng.standard_normal((2, 4, 24, 8, 8, 8))
    for g in o24.elements:
        layer_errs.append(harness.layer_equivariance_error(lift, x[:2, :, :8, :8, :8], g, o24))
        layer_errs.append(harness.layer_equivariance_error(gc, h, g, o24))
        for name, layer in model.named_layers():
            if name.endswith("norm1") or name.endswith("norm2"):
                layer_errs.append(harness.layer_equivariance_error(layer, h, g, o24))
    layer_max = max(layer_errs)
    elapsed = time.perf_counter() - start
    verdict(1, "exact O24 equivariance",
            net < 1e-6 and layer_max < 1e-10 and elapsed < 120,
            f"network max {net:.2e} (< 1e-6), layer max {layer_max:.2e} (< 1e-10), {elapsed:.0f}s (< 120s)")


# 2 -----------------------------------------------------------------------------------

def test_criterion_2_gradient_correctness(verdict):
    start = time.perf_counter()
    results = [r for kind in LAYER_KINDS for r in layer_gradcheck(kind, seed=0)]
    fd = max(r.error for r in results)
    adj = max(r.error for r in adjoint_checks(seed=0))
    elapsed = time.perf_counter() - start
    verdict(2, "gradient correctness",
            fd < 1e-5 and adj < 1e-10 and elapsed < 300,
            f"worst finite-difference error {fd:.2e} over {len(results)} tensors (< 1e-5), "
            f"worst adjoint identity {adj:.2e} (< 1e-10), {elapsed:.0f}s (< 300s)")


# 3 -----------------------------------------------------------------------------------

def test_criterion_3_rbf_properties(verdict):
    rng = np.random.default_rng(0)
    grid = grids.generate_uniform_grid(8, rng)
    cfg = rbf.RbfConfig(rbf.default_sigma(grid))
    targets = rot.haar_sample(rng, 10_000)
    w = rbf.interp_weights(targets, grid, cfg)
    unity = np.abs(w.sum(axis=1) - 1).max()
    flat = rbf.interp_weights(targets[:100], grid, rbf.RbfConfig(1e6))
    flat_err = np.abs(flat - 1 / grid.resolution).max()
    g = rot.haar_sample(rng, 20)
    left = max(
        np.abs(rbf.interp_weights(rot.quat_mul(gi[None], targets[:500]), grids.rotate_grid(grid, gi), cfg)
               - w[:500]).max()
        for gi in g
    )
    verdict(3, "RBF properties",
            unity < 1e-12 and flat_err < 1e-9 and left < 1e-12,
            f"partition of unity {unity:.1e} (< 1e-12), flat limit {flat_err:.1e} (< 1e-9), "
            f"left invariance {left:.1e} (< 1e-12)")


# 4 -----------------------------------------------------------------------------------

def test_criterion_4_grid_quality(verdict):
    beats = []
    for n in (4, 8, 16, 24):
        for seed in range(5):
            rep = grids.generate_uniform_grid(n, np.random.default_rng(seed)).uniformity
            iid = grids.iid_random_grid(n, np.random.default_rng(seed)).uniformity
            beats.append(rep > iid)
    pair = grids.generate_uniform_grid(2, np.random.default_rng(0)).uniformity
    g = grids.generate_uniform_grid(16, np.random.default_rng(0))
    moved = grids.randomize_grid(g, np.random.default_rng(1))
    iso = np.abs(rot.pairwise_distance(moved.elements, moved.elements)
                 - rot.pairwise_distance(g.elements, g.elements)).max()
    verdict(4, "grid quality",
            all(beats) and pair >= math.pi - 0.05 and iso < 1e-12,
            f"repulsion beats iid on {sum(beats)}/20 (N, seed) pairs, N=2 min distance {pair:.4f} "
            f"(>= {math.pi - 0.05:.4f}), randomize isometry {iso:.1e} (< 1e-12)")


# 5 -----------------------------------------------------------------------------------

def test_criterion_5_resolution_sweep(verdict):
    start = time.perf_counter()
    cfg = run_config_from_dict({"equiv": {"subgroups": [], "n_rotations": 50, "seeds": list(SEEDS)}})
    means = experiments.sweep_means(experiments.run_equiv(cfg))
    values = [means[r] for r in (4, 8, 16)]
    elapsed = time.perf_counter() - start
    verdict(5, "resolution sweep",
            harness.is_non_increasing(values) and elapsed < 600,
            "mean continuous invariance error " + ", ".join(f"N={r}: {means[r]:.4f}" for r in (4, 8, 16))
            + f" (non-increasing, at most one 5% inversion), {elapsed:.0f}s (< 600s)")


# 6 and 7 -----------------------------------------------------------------------------

@pytest.fixture(scope="module")
def benchmark():
    cfg = run_config_from_dict({
        "model": {"resolution": 8},
        "train": {"epochs": EPOCHS, "eval_every": 5},
        "report": {"variants": ["cnn-baseline", "gcnn"], "seeds": list(SEEDS)},
    })
    results = {}
    start = time.perf_counter()
    rows = experiments.run_report(cfg, results)
    elapsed = time.perf_counter() - start
    return {(r["model_variant"], r["seed"]): r for r in rows}, results, elapsed


def _curve(result, split):
    return {r["epoch"]: r["accuracy"] for r in result.metrics if r["split"] == split}


def test_criterion_6_rotated_test_accuracy(benchmark, verdict):
    rows, _, elapsed = benchmark
    drops = [(rows["gcnn", s]["drop_percent"], rows["cnn-baseline", s]["drop_percent"]) for s in SEEDS]
    gain = np.mean([rows["gcnn", s]["rotated_acc"] - rows["cnn-baseline", s]["rotated_acc"] for s in SEEDS])
    ok = all(g < c for g, c in drops) and gain >= 0.10 and elapsed < 45 * 60
    detail = "; ".join(
        f"seed {s}: drop gcnn {g:.1f}% vs cnn {c:.1f}%, rotated acc gcnn {rows['gcnn', s]['rotated_acc']:.3f} "
        f"vs cnn {rows['cnn-baseline', s]['rotated_acc']:.3f}"
        for s, (g, c) in zip(SEEDS, drops)
    )
    verdict(6, "drop in accuracy (gcnn N=8 vs cnn-baseline)", ok,
            f"{detail}; mean rotated gain {100 * gain:.1f} p.p. (>= 10), {elapsed / 60:.1f} min (< 45)")


def test_criterion_7_generalization_curves(benchmark, verdict):
    _, results, _ = benchmark
    lines, ok = [], True
    for s in SEEDS:
        cnn, gc = results["cnn-baseline", s], results["gcnn", s]
        cnn_train = _curve(cnn, "train_eval")[EPOCHS]
        rot_curve = _curve(cnn, "rotated_test")
        late = [a for e, a in rot_curve.items() if e >= EPOCHS // 2]
        plateau = max(late) - min(late) <= 0.05
        cnn_gap = cnn_train - rot_curve[EPOCHS]
        gc_gap = _curve(gc, "train_eval")[EPOCHS] - _curve(gc, "rotated_test")[EPOCHS]
        ok &= cnn_train >= 0.99 and plateau and gc_gap < cnn_gap
        lines.append(f"seed {s}: cnn train {cnn_train:.3f}, cnn rotated range over epochs >= {EPOCHS // 2} "
                     f"{max(late) - min(late):.3f} (<= 0.05), gap gcnn {gc_gap:.3f} vs cnn {cnn_gap:.3f}")
    verdict(7, "generalization gap", ok, "; ".join(lines))


# 8 -----------------------------------------------------------------------------------

def test_criterion_8_determinism_and_persistence(tmp_path, verdict):
    small = ["model.channels=[2,2,3]", "model.resolution=4", "train.epochs=1", "data.n_train=8",
             "data.n_test=4", "equiv.resolutions=[4]", "equiv.seeds=[0]", "equiv.n_rotations=2",
             "equiv.n_volumes=1", "equiv.n_subgroup_volumes=1", "report.seeds=[0]"]
    sets = [a for s in small for a in ("--set", s)]
    mismatches = []

    def run(args):
        assert cli.main(args) == 0, args

    def same(a, b):
        for p in sorted(a.rglob("*")):
            q = b / p.relative_to(a)
            if p.is_file() and p.read_bytes() != q.read_bytes():
                mismatches.append(str(p.relative_to(a)))

    # train: echo written into the output directory
    run(["train", *sets, "--out", str(tmp_path / "t1")])
    run(["train", "--config", str(tmp_path / "t1" / "config.yaml"), "--out", str(tmp_path / "t2")])
    same(tmp_path / "t1", tmp_path / "t2")
    # equiv and report: echo written next to the CSV
    for cmd in ("equiv", "report"):
        (tmp_path / f"{cmd}1").mkdir()
        (tmp_path / f"{cmd}2").mkdir()
        run([cmd, *sets, "--out", str(tmp_path / f"{cmd}1" / "out.csv")])
        run([cmd, "--config", str(tmp_path / f"{cmd}1" / "out.config.yaml"),
             "--out", str(tmp_path / f"{cmd}2" / "out.csv")])
        same(tmp_path / f"{cmd}1", tmp_path / f"{cmd}2")
    # synth: the spec it writes is its own echo
    (tmp_path / "spec.yaml").write_text("n_train: 4\nn_test: 2\n")
    run(["synth", "--spec", str(tmp_path / "spec.yaml"), "--out", str(tmp_path / "s1")])
    run(["synth", "--spec", str(tmp_path / "s1" / "spec.yaml"), "--out", str(tmp_path / "s2")])
    same(tmp_path / "s1", tmp_path / "s2")
    # grid gen is fully determined by its flags
    for name in ("g1.txt", "g2.txt"):
        run(["grid", "gen", "--n", "6", "--seed", "3", "--out", str(tmp_path / name)])
    if (tmp_path / "g1.txt").read_bytes() != (tmp_path / "g2.txt").read_bytes():
        mismatches.append("grid")

    trained = experiments.run_train(run_config_from_dict({}, small), tmp_path / "ck")
    save_checkpoint(trained["model"], tmp_path / "m.ckpt")
    back = load_checkpoint(tmp_path / "m.ckpt")
    test = trained["data"].test
    acc_a, acc_b = evaluate(trained["model"], test), evaluate(back, test)
    verdict(8, "determinism and persistence", not mismatches and acc_a == acc_b,
            f"non-identical re-run files: {mismatches or 'none'}; checkpoint accuracy {acc_a} -> {acc_b}")
