"""End-to-end acceptance checks, one test per criterion.

Each test records a pass/fail line that is printed in the pytest terminal
summary under "acceptance criteria".
"""

import math
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from bilayerseg import annotations as A
from bilayerseg import mask_head as M
from bilayerseg import sod as S
from bilayerseg import tensor as T
from bilayerseg import transformer as TR
from bilayerseg.bench import TrainConfig, compare_variants, train
from bilayerseg.gradcheck import run_gradchecks
from bilayerseg.shapes import gen_isolated, gen_shapes_seeded
from bilayerseg.tensor import Tensor

import oracles as O
from test_annotations import crafted_split_dataset, fake_pair, split_oracle
from test_sod import cob_oracle, crafted_cob_dataset

ABLATION_VARIANTS = ("single-fcn", "bilayer-fcn", "bilayer-gcn")


def test_c01_gradient_correctness(criterion):
    start = time.process_time()
    results = run_gradchecks(trials=20, seed=0)
    cpu = time.process_time() - start
    worst = max(results, key=results.get)
    ok = all(v <= 1e-4 for v in results.values()) and cpu < 120.0
    criterion(1, ok, f"{len(results)} cases x 20 trials, worst {worst} {results[worst]:.2e}, {cpu:.0f}s CPU")
    assert ok, results


def test_c02_rows_sum_to_one(criterion):
    rng = np.random.default_rng(2)
    worst = 0.0
    for i in range(1000):
        scale = 1e4 if i % 2 else 1.0
        x = rng.uniform(-scale, scale, size=(int(rng.integers(1, 6)), int(rng.integers(1, 12))))
        worst = max(worst, np.abs(T.softmax(x).data.sum(axis=-1) - 1.0).max())
        k = 4
        p = M.init_nonlocal(rng, k)
        nodes = rng.uniform(-scale, scale, size=(int(rng.integers(1, 20)), k))
        worst = max(worst, np.abs(M.adjacency(Tensor(nodes), p).data.sum(axis=-1) - 1.0).max())
    ok = worst <= 1e-9
    criterion(2, ok, f"max row-sum deviation {worst:.1e} over 1000 softmax + 1000 adjacency inputs")
    assert ok


def test_c03_identity_degeneracies(criterion):
    rng = np.random.default_rng(3)
    p = M.init_nonlocal(rng, 6)
    p.wg.data[...] = 0.0
    p.ln_bias.data[...] = 0.0
    x = rng.normal(size=(20, 6))
    gcn_ok = np.array_equal(M.gcn_layer(Tensor(x), p).data, x)

    occ = M.init_branch(rng, 4, M.GCN, with_fuse=True)
    ee = M.init_branch(rng, 4, M.GCN)
    occ.fuse_w.data[...] = 0.0
    xr = Tensor(rng.normal(size=(2, 4, 5, 5)))
    out = M.forward_bilayer(xr, occ, ee)
    _, ob, om = M.branch(xr, occ)
    _, eb, em = M.branch(xr, ee)
    head_ok = all(
        np.array_equal(a.data, b.data)
        for a, b in ((out.occluder_boundary_logits, ob), (out.occluder_mask_logits, om), (out.occludee_boundary_logits, eb), (out.occludee_mask_logits, em))
    )

    model = TR.build_query_model("transformer-bilayer", dim=8, queries=4, layers=2, seed=3)
    px = model.pixel_features(rng.normal(size=(5, 6, 6)))
    qs = model.queries()
    docc, dee = TR.bilayer_decode(qs, px, model.occluder_decoder, model.occludee_decoder, guidance=False)
    alone_ee = TR.decode(qs.occludee_q, px, model.occludee_decoder)
    alone_occ = TR.decode(qs.occluder_q, px, model.occluder_decoder)
    dec_ok = all(
        np.array_equal(a.data, b.data)
        for a, b in ((dee.mask_logits, alone_ee.mask_logits), (dee.class_logits, alone_ee.class_logits), (docc.mask_logits, alone_occ.mask_logits))
    )
    ok = gcn_ok and head_ok and dec_ok
    criterion(3, ok, f"gcn identity {gcn_ok}, head guidance-off {head_ok}, decoder guidance-off {dec_ok}")
    assert ok


def test_c04_matching_oracle(criterion):
    rng = np.random.default_rng(4)
    checked, bad = 0, 0
    for q in range(1, 7):
        for g in range(1, q + 1):
            for _ in range(100):
                cost = rng.normal(size=(q, g))
                m = TR.hungarian_match(cost)
                total = sum(cost[a, b] for a, b in m.pairs())
                best, _ = O.brute_assignment(cost)
                copy = TR.copy_assignment(m)
                if abs(total - best) > 1e-9 or not np.array_equal(copy.assignment, m.assignment):
                    bad += 1
                checked += 1
    ok = bad == 0
    criterion(4, ok, f"{checked - bad}/{checked} cost matrices match brute force, assignment copied exactly")
    assert ok


def test_c05_loss_calibration(criterion):
    model = M.build_head("bilayer-gcn", channels=4)
    for p in model.parameters():
        p.data[...] = 0.0
    rng = np.random.default_rng(5)
    out = model(rng.normal(size=(3, 3, 7, 7)))
    masks = [rng.random((3, 1, 14, 14)) < 0.5 for _ in range(4)]
    total = float(M.head_losses(out, A.OcclusionPair(-1, masks[1], masks[0], masks[3], masks[2])).total.data)
    want = (0.5 + 0.25 + 0.5 + 1.0) * math.log(2)
    ok = abs(total - want) <= 1e-9
    criterion(5, ok, f"zero-logit loss {total:.12f} vs {want:.12f}")
    assert ok


def test_c06_sod_guarantees(criterion):
    cob = S.build_cob(gen_isolated(np.random.default_rng(6), 40))
    samples = S.synthesize(cob, 10_000, seed=6)
    rates = np.array([s.overlap_rate for s in samples])
    in_range = bool(np.all((rates >= 0.2) & (rates <= 0.5)))
    modal_ok = all(np.array_equal(s.occludee.modal_mask, s.occludee.amodal_mask & ~s.occluder.amodal_mask) for s in samples)
    data = crafted_cob_dataset()
    cob_ok = [(c.image_id, c.instance_id) for c in S.build_cob(data)] == cob_oracle(data)
    ok = len(samples) == 10_000 and in_range and modal_ok and cob_ok
    criterion(6, ok, f"{len(samples)} samples, rate in [{rates.min():.3f}, {rates.max():.3f}], modal rule {modal_ok}, bank filter {cob_ok}")
    assert ok


def test_c07_split_and_balance(criterion):
    scenes = crafted_split_dataset()
    split_ok = A.extract_occ_split(scenes, 0.2) == split_oracle(scenes, 0.2)
    thresholds = np.linspace(0.0, 1.0, 41)
    splits = [set(A.extract_occ_split(scenes, t)) for t in thresholds]
    monotone = all(b <= a for a, b in zip(splits, splits[1:]))
    rng = np.random.default_rng(7)
    balance_ok = True
    for _ in range(500):
        n = int(rng.integers(1, 80))
        flags = rng.random(n) < rng.uniform(0.0, 1.0)
        out = A.balance_sample([fake_pair(i, bool(f)) for i, f in enumerate(flags)], rng)
        if flags.any():
            balance_ok &= sum(p.occluded for p in out) / len(out) >= 0.5
    ok = split_ok and monotone and balance_ok
    criterion(7, ok, f"split oracle {split_ok}, threshold-monotone {monotone}, occluded fraction >= 0.5 {balance_ok}")
    assert ok


@pytest.mark.slow
def test_c08_directional_ablation(criterion):
    train_scenes = gen_shapes_seeded(0, 500)
    test_scenes = gen_shapes_seeded(0, 100, first_id=500)
    start = time.perf_counter()
    # K=16 keeps nine runs on one core inside the 40-minute budget
    result = compare_variants(ABLATION_VARIANTS, [0, 1, 2], train_scenes, test_scenes, TrainConfig(channels=16))
    minutes = (time.perf_counter() - start) / 60
    iou = {r.variant: float(np.mean(r.mean_iou)) for r in result.rows}
    per_seed = {r.variant: [round(v, 4) for v in r.mean_iou] for r in result.rows}
    ordered = iou["bilayer-gcn"] > iou["bilayer-fcn"] > iou["single-fcn"]
    margin = iou["bilayer-gcn"] - iou["single-fcn"]
    ok = ordered and margin >= 0.02 and minutes <= 40.0
    detail = ", ".join(f"{v} {100 * iou[v]:.2f}" for v in ABLATION_VARIANTS)
    criterion(8, ok, f"mean occludee IoU {detail}; gcn - single {100 * margin:+.2f} pts; {minutes:.1f} min; per seed {per_seed}")
    assert ok, result.table()


def test_c09_overfit_single_scene(criterion):
    scene = gen_shapes_seeded(0, 1)
    result = train(scene, TrainConfig(variant="bilayer-gcn", iterations=500))
    best = min(row[1] for row in result.curve)
    ok = best < 0.05
    criterion(9, ok, f"lowest total loss {best:.4f} within 500 iterations (final {result.curve[-1][1]:.4f})")
    assert ok


def _cli(args, cwd):
    proc = subprocess.run([sys.executable, "-m", "bilayerseg.cli", *args], cwd=cwd, capture_output=True, timeout=600)
    return proc.returncode, proc.stdout


def _tree(root: Path) -> dict:
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_c10_cli_determinism(criterion, tmp_path):
    small = ["--iterations", "4", "--warmup-iters", "1", "--channels", "4", "--batch-size", "4"]
    plans = {
        "gradcheck": ["gradcheck", "--trials", "2", "--out", "gc.json"],
        "sod-synth": ["sod-synth", "--source-scenes", "6", "--count", "4", "--seed", "1", "--out", "sod"],
        "gen-shapes": ["gen-shapes", "--count", "6", "--seed", "1", "--out", "shapes"],
        "derive-occ": ["derive-occ", "--annotations", "shapes", "--out", "pairs.json"],
        "split-occ": ["split-occ", "--annotations", "shapes", "--out", "split.json"],
        "train": ["train", "--data", "shapes", "--seed", "1", *small, "--out", "run"],
        "eval": ["eval", "--checkpoint", "run/checkpoint.bin", "--data", "shapes", "--out", "eval.json"],
        "dump-heatmaps": ["dump-heatmaps", "--checkpoint", "run/checkpoint.bin", "--data", "shapes", "--image-id", "2", "--out", "maps"],
        "compare": ["compare", "--variants", "single-fcn", "bilayer-gcn", "--seeds", "0", "1", *small,
                              "--train-count", "4", "--test-count", "2", "--out", "cmp"],
    }
    runs = {}
    for rep in ("a", "b"):
        d = tmp_path / rep
        d.mkdir()
        stdout = {}
        for name, plan in plans.items():
            code, out = _cli(plan, d)  # relative paths keep stdout comparable
            assert code == 0, (name, out)
            stdout[name] = out
        runs[rep] = (stdout, _tree(d))
    differing = [n for n in plans if runs["a"][0][n] != runs["b"][0][n]]
    differing += [f for f in runs["a"][1] if runs["a"][1][f] != runs["b"][1].get(f)]
    ok = not differing and set(runs["a"][1]) == set(runs["b"][1])
    criterion(10, ok, f"{len(plans)} subcommands, {len(runs['a'][1])} artifacts byte-identical across two runs" + (f"; differ: {differing}" if differing else ""))
    assert ok
