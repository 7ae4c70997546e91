import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilayerseg import bench as B
from bilayerseg.annotations import InstanceAnnotation, SceneAnnotation, derive_pair_amodal
from bilayerseg.errors import ConfigurationError, ContractError, GenerationError, TrainingError
from bilayerseg.mask_head import build_head, count_params
from bilayerseg.shapes import ShapeConfig, gen_shapes, gen_shapes_seeded


@pytest.fixture(scope="module")
def scenes():
    return gen_shapes_seeded(0, 30)


# ---------------------------------------------------------------- scene generator


def test_gen_shapes_examples():
    assert gen_shapes(np.random.default_rng(0), 0) == []
    a = gen_shapes(np.random.default_rng(1), 3)
    b = gen_shapes(np.random.default_rng(1), 3)
    for sa, sb in zip(a, b):
        assert sa.image.tobytes() == sb.image.tobytes()
        for ia, ib in zip(sa.instances, sb.instances):
            assert ia.modal_mask.tobytes() == ib.modal_mask.tobytes() and ia.class_id == ib.class_id


def test_gen_shapes_infeasible_raises():
    cfg = ShapeConfig(overlap_range=(0.99, 1.0), max_retries=3)
    with pytest.raises(GenerationError):
        gen_shapes(np.random.default_rng(0), 1, cfg)


def test_scene_invariants(scenes):
    for s in scenes:
        assert 2 <= len(s.instances) <= 4
        modal = np.stack([i.modal_mask for i in s.instances])
        amodal = np.stack([i.amodal_mask for i in s.instances])
        assert modal.sum(axis=0).max() <= 1  # visible pixels belong to one instance
        assert np.array_equal(modal.any(axis=0), amodal.any(axis=0))
        assert np.all(amodal >= modal)
        back = max(s.instances, key=lambda i: i.occlusion_rank)
        assert derive_pair_amodal(s, back.id).occluder_mask.any()
        rates = [
            (back.amodal_mask & o.amodal_mask).sum() / back.amodal_mask.sum()
            for o in s.instances
            if o.id != back.id
        ]
        assert any(0.2 <= r <= 0.5 for r in rates)


# ---------------------------------------------------------------- evaluation


def rect(shape, y, x, h, w):
    m = np.zeros(shape, dtype=bool)
    m[y : y + h, x : x + w] = True
    return m


def test_perfect_and_empty_predictions(scenes):
    perfect = [B.Prediction(s.image_id, i.modal_mask, 1.0, gt_index=k) for s in scenes for k, i in enumerate(s.instances)]
    rep = B.evaluate_predictions(perfect, scenes)
    assert rep.ap == 1.0 and rep.mean_iou == 1.0
    empty = B.evaluate_predictions([], scenes)
    assert empty.ap == 0.0 and empty.mean_iou == 0.0


def test_hand_ranked_ap():
    shape = (10, 10)
    a, b = rect(shape, 0, 0, 2, 5), rect(shape, 5, 0, 4, 5)  # 10 and 20 pixels
    scene = SceneAnnotation(0, 10, 10, [InstanceAnnotation(1, 0, a), InstanceAnnotation(2, 0, b)])
    preds = [
        B.Prediction(0, a.copy(), 0.9),  # exact hit on a
        B.Prediction(0, rect(shape, 2, 6, 2, 2), 0.8),  # touches nothing
        B.Prediction(0, rect(shape, 5, 0, 3, 5), 0.7),  # 15 of b's 20 pixels: IoU 0.75
    ]
    rep = B.evaluate_predictions(preds, [scene])
    # thresholds up to 0.75: ranks TP, FP, TP -> recall 1/2 at precision 1, then 1 at 2/3
    # thresholds above 0.75: only the first is a hit -> recall 1/2 at precision 1
    low = 0.5 * 1.0 + 0.5 * (2 / 3)
    high = 0.5 * 1.0
    assert rep.ap_per_threshold["0.75"] == pytest.approx(low, abs=1e-12)
    assert rep.ap_per_threshold["0.80"] == pytest.approx(high, abs=1e-12)
    assert rep.ap == pytest.approx((6 * low + 4 * high) / 10, abs=1e-12)
    assert rep.mean_iou == pytest.approx((1.0 + 0.75) / 2, abs=1e-12)


def test_average_precision_edge_cases():
    assert np.isnan(B.average_precision([], [], 0))
    assert B.average_precision([], [], 3) == 0.0
    assert B.average_precision([0.5, 0.4], [True, True], 2) == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000))
def test_ap_non_increasing_in_threshold(seed):
    rng = np.random.default_rng(seed)
    scene = gen_shapes_seeded(0, 1)[0]
    preds = []
    for k, inst in enumerate(scene.instances):
        noisy = inst.modal_mask ^ (rng.random(inst.modal_mask.shape) < rng.uniform(0, 0.05))
        preds.append(B.Prediction(scene.image_id, noisy, float(rng.random())))
    ap = [B.evaluate_predictions(preds, [scene]).ap_per_threshold[f"{t:.2f}"] for t in B.IOU_THRESHOLDS]
    assert all(0.0 <= v <= 1.0 for v in ap)
    assert all(x >= y for x, y in zip(ap, ap[1:]))


# ---------------------------------------------------------------- training


def test_train_config_validation():
    with pytest.raises(ConfigurationError):
        B.TrainConfig(variant="double-fcn")
    with pytest.raises(ConfigurationError):
        B.TrainConfig(iterations=50, warmup_iters=100)
    cfg = B.TrainConfig()
    assert (cfg.iterations, cfg.batch_size, cfg.lr, cfg.momentum, cfg.warmup_iters) == (2000, 16, 0.01, 0.9, 100)
    assert B.TrainConfig.from_dict(cfg.to_dict()) == cfg


def test_zero_learning_rate_is_no_op(scenes):
    cfg = B.TrainConfig(variant="bilayer-gcn", iterations=5, warmup_iters=2, lr=0.0, channels=4)
    result = B.train(scenes[:3], cfg)
    fresh = B.build_model(cfg)
    for (_, a), (_, b) in zip(result.model.named_parameters(), fresh.named_parameters()):
        assert np.array_equal(a.data, b.data)


@pytest.mark.parametrize("variant", ["single-fcn", "bilayer-gcn", "transformer-bilayer"])
def test_training_is_deterministic(scenes, variant):
    cfg = B.TrainConfig(variant=variant, iterations=6, warmup_iters=2, channels=4, queries=4, decoder_layers=1, batch_size=4)
    a, b = B.train(scenes[:4], cfg), B.train(scenes[:4], cfg)
    assert a.curve == b.curve
    assert a.curve_csv() == b.curve_csv()
    assert a.curve_csv().splitlines()[0] == "iteration," + ",".join(B.LOSS_COLUMNS)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")  # overflow is the point of this test
def test_training_aborts_on_non_finite_loss(scenes):
    cfg = B.TrainConfig(variant="single-fcn", iterations=20, warmup_iters=0, lr=1e200, channels=4)
    with pytest.raises(TrainingError) as exc:
        B.train(scenes[:3], cfg)
    assert exc.value.iteration > 0
    with pytest.raises(ContractError):
        B.train([], cfg)


# ---------------------------------------------------------------- comparison


def test_bilayer_has_more_parameters():
    for mixer in ("fcn", "gcn"):
        single = count_params(build_head(f"single-{mixer}", channels=8, in_channels=3))
        bilayer = count_params(build_head(f"bilayer-{mixer}", channels=8, in_channels=3))
        assert bilayer > single


def test_single_unit_comparison(scenes):
    base = B.TrainConfig(iterations=3, warmup_iters=1, channels=4, batch_size=4)
    c = B.compare_variants(["bilayer-fcn"], [0], scenes[:3], scenes[3:5], base)
    assert len(c.rows) == 1
    lines = c.table().splitlines()
    assert len(lines) == 3 and lines[2].startswith("bilayer-fcn")
    summary = c.to_dict()["variants"][0]
    assert summary["mean_iou"]["per_seed"] == c.rows[0].mean_iou
    assert 0.0 <= summary["ap"]["mean"] <= 1.0
