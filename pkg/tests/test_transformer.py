import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bilayerseg import tensor as T
from bilayerseg import transformer as TR
from bilayerseg.annotations import InstanceAnnotation, SceneAnnotation
from bilayerseg.errors import ContractError, DomainError
from bilayerseg.gradcheck import bilayer_decode_case
from bilayerseg.tensor import Tensor

import oracles as O


def mlp_params(w1, b1, w2, b2):
    t = lambda a: Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)
    return TR.MLPParams(TR.LinearParams(t(w1), t(b1)), TR.LinearParams(t(w2), t(b2)))


def random_px(rng, d=6, h=4, w=5):
    return TR.PixelFeatures(Tensor(rng.normal(size=(d, h, w))))


# ---------------------------------------------------------------- query derivation and masks


def test_derive_occluder_queries_examples():
    d = 4
    zero = mlp_params(np.zeros((d, d)), np.zeros(d), np.zeros((d, d)), np.zeros(d))
    q = np.random.default_rng(0).normal(size=(3, d))
    assert np.array_equal(TR.derive_occluder_queries(Tensor(q), zero).data, np.zeros((3, d)))
    ident = mlp_params(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))
    assert np.array_equal(TR.derive_occluder_queries(Tensor(np.abs(q)), ident).data, np.abs(q))


def test_derive_occluder_queries_oracle():
    rng = np.random.default_rng(1)
    p = TR.init_mlp(rng, 5, 5, 5)
    q = rng.normal(size=(7, 5))
    np.testing.assert_allclose(TR.derive_occluder_queries(Tensor(q), p).data, O.mlp_oracle(q, p), rtol=0, atol=1e-12)


def test_mask_from_query_examples():
    rng = np.random.default_rng(2)
    px = random_px(rng)
    d = 6
    p = mlp_params(rng.normal(size=(d, d)), np.zeros(d), rng.normal(size=(d, d)), np.zeros(d))
    assert np.array_equal(TR.mask_from_query(Tensor(np.zeros((1, d))), px, p).data, np.zeros((1, 4, 5)))
    # identity embedding, features orthogonal to the query at chosen pixels
    ident = mlp_params(np.eye(d), np.zeros(d), np.eye(d), np.zeros(d))
    feat = rng.normal(size=(d, 4, 5))
    feat[0, 1, 2] = feat[0, 3, 4] = 0.0
    q = np.zeros((1, d))
    q[0, 0] = 1.0
    logits = TR.mask_from_query(Tensor(q), TR.PixelFeatures(Tensor(feat)), ident).data
    assert logits[0, 1, 2] == 0.0 and logits[0, 3, 4] == 0.0


def test_mask_from_query_oracle():
    rng = np.random.default_rng(3)
    px = random_px(rng)
    p = TR.init_mlp(rng, 6, 6, 6)
    q = rng.normal(size=(3, 6))
    got = TR.mask_from_query(Tensor(q), px, p).data
    embed = O.mlp_oracle(q, p)
    want = np.zeros((3, 4, 5))
    for i in range(3):
        for y in range(4):
            for x in range(5):
                want[i, y, x] = sum(embed[i, c] * px.feat.data[c, y, x] for c in range(6))
    np.testing.assert_allclose(got, want, rtol=0, atol=1e-12)


# ---------------------------------------------------------------- attention and decoder layers


def test_all_true_mask_equals_unmasked():
    rng = np.random.default_rng(4)
    p = TR.init_decoder(rng, 6, 1, 3).layers[0].cross
    x, ctx = Tensor(rng.normal(size=(3, 6))), Tensor(rng.normal(size=(20, 6)))
    a = TR.attention(x, ctx, p, mask=np.ones((3, 20), dtype=bool)).data
    b = TR.attention(x, ctx, p).data
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


def test_single_admitted_pixel_forces_attention():
    rng = np.random.default_rng(5)
    q, k, v = (Tensor(rng.normal(size=s)) for s in ((3, 4), (10, 4), (10, 4)))
    mask = np.zeros((3, 10), dtype=bool)
    mask[0, 7] = mask[1, 2] = mask[2, 9] = True
    out = TR.attend(q, k, v, mask).data
    np.testing.assert_allclose(out, v.data[[7, 2, 9]], rtol=0, atol=1e-15)


def test_fallback_mask_fills_empty_rows():
    m = np.array([[False, False], [True, False]])
    assert np.array_equal(TR.fallback_mask(m), [[True, True], [True, False]])


def test_decoder_layer_matches_oracle():
    rng = np.random.default_rng(6)
    for _ in range(5):
        p = TR.init_decoder(rng, 6, 1, 3).layers[0]
        px = random_px(rng)
        q = rng.normal(size=(4, 6))
        mask = rng.random((4, 20)) < 0.3
        mask[0] = False  # exercises the fallback
        got = TR.decoder_layer(Tensor(q), px, mask, p).data
        want = O.decoder_layer_oracle(q, px.feat.data.reshape(6, 20).T, mask, p)
        np.testing.assert_allclose(got, want, rtol=0, atol=1e-10)


def test_decoder_heads_must_divide_dim():
    rng = np.random.default_rng(7)
    p = TR.init_decoder(rng, 6, 1, 3).layers[0].cross
    with pytest.raises(Exception):
        TR.attention(Tensor(rng.normal(size=(2, 6))), Tensor(rng.normal(size=(3, 6))), p, heads=4)


# ---------------------------------------------------------------- bilayer decoding


def test_decode_matches_oracle():
    rng = np.random.default_rng(8)
    p = TR.init_decoder(rng, 6, 3, 4)
    px = random_px(rng)
    q = rng.normal(size=(5, 6))
    out = TR.decode(Tensor(q), px, p)
    eq, em, ec = O.decode_oracle(q, px.feat.data, p)
    np.testing.assert_allclose(out.embeddings.data, eq, rtol=0, atol=1e-10)
    np.testing.assert_allclose(out.mask_logits.data, em, rtol=0, atol=1e-10)
    np.testing.assert_allclose(out.class_logits.data, ec, rtol=0, atol=1e-10)


def test_zero_layers_predict_from_initial_embeddings():
    rng = np.random.default_rng(9)
    p = TR.init_decoder(rng, 6, 0, 3)
    px = random_px(rng)
    q = Tensor(rng.normal(size=(2, 6)))
    out = TR.decode(q, px, p)
    assert np.array_equal(out.mask_logits.data, TR.mask_from_query(q, px, p.mask_mlp).data)
    assert np.array_equal(out.embeddings.data, q.data)


def test_bilayer_decode_matches_oracle():
    model = TR.build_query_model("transformer-bilayer", dim=6, queries=3, layers=2, seed=10)
    grid = np.random.default_rng(10).normal(size=(5, 4, 4))
    occ, ee = model(grid)
    feat = model.pixel_features(grid).feat.data
    q = model.occludee_queries.data
    oq, om, oc = O.decode_oracle(O.mlp_oracle(q, model.query_mlp), feat, model.occluder_decoder)
    eq, em, ec = O.decode_oracle(q + oq, feat, model.occludee_decoder)
    for got, want in ((occ.mask_logits, om), (occ.class_logits, oc), (ee.mask_logits, em), (ee.class_logits, ec)):
        np.testing.assert_allclose(got.data, want, rtol=0, atol=1e-10)


def test_guidance_off_equals_independent_decoders():
    model = TR.build_query_model("transformer-bilayer", dim=6, queries=3, layers=2, seed=11)
    px = model.pixel_features(np.random.default_rng(11).normal(size=(5, 4, 4)))
    qs = model.queries()
    occ, ee = TR.bilayer_decode(qs, px, model.occluder_decoder, model.occludee_decoder, guidance=False)
    alone = TR.decode(qs.occludee_q, px, model.occludee_decoder)
    assert np.array_equal(ee.mask_logits.data, alone.mask_logits.data)
    assert np.array_equal(ee.class_logits.data, alone.class_logits.data)
    assert np.array_equal(occ.mask_logits.data, TR.decode(qs.occluder_q, px, model.occluder_decoder).mask_logits.data)


def test_decoders_do_not_share_parameters():
    model = TR.build_query_model("transformer-bilayer", dim=6, queries=2, layers=1, seed=12)
    ids = [id(t) for t in model.parameters()]
    assert len(ids) == len(set(ids))


# ---------------------------------------------------------------- matching


def test_hungarian_examples():
    m = TR.hungarian_match(np.ones((3, 3)) - np.eye(3))
    assert list(m.assignment) == [0, 1, 2]
    assert list(TR.hungarian_match(np.array([[4.2]])).assignment) == [0]
    assert list(TR.hungarian_match(np.zeros((3, 2))).assignment) == [0, 1, -1]
    with pytest.raises(DomainError):
        TR.hungarian_match(np.array([[0.0, np.nan]]))
    with pytest.raises(ContractError):
        TR.hungarian_match(np.zeros((1, 2)))


def test_hungarian_matches_brute_force():
    rng = np.random.default_rng(13)
    for _ in range(100):
        q = int(rng.integers(1, 7))
        g = int(rng.integers(1, q + 1))
        cost = rng.normal(size=(q, g))
        m = TR.hungarian_match(cost)
        total = sum(cost[qi, gi] for qi, gi in m.pairs())
        best, _ = O.brute_assignment(cost)
        assert total == pytest.approx(best, abs=1e-9)
        assert sorted(gi for _, gi in m.pairs()) == list(range(g))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(-1, 5), min_size=1, max_size=8))
def test_copy_assignment_preserves_map(a):
    m = TR.MatchResult(np.array(a, dtype=np.int64))
    c = TR.copy_assignment(m)
    assert np.array_equal(c.assignment, m.assignment) and c.assignment is not m.assignment
    assert c.pairs() == m.pairs()


def three_object_scene():
    s = (12, 12)
    masks = []
    for y, x, h, w in ((0, 0, 6, 6), (3, 3, 6, 6), (9, 9, 3, 3)):
        m = np.zeros(s, dtype=bool)
        m[y : y + h, x : x + w] = True
        masks.append(m)
    return SceneAnnotation(0, 12, 12, [InstanceAnnotation(i, 0, m) for i, m in enumerate(masks)])


def modal_occluder_oracle(scene, idx):
    target = scene.instances[idx]
    x, y, w, h = target.bbox
    out = np.zeros((scene.height, scene.width), dtype=bool)
    for j, other in enumerate(scene.instances):
        if j == idx or not other.modal_mask[y : y + h, x : x + w].any():
            continue
        for i in range(y, y + h):
            for k in range(x, x + w):
                out[i, k] |= bool(other.modal_mask[i, k])
    return out


def test_copied_occluder_targets_match_annotation_oracle():
    scene = three_object_scene()
    targets = TR.occluder_targets(scene, "modal")
    for idx in range(3):
        assert np.array_equal(targets[idx], modal_occluder_oracle(scene, idx))
    gts = TR.scene_targets(scene, (12, 12), "modal")
    assert not gts.occluder_masks[2].any()  # the far corner square is not occluded
    assert np.array_equal(gts.occluder_masks.astype(bool), np.stack(targets))


# ---------------------------------------------------------------- set loss


def make_output(class_logits, mask_logits):
    return TR.DecodeOutput(Tensor(np.zeros((len(class_logits), 2))), Tensor(mask_logits), Tensor(class_logits))


def small_targets(rng, g=2, n=4):
    masks = (rng.random((g, n, n)) < 0.5).astype(np.float64)
    occ = (rng.random((g, n, n)) < 0.3).astype(np.float64)
    occ[-1] = 0.0
    return TR.SetTargets(np.arange(g) % 3, masks, occ)


def test_set_loss_saturated_is_zero():
    rng = np.random.default_rng(14)
    gts = small_targets(rng)
    m = TR.MatchResult(np.array([1, -1, 0]))
    cl = np.full((3, 4), -60.0)
    ml = np.zeros((3, 4, 4))
    occ_cl = np.full((3, 2), -60.0)
    occ_ml = np.zeros((3, 4, 4))
    for q, g in m.pairs():
        cl[q, gts.classes[g]] = 60.0
        ml[q] = np.where(gts.occludee_masks[g] > 0, 60.0, -60.0)
        occ_cl[q, 0 if gts.occluder_masks[g].any() else 1] = 60.0
        occ_ml[q] = np.where(gts.occluder_masks[g] > 0, 60.0, -60.0)
    cl[1, 3] = 60.0
    occ_cl[1, 1] = 60.0
    loss = TR.set_loss(make_output(cl, ml), gts, m, make_output(occ_cl, occ_ml))
    assert float(loss.total.data) < 1e-6


def test_set_loss_zero_mask_logits_give_ln2():
    rng = np.random.default_rng(15)
    gts = small_targets(rng)
    m = TR.MatchResult(np.array([0, 1, -1]))
    out = make_output(rng.normal(size=(3, 4)), np.zeros((3, 4, 4)))
    terms = TR.set_loss(out, gts, m)
    assert float(terms.occludee_mask_bce.data) == pytest.approx(2 * math.log(2), abs=1e-12)


def test_set_loss_componentwise_oracle():
    rng = np.random.default_rng(16)
    gts = small_targets(rng)
    m = TR.MatchResult(np.array([-1, 1, 0]))
    cl, ml = rng.normal(size=(3, 4)), rng.normal(size=(3, 4, 4))
    ocl, oml = rng.normal(size=(3, 2)), rng.normal(size=(3, 4, 4))
    terms = TR.set_loss(make_output(cl, ml), gts, m, make_output(ocl, oml))

    def nll(z, y):
        return -sum(z[i, y[i]] - math.log(np.exp(z[i]).sum()) for i in range(len(y)))

    def dice(z, t):
        p = O.sigmoid(z)
        return sum(1 - (2 * (p[i] * t[i]).sum() + 1) / (p[i].sum() + t[i].sum() + 1) for i in range(len(z)))

    q_idx, g_idx = [1, 2], [1, 0]
    want = nll(cl, [3, 1, 0]) + O.bce(ml[q_idx], gts.occludee_masks[g_idx]) * 2 + dice(ml[q_idx], gts.occludee_masks[g_idx])
    occ_cls = [1, 1, 0 if gts.occluder_masks[0].any() else 1]
    want_occ = nll(ocl, occ_cls) + O.bce(oml[q_idx], gts.occluder_masks[g_idx]) * 2 + dice(oml[q_idx], gts.occluder_masks[g_idx])
    assert float(terms.total.data) == pytest.approx(want + want_occ, abs=1e-10)


def test_set_loss_box_term():
    rng = np.random.default_rng(17)
    gts = small_targets(rng, g=1)
    gts.boxes = np.array([[0.1, 0.2, 0.6, 0.7]])
    m = TR.MatchResult(np.array([0, -1]))
    boxes = rng.normal(size=(2, 4))
    out = TR.DecodeOutput(Tensor(np.zeros((2, 2))), Tensor(rng.normal(size=(2, 4, 4))), Tensor(rng.normal(size=(2, 4))), Tensor(boxes))
    b = O.sigmoid(boxes[0])
    t = gts.boxes[0]
    iw = max(0.0, min(b[2], t[2]) - max(b[0], t[0]))
    ih = max(0.0, min(b[3], t[3]) - max(b[1], t[1]))
    inter = iw * ih
    union = abs((b[2] - b[0]) * (b[3] - b[1])) + (t[2] - t[0]) * (t[3] - t[1]) - inter
    want = np.abs(b - t).sum() + 1 - inter / (union + 1e-9)
    assert float(TR.set_loss(out, gts, m).box.data) == pytest.approx(want, abs=1e-12)


def test_decode_and_set_loss_gradcheck():
    rng = np.random.default_rng([4, 4])
    f, params, coords = bilayer_decode_case(rng)
    assert T.grad_check(f, params, max_coords=coords, rng=rng) <= 1e-4
