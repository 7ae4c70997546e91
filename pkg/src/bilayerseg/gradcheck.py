"""Finite-difference checks of every differentiable operator and of the two
composite losses (bilayer GCN head, two-query bilayer decoder)."""

from __future__ import annotations

from typing import Callable, Iterable, Optional

import numpy as np

from . import tensor as T
from .annotations import OcclusionPair
from .errors import FeasibilityError
from .mask_head import boundary_gt, build_head, head_losses
from .tensor import Tensor
from .transformer import (
    SetTargets,
    build_query_model,
    copy_assignment,
    hungarian_match,
    matching_cost,
    set_loss,
)

TOLERANCE = 1e-4


def _leaf(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64), requires_grad=True)


def _away_from_zero(rng, shape, lo=0.1, hi=1.0):
    """Values with magnitude in ``[lo, hi]``, so kinks at zero are never probed."""
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def _unary(op, sampler):
    # outputs are reduced with random weights so every coordinate matters
    def build(rng):
        x = _leaf(sampler(rng))
        with T.no_grad():
            w = rng.normal(size=op(x).shape)
        return (lambda x: T.tsum(op(x) * w)), [x]

    return build


def _binary(op, sa, sb):
    def build(rng):
        a, b = _leaf(sa(rng)), _leaf(sb(rng))
        w = rng.normal(size=np.broadcast_shapes(a.shape, b.shape))
        return (lambda a, b: T.tsum(op(a, b) * w)), [a, b]

    return build


def _pair_no_ties(rng):
    a = rng.normal(size=(3, 4))
    gap = _away_from_zero(rng, (3, 4))
    return a, a + gap


def _case_maximum(op):
    def build(rng):
        a0, b0 = _pair_no_ties(rng)
        a, b = _leaf(a0), _leaf(b0)
        w = rng.normal(size=a.shape)
        return (lambda a, b: T.tsum(op(a, b) * w)), [a, b]

    return build


def _case_softmax(rng):
    x = _leaf(rng.normal(size=(3, 5)))
    mask = rng.random((3, 5)) < 0.7
    mask[:, 0] = True
    w = rng.normal(size=x.shape)
    return (lambda x: T.tsum(T.softmax(x, -1, mask) * w)), [x]


def _case_layer_norm(rng):
    x, g, b = _leaf(rng.normal(size=(3, 6))), _leaf(rng.normal(size=6)), _leaf(rng.normal(size=6))
    w = rng.normal(size=(3, 6))
    return (lambda x, g, b: T.tsum(T.layer_norm(x, g, b) * w)), [x, g, b]


def _case_conv(k):
    def build(rng):
        x = _leaf(rng.normal(size=(2, 3, 5, 4)))
        wt = _leaf(rng.normal(size=(2, 3, k, k)))
        b = _leaf(rng.normal(size=2))
        w = rng.normal(size=(2, 2, 5, 4))
        return (lambda x, wt, b: T.tsum(T.conv2d(x, wt, b) * w)), [x, wt, b]

    return build


def _case_matmul(rng):
    a, b = _leaf(rng.normal(size=(2, 3, 4))), _leaf(rng.normal(size=(4, 2)))
    w = rng.normal(size=(2, 3, 2))
    return (lambda a, b: T.tsum(T.matmul(a, b) * w)), [a, b]


def _case_bce(rng):
    z = _leaf(rng.normal(size=(2, 6)))
    t = rng.random((2, 6))
    return (lambda z: T.bce_with_logits(z, t)), [z]


def _case_cross_entropy(rng):
    z = _leaf(rng.normal(size=(4, 3)))
    target = rng.integers(0, 3, size=4)
    wt = rng.uniform(0.5, 2.0, size=4)
    return (lambda z: T.cross_entropy(z, target, wt)), [z]


def _case_structural(rng):
    a, b = _leaf(rng.normal(size=(2, 3))), _leaf(rng.normal(size=(2, 3)))
    w1, w2 = rng.normal(size=(3, 3)), rng.normal(size=(3, 2))

    def f(a, b):
        s = T.stack([a, b], axis=0)  # 2 x 2 x 3
        c = T.concat([T.reshape(s, (4, 3)), a], axis=0)  # 6 x 3
        picked = T.getitem(c, (slice(1, 4),))
        return T.tsum(T.swap_last(picked) * w1) + T.tsum(T.mean(c, axis=1)) + T.tsum(T.transpose(b) * w2)

    return f, [a, b]


OP_CASES: dict[str, Callable] = {
    "add": _binary(T.add, lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(4,))),
    "sub": _binary(T.sub, lambda r: r.normal(size=(3, 1)), lambda r: r.normal(size=(3, 4))),
    "mul": _binary(T.mul, lambda r: r.normal(size=(3, 4)), lambda r: r.normal(size=(3, 4))),
    "div": _binary(T.div, lambda r: r.normal(size=(3, 4)), lambda r: _away_from_zero(r, (3, 4), 0.5, 2.0)),
    "neg": _unary(T.neg, lambda r: r.normal(size=(3, 4))),
    "maximum": _case_maximum(T.maximum),
    "minimum": _case_maximum(T.minimum),
    "abs": _unary(T.tabs, lambda r: _away_from_zero(r, (3, 4))),
    "relu": _unary(T.relu, lambda r: _away_from_zero(r, (3, 4))),
    "sigmoid": _unary(T.sigmoid, lambda r: r.normal(scale=2.0, size=(3, 4))),
    "exp": _unary(T.exp, lambda r: r.normal(size=(3, 4))),
    "log": _unary(T.log, lambda r: r.uniform(0.2, 3.0, size=(3, 4))),
    "sum/mean/reshape/transpose/index/concat/stack": _case_structural,
    "matmul": _case_matmul,
    "softmax": _case_softmax,
    "layer_norm": _case_layer_norm,
    "conv2d_1x1": _case_conv(1),
    "conv2d_3x3": _case_conv(3),
    "upsample_bilinear_x2": _unary(T.upsample_bilinear_x2, lambda r: r.normal(size=(2, 3, 4))),
    "bce_with_logits": _case_bce,
    "cross_entropy": _case_cross_entropy,
}


def _perturb(params, rng, scale):
    for p in params:
        p.data[...] = p.data + rng.normal(0.0, scale, size=p.shape)


# Composite draws are rejected unless they are well posed for central
# differences: no piecewise op input within KINK_MARGIN of its switching
# point, and no gradient coordinate too small to resolve.
KINK_MARGIN = 1e-3

# Central differences at eps=1e-5 carry roughly |L| * 1e-11 of rounding noise
# (a few ulps of the loss over 2 * eps).  Non-zero gradients below
# RESOLVABLE_GRAD * max(|L|, 1) cannot be resolved to 1e-4 relative accuracy
# by any implementation.
RESOLVABLE_GRAD = 2e-7


def _well_posed(f, params, check_small: bool = True) -> bool:
    for p in params:
        p.zero_grad()
    with T.kink_watch() as kinks:
        loss = f()
    if kinks and min(kinks) < KINK_MARGIN:
        return False
    if not check_small:
        return True
    floor = RESOLVABLE_GRAD * max(abs(float(loss.data)), 1.0)
    T.backward(loss)
    g = np.concatenate([p.grad.ravel() for p in params])
    for p in params:
        p.zero_grad()
    return not np.any((g != 0) & (np.abs(g) < floor))


def bilayer_head_case(rng, channels: int = 4, roi: int = 4, max_draws: int = 50):
    """Full bilayer-GCN head loss on ``roi x roi`` inputs, checked over all parameters.

    Draws that sit near a ReLU kink or have a gradient coordinate in
    ``(0, RESOLVABLE_GRAD * |loss|)`` are redrawn, the composite analogue of keeping
    scalar op inputs away from kinks.
    """
    for _ in range(max_draws):
        model = build_head("bilayer-gcn", channels=channels, in_channels=3, seed=int(rng.integers(2**31)))
        _perturb(model.parameters(), rng, 0.1)
        x = rng.normal(size=(2, 3, roi, roi))
        em = rng.random((2, 2 * roi, 2 * roi)) < 0.5
        om = rng.random((2, 2 * roi, 2 * roi)) < 0.4
        gt = OcclusionPair(-1, em[:, None], boundary_gt(em)[:, None], om[:, None], boundary_gt(om)[:, None])

        def f(*_, model=model, x=x, gt=gt):
            return head_losses(model(x), gt).total

        if _well_posed(f, model.parameters()):
            return f, model.parameters(), None
    raise FeasibilityError(f"no well-posed gradient-check draw in {max_draws} tries")


def bilayer_decode_case(rng, dim: int = 8, queries: int = 2, pixels: int = 8, layers: int = 1, max_draws: int = 50):
    """Two-query bilayer decoder + set loss, probed at 300 random coordinates."""
    for _ in range(max_draws):
        model = build_query_model("transformer-bilayer", dim=dim, queries=queries, layers=layers, seed=int(rng.integers(2**31)))
        _perturb(model.parameters(), rng, 0.1)
        grid = rng.normal(size=(5, pixels, pixels))
        gts = SetTargets(
            classes=rng.integers(0, 3, size=1),
            occludee_masks=(rng.random((1, pixels, pixels)) < 0.5).astype(np.float64),
            occluder_masks=(rng.random((1, pixels, pixels)) < 0.5).astype(np.float64),
            boxes=np.array([[0.1, 0.2, 0.6, 0.7]]),
        )
        with T.no_grad():
            _, ee = model(grid)
        match = hungarian_match(matching_cost(ee.class_logits, ee.mask_logits, gts))

        def f(*_, model=model, grid=grid, gts=gts, match=match):
            occ, ee = model(grid)
            return set_loss(ee, gts, copy_assignment(match), occ).total

        if _well_posed(f, model.parameters()):
            return f, model.parameters(), 300
    raise FeasibilityError(f"no well-posed gradient-check draw in {max_draws} tries")


COMPOSITE_CASES = {
    "bilayer_gcn_head_loss": bilayer_head_case,
    "bilayer_decode_set_loss": bilayer_decode_case,
}


def run_gradchecks(trials: int = 20, seed: int = 0, eps: float = 1e-5, names: Optional[Iterable[str]] = None) -> dict:
    """Max relative error per case over ``trials`` random instances."""
    cases = {**OP_CASES, **COMPOSITE_CASES}
    order = list(cases)
    selected = order if names is None else list(names)
    out = {}
    for name in selected:
        k = order.index(name)
        worst = 0.0
        for t in range(trials):
            rng = np.random.default_rng([seed, k, t])
            if name in COMPOSITE_CASES:
                f, inputs, coords = cases[name](rng)
            else:
                (f, inputs), coords = cases[name](rng), None
            worst = max(worst, T.grad_check(f, inputs, eps=eps, max_coords=coords, rng=rng))
        out[name] = worst
    return out
