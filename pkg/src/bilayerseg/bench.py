"""Training, evaluation and variant comparison on the shapes benchmark.

Mask heads are trained on ROIs cut at ground-truth boxes (no detector), with
SGD + momentum, a constant warm-up learning rate, then the constant base
rate.  Evaluation pastes each ROI prediction back to the image, thresholds at
0.5 and scores the result against the visible (modal) mask.
"""

from __future__ import annotations

import csv
import io
import json
import time
from dataclasses import asdict, dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .annotations import (
    OcclusionPair,
    SceneAnnotation,
    balance_sample,
    derive_pair_modal,
    paste_mask,
    roi_crop,
    stack_pairs,
)
from .errors import ConfigurationError, ContractError, TrainingError
from .mask_head import (
    HEAD_VARIANTS,
    LossWeights,
    MaskHead,
    build_head,
    count_params,
    head_losses,
)
from .transformer import (
    TRANSFORMER_VARIANTS,
    QueryModel,
    build_query_model,
    copy_assignment,
    hungarian_match,
    image_grid,
    matching_cost,
    scene_targets,
    set_loss,
)

ALL_VARIANTS = HEAD_VARIANTS + TRANSFORMER_VARIANTS
IOU_THRESHOLDS = np.round(np.arange(0.5, 0.951, 0.05), 2)
LOSS_COLUMNS = ("total", "occluder_boundary", "occluder_mask", "occludee_boundary", "occludee_mask")


@dataclass
class TrainConfig:
    variant: str = "bilayer-gcn"
    iterations: int = 2000
    batch_size: int = 16
    lr: float = 0.01
    momentum: float = 0.9
    warmup_iters: int = 100
    warmup_factor: float = 0.1
    seed: int = 0
    occluded_fraction: float = 0.5
    channels: int = 32
    roi_size: int = 14
    mask_size: int = 28
    # query-decoder variants only
    queries: int = 20
    decoder_layers: int = 3
    heads: int = 1
    grid_size: int = 16
    num_classes: int = 3

    def __post_init__(self):
        if self.variant not in ALL_VARIANTS:
            raise ConfigurationError(f"unknown variant {self.variant!r}; expected one of {', '.join(ALL_VARIANTS)}")
        if self.warmup_iters > self.iterations:
            raise ConfigurationError("warmup iterations exceed total iterations")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("batch size must be positive and iterations non-negative")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})

    def lr_at(self, it: int) -> float:
        return self.lr * self.warmup_factor if it < self.warmup_iters else self.lr


@dataclass
class TrainResult:
    model: object
    config: TrainConfig
    curve: list = field(default_factory=list)  # rows of (iteration, total, components...)

    def curve_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("iteration",) + LOSS_COLUMNS)
        for row in self.curve:
            w.writerow([row[0]] + [repr(float(v)) for v in row[1:]])
        return buf.getvalue()


def build_model(cfg: TrainConfig, seed: Optional[int] = None):
    seed = cfg.seed if seed is None else seed
    if cfg.variant in TRANSFORMER_VARIANTS:
        return build_query_model(
            cfg.variant,
            dim=cfg.channels,
            queries=cfg.queries,
            layers=cfg.decoder_layers,
            num_classes=cfg.num_classes,
            heads=cfg.heads,
            seed=seed,
        )
    return build_head(cfg.variant, channels=cfg.channels, in_channels=ROI_CHANNELS, seed=seed)


# ----------------------------------------------------------------------------
# ROI samples
# ----------------------------------------------------------------------------


PIXEL_SCALE = 0.285  # std of a uniform [0, 1] intensity, rounded


def normalise_image(image) -> np.ndarray:
    """Map uint8 intensities to roughly zero mean, unit variance."""
    return (np.asarray(image, dtype=np.float64) / 255.0 - 0.5) / PIXEL_SCALE


ROI_CHANNELS = 5  # RGB + normalised (y, x)


def roi_input(image, box, size: int = 14) -> np.ndarray:
    """``5 x size x size`` ROI input: bilinear crop of the normalised image plus
    two coordinate channels in [-1, 1], so position-blind layers such as the
    non-local block can still tell where a pixel sits in the box."""
    crop = roi_crop(normalise_image(image), box, size).transpose(2, 0, 1)
    c = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(c, c, indexing="ij")
    return np.concatenate([crop, yy[None], xx[None]], axis=0)


@dataclass
class RoiSet:
    inputs: np.ndarray  # N x 5 x r x r
    targets: OcclusionPair  # stacked, N x 1 x m x m
    pairs: list

    def __len__(self):
        return self.inputs.shape[0]

    def batch(self, idx):
        t = self.targets
        return self.inputs[idx], OcclusionPair(
            -1,
            t.occludee_mask[idx],
            t.occludee_boundary[idx],
            t.occluder_mask[idx],
            t.occluder_boundary[idx],
        )


def scene_pairs(scenes: Sequence[SceneAnnotation]) -> list[OcclusionPair]:
    return [derive_pair_modal(s, inst.id) for s in scenes for inst in s.instances]


def build_rois(scenes: Sequence[SceneAnnotation], pairs: Sequence[OcclusionPair], roi_size=14, mask_size=28) -> RoiSet:
    by_id = {s.image_id: s for s in scenes}
    inputs = np.stack([roi_input(by_id[p.image_id].image, p.roi_box, roi_size) for p in pairs])
    targets = stack_pairs([p.resized(mask_size) for p in pairs])
    return RoiSet(inputs, targets, list(pairs))


# ----------------------------------------------------------------------------
# training
# ----------------------------------------------------------------------------


class _SGD:
    def __init__(self, params, momentum):
        self.params = params
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, lr):
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.data -= lr * v
            p.zero_grad()


def _batches(rng, n, batch_size):
    """Endless stream of index batches drawn from consecutive shuffled epochs."""
    pending = np.empty(0, dtype=np.int64)
    while True:
        while pending.size < batch_size:
            pending = np.concatenate([pending, rng.permutation(n)])
        yield pending[:batch_size]
        pending = pending[batch_size:]


def train(scenes: Sequence[SceneAnnotation], cfg: TrainConfig, model=None, log_every: int = 0, log=print) -> TrainResult:
    if not scenes:
        raise ContractError("training needs at least one scene")
    if cfg.variant in TRANSFORMER_VARIANTS:
        return train_query_model(scenes, cfg, model, log_every, log)
    rng = np.random.default_rng([cfg.seed, 1])
    model = build_model(cfg) if model is None else model
    pairs = balance_sample(scene_pairs(scenes), rng, cfg.occluded_fraction)
    rois = build_rois(scenes, pairs, cfg.roi_size, cfg.mask_size)
    params = model.parameters()
    opt = _SGD(params, cfg.momentum)
    weights = LossWeights()
    curve = []
    batches = _batches(rng, len(rois), cfg.batch_size)
    for it in range(cfg.iterations):
        x, gt = rois.batch(next(batches))
        out = model(x)
        losses = head_losses(out, gt, weights)
        total = float(losses.total.data)
        if not np.isfinite(total):
            raise TrainingError(f"loss became {total} at iteration {it}", iteration=it)
        T.backward(losses.total)
        opt.step(cfg.lr_at(it))
        curve.append((it,) + tuple(float(v.data) if v is not None else 0.0 for v in losses))
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            log(f"iter {it:5d}  loss {total:.5f}")
    return TrainResult(model, cfg, curve)


def train_query_model(scenes, cfg: TrainConfig, model=None, log_every: int = 0, log=print) -> TrainResult:
    rng = np.random.default_rng([cfg.seed, 1])
    model = build_model(cfg) if model is None else model
    grids = np.stack([image_grid(s.image, cfg.grid_size) for s in scenes])
    targets = [scene_targets(s, (cfg.grid_size, cfg.grid_size)) for s in scenes]
    opt = _SGD(model.parameters(), cfg.momentum)
    curve = []
    bs = min(cfg.batch_size, len(scenes))
    batches = _batches(rng, len(scenes), bs)
    for it in range(cfg.iterations):
        idx = next(batches)
        occ, ee = model(grids[idx])
        total = None
        parts = np.zeros(4)
        for b, i in enumerate(idx):
            ee_b = _select(ee, b)
            occ_b = _select(occ, b) if occ is not None else None
            m = hungarian_match(matching_cost(ee_b.class_logits, ee_b.mask_logits, targets[i]))
            terms = set_loss(ee_b, targets[i], copy_assignment(m), occ_b)
            total = terms.total if total is None else total + terms.total
            if occ_b is not None:
                parts[0] += float(terms.occluder_class.data)
                parts[1] += float(terms.occluder_mask_bce.data + terms.occluder_dice.data)
            parts[2] += float(terms.occludee_class.data)
            parts[3] += float(terms.occludee_mask_bce.data + terms.occludee_dice.data)
        total = total * (1.0 / len(idx))
        value = float(total.data)
        if not np.isfinite(value):
            raise TrainingError(f"loss became {value} at iteration {it}", iteration=it)
        T.backward(total)
        opt.step(cfg.lr_at(it))
        curve.append((it, value, *(parts / len(idx))))
        if log_every and (it % log_every == 0 or it == cfg.iterations - 1):
            log(f"iter {it:5d}  loss {value:.5f}")
    return TrainResult(model, cfg, curve)


def _select(out, b):
    from .transformer import DecodeOutput

    return DecodeOutput(
        out.embeddings[b],
        out.mask_logits[b],
        out.class_logits[b],
        out.box_logits[b] if out.box_logits is not None else None,
    )


# ----------------------------------------------------------------------------
# evaluation
# ----------------------------------------------------------------------------


@dataclass
class Prediction:
    image_id: int
    mask: np.ndarray  # boolean, image grid
    score: float
    occluder_mask: Optional[np.ndarray] = None
    gt_index: Optional[int] = None  # instance this ROI prediction was made for


def mask_iou(a, b) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    union = np.count_nonzero(a | b)
    return np.count_nonzero(a & b) / union if union else 1.0


def average_precision(scores, matched, n_gt: int) -> float:
    """All-point interpolated AP for score-ranked detections.

    ``matched[i]`` says whether detection ``i`` is a true positive.
    """
    if n_gt == 0:
        return float("nan")
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        return 0.0
    order = np.argsort(-scores, kind="stable")
    tp = np.asarray(matched, dtype=np.float64)[order]
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1.0 - tp)
    recall = ctp / n_gt
    precision = ctp / np.maximum(ctp + cfp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.flatnonzero(mrec[1:] != mrec[:-1])
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def greedy_match(ious: np.ndarray, scores, threshold: float) -> np.ndarray:
    """Per-image matching: detections in score order take the best-IoU free GT
    at or above ``threshold``.  Returns a TP flag per detection."""
    n_det = ious.shape[0]
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    taken = np.zeros(ious.shape[1], dtype=bool)
    tp = np.zeros(n_det, dtype=bool)
    for d in order:
        best, best_iou = -1, threshold
        for g in range(ious.shape[1]):
            if not taken[g] and ious[d, g] >= best_iou:
                best, best_iou = g, ious[d, g]
        if best >= 0:
            taken[best] = True
            tp[d] = True
    return tp


@dataclass
class EvalReport:
    variant: str
    mean_iou: float
    ap: float
    ap50: float
    occluder_iou: Optional[float]
    ap_per_threshold: dict
    n_instances: int
    seeds: list = field(default_factory=list)
    wall_clock: float = 0.0  # seconds; kept out of to_dict for reproducible artifacts

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("wall_clock")
        return d


def evaluate_predictions(preds: Sequence[Prediction], scenes: Sequence[SceneAnnotation], variant: str = "", max_dets: int = 50) -> EvalReport:
    """Mask AP over IoU thresholds .50:.05:.95 plus mean per-instance IoU.

    Predictions that carry ``gt_index`` were made for that instance's box and
    give the per-instance IoU directly; otherwise each GT instance takes its
    best IoU among the kept predictions of its image.
    """
    by_image: dict[int, list[Prediction]] = {}
    for p in preds:
        by_image.setdefault(p.image_id, []).append(p)
    n_gt = sum(len(s.instances) for s in scenes)
    per_instance, occ_ious = [], []
    all_scores, tp_at = [], {float(t): [] for t in IOU_THRESHOLDS}
    for s in scenes:
        ps = sorted(by_image.get(s.image_id, []), key=lambda p: -p.score)[:max_dets]
        gts = [i.modal_mask for i in s.instances]
        ious = np.array([[mask_iou(p.mask, g) for g in gts] for p in ps]).reshape(len(ps), len(gts))
        for gi, inst in enumerate(s.instances):
            own = [k for k, p in enumerate(ps) if p.gt_index == gi]
            if own:
                per_instance.append(ious[own[0], gi])
                p = ps[own[0]]
                if p.occluder_mask is not None:
                    gt_occ = derive_pair_modal(s, inst.id).occluder_mask
                    if gt_occ.any():
                        occ_ious.append(mask_iou(p.occluder_mask, gt_occ))
            else:
                per_instance.append(ious[:, gi].max() if len(ps) else 0.0)
        scores = [p.score for p in ps]
        all_scores.extend(scores)
        for t in tp_at:
            tp_at[t].extend(greedy_match(ious, scores, t).tolist() if len(ps) else [])
    ap_t = {f"{t:.2f}": average_precision(all_scores, tp_at[t], n_gt) for t in tp_at}
    return EvalReport(
        variant=variant,
        mean_iou=float(np.mean(per_instance)) if per_instance else 0.0,
        ap=float(np.mean(list(ap_t.values()))),
        ap50=ap_t["0.50"],
        occluder_iou=float(np.mean(occ_ious)) if occ_ious else None,
        ap_per_threshold=ap_t,
        n_instances=n_gt,
    )


def head_predictions(model: MaskHead, scenes: Sequence[SceneAnnotation], roi_size=14, chunk: int = 64) -> list[Prediction]:
    """One prediction per GT box: the pasted occludee (and occluder) probability maps."""
    jobs = [(s, gi, inst) for s in scenes for gi, inst in enumerate(s.instances)]
    preds = []
    for start in range(0, len(jobs), chunk):
        part = jobs[start : start + chunk]
        x = np.stack([roi_input(s.image, inst.bbox, roi_size) for s, _, inst in part])
        with T.no_grad():
            out = model(x)
        ee = _sigmoid(out.occludee_mask_logits.data[:, 0])
        occ = _sigmoid(out.occluder_mask_logits.data[:, 0]) if out.occluder_mask_logits is not None else None
        for k, (s, gi, inst) in enumerate(part):
            shape = (s.height, s.width)
            prob = paste_mask(ee[k], inst.bbox, shape)
            occ_mask = paste_mask(occ[k], inst.bbox, shape) >= 0.5 if occ is not None else None
            preds.append(Prediction(s.image_id, prob >= 0.5, float(ee[k].mean()), occ_mask, gi))
    return preds


def query_predictions(model: QueryModel, scenes: Sequence[SceneAnnotation], grid_size=16, max_dets: int = 50) -> list[Prediction]:
    """Per query: upsampled mask and score = best object-class probability
    times mean mask probability inside the predicted mask."""
    preds = []
    for s in scenes:
        with T.no_grad():
            occ, ee = model(image_grid(s.image, grid_size))
        cls = ee.class_logits.data
        cls = np.exp(cls - cls.max(axis=-1, keepdims=True))
        cls /= cls.sum(axis=-1, keepdims=True)
        obj = cls[:, :-1].max(axis=-1)
        full = (0, 0, s.width, s.height)
        prob = _sigmoid(ee.mask_logits.data)
        occ_prob = _sigmoid(occ.mask_logits.data) if occ is not None else None
        cand = []
        for q in range(prob.shape[0]):
            m = paste_mask(prob[q], full, (s.height, s.width))
            binary = m >= 0.5
            inside = float(m[binary].mean()) if binary.any() else 0.0
            om = paste_mask(occ_prob[q], full, (s.height, s.width)) >= 0.5 if occ_prob is not None else None
            cand.append(Prediction(s.image_id, binary, float(obj[q] * inside), om))
        cand.sort(key=lambda p: -p.score)
        preds.extend(cand[:max_dets])
    return preds


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def evaluate(model, scenes: Sequence[SceneAnnotation], cfg: TrainConfig, max_dets: int = 50) -> EvalReport:
    start = time.perf_counter()
    if cfg.variant in TRANSFORMER_VARIANTS:
        preds = query_predictions(model, scenes, cfg.grid_size, max_dets)
    else:
        preds = head_predictions(model, scenes, cfg.roi_size)
    report = evaluate_predictions(preds, scenes, cfg.variant, max_dets)
    report.seeds = [cfg.seed]
    report.wall_clock = time.perf_counter() - start
    return report


# ----------------------------------------------------------------------------
# variant comparison
# ----------------------------------------------------------------------------


@dataclass
class VariantRow:
    variant: str
    params: int
    seeds: list
    mean_iou: list
    ap: list
    ap50: list
    occluder_iou: list

    @staticmethod
    def _stat(values):
        vals = [v for v in values if v is not None]
        if not vals:
            return None, None
        return float(np.mean(vals)), float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0

    def summary(self) -> dict:
        out = {"variant": self.variant, "params": self.params, "seeds": self.seeds}
        for key in ("mean_iou", "ap", "ap50", "occluder_iou"):
            vals = getattr(self, key)
            mean, sd = self._stat(vals)
            out[key] = {"per_seed": vals, "mean": mean, "sd": sd}
        return out


@dataclass
class Comparison:
    rows: list
    curves: dict = field(default_factory=dict)  # (variant, seed) -> loss curve
    wall_clock: float = 0.0

    def row(self, variant) -> VariantRow:
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_dict(self) -> dict:
        return {"variants": [r.summary() for r in self.rows]}

    def table(self) -> str:
        head = ("variant", "params", "occludee IoU", "AP", "AP50", "occluder IoU")
        lines = []
        for r in self.rows:
            s = r.summary()

            def fmt(key):
                m, sd = s[key]["mean"], s[key]["sd"]
                return "-" if m is None else f"{100 * m:.2f} ± {100 * sd:.2f}"

            lines.append((r.variant, str(r.params), fmt("mean_iou"), fmt("ap"), fmt("ap50"), fmt("occluder_iou")))
        widths = [max(len(h), *(len(l[i]) for l in lines)) if lines else len(h) for i, h in enumerate(head)]
        out = ["  ".join(h.ljust(w) for h, w in zip(head, widths))]
        out.append("  ".join("-" * w for w in widths))
        out += ["  ".join(c.ljust(w) for c, w in zip(l, widths)) for l in lines]
        return "\n".join(out) + "\n"


def _run_unit(args):
    variant, seed, base, train_scenes, test_scenes = args
    cfg = replace(base, variant=variant, seed=seed)
    result = train(train_scenes, cfg)
    report = evaluate(result.model, test_scenes, cfg)
    return variant, seed, count_params(result.model), report, result.curve


def compare_variants(
    variants: Sequence[str],
    seeds: Sequence[int],
    train_scenes,
    test_scenes,
    base: TrainConfig | None = None,
    jobs: int = 1,
    log=None,
) -> Comparison:
    """Train and evaluate every (variant, seed) on the same data."""
    base = base or TrainConfig()
    start = time.perf_counter()
    units = [(v, s, base, train_scenes, test_scenes) for v in variants for s in seeds]
    if jobs > 1 and len(units) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_unit, units))
    else:
        results = []
        for u in units:
            results.append(_run_unit(u))
            if log:
                v, s, _, rep, _ = results[-1]
                log(f"{v} seed {s}: occludee IoU {rep.mean_iou:.4f}  AP {rep.ap:.4f}  ({rep.wall_clock:.1f}s eval)")
    rows, curves = [], {}
    for v in variants:
        got = [r for r in results if r[0] == v]
        rows.append(
            VariantRow(
                variant=v,
                params=got[0][2],
                seeds=[r[1] for r in got],
                mean_iou=[r[3].mean_iou for r in got],
                ap=[r[3].ap for r in got],
                ap50=[r[3].ap50 for r in got],
                occluder_iou=[r[3].occluder_iou for r in got],
            )
        )
        for r in got:
            curves[(v, r[1])] = r[4]
    return Comparison(rows, curves, time.perf_counter() - start)


def comparison_json(c: Comparison, extra: dict | None = None) -> str:
    d = dict(extra or {})
    d.update(c.to_dict())
    return json.dumps(d, indent=2) + "\n"
