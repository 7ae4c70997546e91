"""Query-based bilayer decoding.

Occludee queries are learnable embeddings; each occluder query is produced
from its occludee query by a two-layer MLP, so query ``i`` of both sets
describes the same object.  A first decoder refines the occluder queries and
predicts occluder masks; its final query embeddings are added index-wise to
the occludee queries entering the second decoder.  Every decoder layer is
masked cross-attention to pixel features, then self-attention among the
queries of its own set, then a feed-forward block, each wrapped in a residual
connection and layer norm.  The cross-attention of a layer only sees pixels
that the previous prediction of the same query puts at probability >= 0.5.

Matching runs on the occludee side; the occluder side reuses the assignment.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .annotations import SceneAnnotation, derive_pair, resize_mask_area, tight_bbox
from .errors import ConfigurationError, ContractError, DimensionError, DomainError
from .mask_head import ConvParams, init_conv, iter_params, to_nodes
from .tensor import Tensor

TRANSFORMER_VARIANTS = ("transformer-single", "transformer-bilayer")
NO_OBJECT_OCCLUDER = 1  # occluder-side classes: 0 = occluder present, 1 = none


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


@dataclass
class LinearParams:
    w: Tensor  # in x out
    b: Tensor


@dataclass
class MLPParams:
    """Two linear maps with a ReLU between them."""

    l1: LinearParams
    l2: LinearParams


@dataclass
class AttentionParams:
    q: LinearParams
    k: Tensor  # no bias: a key bias shifts every logit of a row equally
    v: LinearParams
    o: LinearParams


@dataclass
class DecoderLayerParams:
    cross: AttentionParams
    cross_ln: LinearParams  # gain, bias stored as w, b
    self_attn: AttentionParams
    self_ln: LinearParams
    ffn: MLPParams
    ffn_ln: LinearParams


@dataclass
class DecoderParams:
    layers: list[DecoderLayerParams]
    mask_mlp: MLPParams
    class_head: LinearParams
    box_head: Optional[LinearParams] = None


@dataclass
class PixelFeatures:
    feat: Tensor  # [B,] D x H x W

    @property
    def nodes(self) -> Tensor:
        return to_nodes(self.feat)

    @property
    def hw(self) -> tuple[int, int]:
        return self.feat.shape[-2], self.feat.shape[-1]


@dataclass
class QuerySet:
    occludee_q: Tensor
    occluder_q: Tensor

    @property
    def q_count(self) -> int:
        return self.occludee_q.shape[-2]

    @property
    def dim(self) -> int:
        return self.occludee_q.shape[-1]


@dataclass
class MatchResult:
    """``assignment[q]`` is the GT index supervised by query ``q``, or -1."""

    assignment: np.ndarray

    def pairs(self) -> list[tuple[int, int]]:
        return [(int(q), int(g)) for q, g in enumerate(self.assignment) if g >= 0]

    def query_of(self, gt: int) -> int:
        hits = np.flatnonzero(self.assignment == gt)
        return int(hits[0]) if hits.size else -1


@dataclass
class DecodeOutput:
    embeddings: Tensor  # final query embeddings, [B,] Q x D
    mask_logits: Tensor  # [B,] Q x H x W
    class_logits: Tensor  # [B,] Q x C
    box_logits: Optional[Tensor] = None
    per_layer_masks: list = field(default_factory=list)


def _linear_init(rng, d_in, d_out, std=None) -> LinearParams:
    std = np.sqrt(1.0 / d_in) if std is None else std
    return LinearParams(
        Tensor(rng.normal(0.0, std, size=(d_in, d_out)), requires_grad=True),
        Tensor(np.zeros(d_out), requires_grad=True),
    )


def _ln_init(d) -> LinearParams:
    return LinearParams(Tensor(np.ones(d), requires_grad=True), Tensor(np.zeros(d), requires_grad=True))


def init_mlp(rng, d_in, d_hidden, d_out) -> MLPParams:
    return MLPParams(_linear_init(rng, d_in, d_hidden, np.sqrt(2.0 / d_in)), _linear_init(rng, d_hidden, d_out))


def init_decoder(rng, dim: int, layers: int, num_classes: int, boxes: bool = False) -> DecoderParams:
    def attn():
        q, k, v, o = (_linear_init(rng, dim, dim) for _ in range(4))
        return AttentionParams(q, k.w, v, o)

    blocks = [
        DecoderLayerParams(
            cross=attn(),
            cross_ln=_ln_init(dim),
            self_attn=attn(),
            self_ln=_ln_init(dim),
            ffn=init_mlp(rng, dim, 2 * dim, dim),
            ffn_ln=_ln_init(dim),
        )
        for _ in range(layers)
    ]
    return DecoderParams(
        layers=blocks,
        mask_mlp=init_mlp(rng, dim, dim, dim),
        class_head=_linear_init(rng, dim, num_classes),
        box_head=_linear_init(rng, dim, 4, 0.01) if boxes else None,
    )


# ----------------------------------------------------------------------------
# building blocks
# ----------------------------------------------------------------------------


def linear(x: Tensor, p: LinearParams) -> Tensor:
    return T.matmul(x, p.w) + p.b


def mlp(x: Tensor, p: MLPParams) -> Tensor:
    return linear(T.relu(linear(x, p.l1)), p.l2)


def derive_occluder_queries(occludee_q: Tensor, p: MLPParams) -> Tensor:
    return mlp(occludee_q, p)


def mask_from_query(q: Tensor, px: PixelFeatures, mask_mlp: MLPParams) -> Tensor:
    """``logits[.., h, w] = mlp(q) . feat[.., :, h, w]`` for every query."""
    embed = mlp(q, mask_mlp)
    if embed.shape[-1] != px.feat.shape[-3]:
        raise DimensionError(f"query dim {embed.shape[-1]} does not match pixel feature dim {px.feat.shape[-3]}")
    h, w = px.hw
    logits = T.matmul(embed, T.swap_last(px.nodes))
    return T.reshape(logits, (*logits.shape[:-1], h, w))


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, n, d = x.shape
    x = T.reshape(x, (*lead, n, heads, d // heads))
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    return T.transpose(x, tuple(axes))


def _merge_heads(x: Tensor) -> Tensor:
    *lead, heads, n, d = x.shape
    axes = list(range(len(lead))) + [len(lead) + 1, len(lead), len(lead) + 2]
    x = T.transpose(x, tuple(axes))
    return T.reshape(x, (*lead, n, heads * d))


def attend(q: Tensor, k: Tensor, v: Tensor, mask=None) -> Tensor:
    """Scaled dot-product attention; ``mask`` False entries are excluded."""
    scale = 1.0 / np.sqrt(q.shape[-1])
    logits = T.matmul(q, T.swap_last(k)) * scale
    return T.matmul(T.softmax(logits, axis=-1, mask=mask), v)


def attention(x: Tensor, context: Tensor, p: AttentionParams, heads: int = 1, mask=None) -> Tensor:
    d = x.shape[-1]
    if d % heads:
        raise ConfigurationError(f"model dim {d} is not divisible by {heads} heads")
    q, k, v = linear(x, p.q), T.matmul(context, p.k), linear(context, p.v)
    if heads == 1:
        return linear(attend(q, k, v, mask), p.o)
    if mask is not None:
        mask = np.expand_dims(mask, -3)
    out = attend(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads), mask)
    return linear(_merge_heads(out), p.o)


def _ln(x: Tensor, p: LinearParams) -> Tensor:
    return T.layer_norm(x, p.w, p.b)


def fallback_mask(attn_mask) -> np.ndarray:
    """Rows with no admissible pixel become fully admissible."""
    m = np.array(attn_mask, dtype=bool)
    empty = ~m.any(axis=-1)
    m[empty] = True
    return m


def decoder_layer(queries: Tensor, px: PixelFeatures, attn_mask, p: DecoderLayerParams, heads: int = 1) -> Tensor:
    mask = None if attn_mask is None else fallback_mask(attn_mask)
    pixels = px.nodes
    q = _ln(queries + attention(queries, pixels, p.cross, heads, mask), p.cross_ln)
    q = _ln(q + attention(q, q, p.self_attn, heads), p.self_ln)
    return _ln(q + mlp(q, p.ffn), p.ffn_ln)


def attention_mask_from(logits: Tensor) -> np.ndarray:
    """Admit pixels whose predicted probability is at least 0.5 (logit >= 0)."""
    flat = logits.data.reshape(*logits.shape[:-2], -1)
    T.note_kink(flat)
    return flat >= 0.0


def decode(queries: Tensor, px: PixelFeatures, p: DecoderParams, heads: int = 1) -> DecodeOutput:
    logits = mask_from_query(queries, px, p.mask_mlp)
    per_layer = [logits]
    q = queries
    for layer in p.layers:
        q = decoder_layer(q, px, attention_mask_from(logits), layer, heads)
        logits = mask_from_query(q, px, p.mask_mlp)
        per_layer.append(logits)
    boxes = linear(q, p.box_head) if p.box_head is not None else None
    return DecodeOutput(q, logits, linear(q, p.class_head), boxes, per_layer)


def bilayer_decode(qs: QuerySet, px: PixelFeatures, occluder_p: DecoderParams, occludee_p: DecoderParams, heads: int = 1, guidance: bool = True):
    """Returns ``(occluder_out, occludee_out)``.

    With ``guidance`` the occluder decoder's final embeddings are added to
    the occludee queries before the second decoder; without it the two
    decoders are independent.
    """
    occ = decode(qs.occluder_q, px, occluder_p, heads)
    start = qs.occludee_q + occ.embeddings if guidance else qs.occludee_q
    return occ, decode(start, px, occludee_p, heads)


# ----------------------------------------------------------------------------
# matching
# ----------------------------------------------------------------------------


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost assignment of every GT column to a distinct query row.

    Shortest augmenting paths with row/column potentials, O(G^2 Q).  Ties are
    resolved toward the lowest query index.
    """
    c = np.asarray(cost.data if isinstance(cost, Tensor) else cost, dtype=np.float64)
    if c.ndim != 2:
        raise DimensionError(f"cost must be a Q x G matrix, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise DomainError("cost matrix contains non-finite entries")
    n_q, n_g = c.shape
    if n_g > n_q:
        raise ContractError(f"cannot match {n_g} ground-truth objects with only {n_q} queries")
    assignment = np.full(n_q, -1, dtype=np.int64)
    if n_g == 0:
        return MatchResult(assignment)
    a = c.T  # rows = GT, cols = queries
    n, m = n_g, n_q
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j] = GT row (1-based) holding query j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = a[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1  # argmin returns the first (lowest) index
            delta = masked[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    for j in range(1, m + 1):
        if owner[j]:
            assignment[j - 1] = owner[j] - 1
    return MatchResult(assignment)


def copy_assignment(m: MatchResult) -> MatchResult:
    return MatchResult(m.assignment.copy())


# ----------------------------------------------------------------------------
# targets and losses
# ----------------------------------------------------------------------------


@dataclass
class SetTargets:
    classes: np.ndarray  # G
    occludee_masks: np.ndarray  # G x H x W
    occluder_masks: np.ndarray  # G x H x W, empty where unoccluded
    boxes: Optional[np.ndarray] = None  # G x 4 normalised (x0, y0, x1, y1)

    def __len__(self):
        return len(self.classes)


def occluder_targets(scene: SceneAnnotation, rule: str = "auto") -> list[np.ndarray]:
    """Grouped-occluder mask of every instance, in scene order."""
    out = []
    for inst in scene.instances:
        pair = derive_pair(scene, inst.id, rule)
        out.append(pair.occluder_mask.copy())
    return out


def scene_targets(scene: SceneAnnotation, size: tuple[int, int], rule: str = "auto") -> SetTargets:
    """Resample a scene's modal and grouped-occluder masks onto the feature grid."""
    full = (0, 0, scene.width, scene.height)
    h, w = size
    if h != w:
        raise ConfigurationError("feature grid must be square")
    em = np.stack([resize_mask_area(i.modal_mask, full, h) for i in scene.instances]) if scene.instances else np.zeros((0, h, w))
    om = [resize_mask_area(m, full, h) for m in occluder_targets(scene, rule)]
    om = np.stack(om) if om else np.zeros((0, h, w))
    boxes = []
    for inst in scene.instances:
        x, y, bw, bh = tight_bbox(inst.modal_mask)
        boxes.append([x / scene.width, y / scene.height, (x + bw) / scene.width, (y + bh) / scene.height])
    return SetTargets(
        classes=np.array([i.class_id for i in scene.instances], dtype=np.int64),
        occludee_masks=em.astype(np.float64),
        occluder_masks=om.astype(np.float64),
        boxes=np.array(boxes, dtype=np.float64).reshape(-1, 4),
    )


def _np_sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def matching_cost(class_logits, mask_logits, gts: SetTargets) -> np.ndarray:
    """``Q x G`` cost: class NLL + mean mask BCE + dice, unit weights."""
    cl = np.asarray(class_logits.data if isinstance(class_logits, Tensor) else class_logits)
    ml = np.asarray(mask_logits.data if isinstance(mask_logits, Tensor) else mask_logits)
    q = ml.shape[0]
    z = ml.reshape(q, -1)
    t = gts.occludee_masks.reshape(len(gts), -1)
    shifted = cl - cl.max(axis=-1, keepdims=True)
    logp = shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    nll = -logp[:, gts.classes]
    softplus = np.maximum(z, 0) + np.log1p(np.exp(-np.abs(z)))
    bce = (softplus.sum(axis=1, keepdims=True) - z @ t.T) / z.shape[1]
    p = _np_sigmoid(z)
    dice = 1.0 - (2.0 * (p @ t.T) + 1.0) / (p.sum(axis=1, keepdims=True) + t.sum(axis=1)[None, :] + 1.0)
    return nll + bce + dice


def dice_loss(logits: Tensor, targets) -> Tensor:
    """Summed per-row ``1 - (2|p t| + 1) / (|p| + |t| + 1)`` over the leading axis."""
    p = T.sigmoid(logits)
    t = np.asarray(targets, dtype=np.float64)
    axes = tuple(range(1, p.ndim))
    num = 2.0 * T.tsum(p * t, axes) + 1.0
    den = T.tsum(p, axes) + (t.sum(axis=axes) + 1.0)
    return T.tsum(1.0 - num / den)


def box_loss(box_logits: Tensor, targets) -> Tensor:
    """L1 plus ``1 - IoU`` on sigmoid-normalised ``(x0, y0, x1, y1)`` boxes, summed."""
    t = np.asarray(targets, dtype=np.float64)
    b = T.sigmoid(box_logits)
    l1 = T.tsum(T.tabs(b - t))
    x0, y0, x1, y1 = (b[:, i] for i in range(4))
    area_p = T.tabs((x1 - x0) * (y1 - y0))
    area_t = np.abs((t[:, 2] - t[:, 0]) * (t[:, 3] - t[:, 1]))
    iw = T.maximum(T.minimum(x1, t[:, 2]) - T.maximum(x0, t[:, 0]), 0.0)
    ih = T.maximum(T.minimum(y1, t[:, 3]) - T.maximum(y0, t[:, 1]), 0.0)
    inter = iw * ih
    iou = inter / (area_p + area_t - inter + 1e-9)
    return l1 + T.tsum(1.0 - iou)


@dataclass
class SetLossTerms:
    total: Tensor
    occludee_class: Tensor
    occludee_mask_bce: Tensor
    occludee_dice: Tensor
    occluder_class: Optional[Tensor] = None
    occluder_mask_bce: Optional[Tensor] = None
    occluder_dice: Optional[Tensor] = None
    box: Optional[Tensor] = None


def _side_loss(out: DecodeOutput, q_idx, class_targets, masks, no_object_weight):
    n_pairs = len(q_idx)
    weights = np.where(class_targets == out.class_logits.shape[-1] - 1, no_object_weight, 1.0)
    cls = T.cross_entropy(out.class_logits, class_targets, weights)
    if n_pairs == 0:
        zero = T.mul(T.tsum(out.mask_logits), 0.0)
        return cls, zero, zero
    picked = out.mask_logits[q_idx]
    bce = T.bce_with_logits(picked, masks) * float(n_pairs)
    return cls, bce, dice_loss(picked, masks)


def set_loss(occludee_out: DecodeOutput, gts: SetTargets, m: MatchResult, occluder_out: Optional[DecodeOutput] = None, no_object_weight: float = 1.0) -> SetLossTerms:
    """Set-prediction loss for one image.

    Matched pairs contribute class NLL, mean mask BCE and dice on each side
    (the occluder side uses ``m`` as copied from the occludee side); every
    unmatched query is pushed toward its side's no-object class.  With a box
    head, matched occludee queries add L1 + (1 - IoU).
    """
    pairs = m.pairs()
    q_idx = np.array([q for q, _ in pairs], dtype=np.int64)
    g_idx = np.array([g for _, g in pairs], dtype=np.int64)
    n_q = occludee_out.class_logits.shape[-2]
    no_obj = occludee_out.class_logits.shape[-1] - 1
    targets = np.full(n_q, no_obj, dtype=np.int64)
    targets[q_idx] = gts.classes[g_idx]
    cls, bce, dice = _side_loss(occludee_out, q_idx, targets, gts.occludee_masks[g_idx], no_object_weight)
    total = cls + bce + dice
    terms = SetLossTerms(total, cls, bce, dice)
    if occluder_out is not None:
        occ_masks = gts.occluder_masks[g_idx]
        occ_targets = np.full(n_q, NO_OBJECT_OCCLUDER, dtype=np.int64)
        present = occ_masks.reshape(len(g_idx), -1).any(axis=1) if len(g_idx) else np.zeros(0, dtype=bool)
        occ_targets[q_idx[present]] = 0
        ocls, obce, odice = _side_loss(occluder_out, q_idx, occ_targets, occ_masks, no_object_weight)
        terms.occluder_class, terms.occluder_mask_bce, terms.occluder_dice = ocls, obce, odice
        total = total + ocls + obce + odice
    if occludee_out.box_logits is not None and gts.boxes is not None and len(q_idx):
        terms.box = box_loss(occludee_out.box_logits[q_idx], gts.boxes[g_idx])
        total = total + terms.box
    terms.total = total
    return terms


# ----------------------------------------------------------------------------
# model
# ----------------------------------------------------------------------------


def image_grid(image: np.ndarray, size: int) -> np.ndarray:
    """Area-average an ``H x W x 3`` uint8 image to ``size x size`` and append
    two normalised coordinate channels: ``5 x size x size``."""
    img = np.asarray(image, dtype=np.float64) / 255.0
    h, w = img.shape[:2]
    if h % size or w % size:
        raise ConfigurationError(f"image {h}x{w} is not a multiple of the feature grid {size}")
    pooled = img.reshape(size, h // size, size, w // size, -1).mean(axis=(1, 3))
    coords = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    return np.concatenate([pooled.transpose(2, 0, 1), yy[None], xx[None]], axis=0)


@dataclass
class QueryModel:
    """Toy pixel stem, query embeddings and one or two decoders."""

    variant: str
    heads: int
    stem1: ConvParams
    stem2: ConvParams
    occludee_queries: Tensor
    occludee_decoder: DecoderParams
    query_mlp: Optional[MLPParams] = None
    occluder_decoder: Optional[DecoderParams] = None
    guidance: bool = True

    @property
    def bilayer(self) -> bool:
        return self.occluder_decoder is not None

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in iter_params(self)]

    def pixel_features(self, grid) -> PixelFeatures:
        x = T.relu(T.conv2d(grid, self.stem1.w, self.stem1.b))
        return PixelFeatures(T.conv2d(x, self.stem2.w, self.stem2.b))

    def queries(self) -> QuerySet:
        occ = derive_occluder_queries(self.occludee_queries, self.query_mlp) if self.query_mlp else self.occludee_queries
        return QuerySet(self.occludee_queries, occ)

    def __call__(self, grid):
        """Returns ``(occluder_out or None, occludee_out)``."""
        px = self.pixel_features(grid)
        qs = self.queries()
        if not self.bilayer:
            return None, decode(qs.occludee_q, px, self.occludee_decoder, self.heads)
        return bilayer_decode(qs, px, self.occluder_decoder, self.occludee_decoder, self.heads, self.guidance)


def build_query_model(
    variant: str,
    dim: int = 32,
    queries: int = 100,
    layers: int = 3,
    num_classes: int = 3,
    heads: int = 1,
    in_channels: int = 5,
    boxes: bool = True,
    seed: int = 0,
) -> QueryModel:
    v = variant.lower()
    if v not in TRANSFORMER_VARIANTS:
        raise ConfigurationError(f"unknown transformer variant {variant!r}")
    rng = np.random.default_rng(seed)
    stem1 = init_conv(rng, dim, in_channels, 3)
    stem2 = init_conv(rng, dim, dim, 3, std=np.sqrt(1.0 / (9 * dim)))
    occludee_q = Tensor(rng.normal(0.0, 1.0, size=(queries, dim)), requires_grad=True)
    occludee_dec = init_decoder(rng, dim, layers, num_classes + 1, boxes)
    if v == "transformer-single":
        return QueryModel(v, heads, stem1, stem2, occludee_q, occludee_dec)
    query_mlp = init_mlp(rng, dim, dim, dim)
    occluder_dec = init_decoder(rng, dim, layers, 2, boxes=False)
    return QueryModel(v, heads, stem1, stem2, occludee_q, occludee_dec, query_mlp, occluder_dec)
