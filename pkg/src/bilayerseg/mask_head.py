"""Bilayer occluder/occludee mask head.

The head runs two branches over a cropped ROI feature.  The first (occluder)
branch predicts the boundary and mask of whatever covers the target; its
pre-upsample feature is projected and added back onto the ROI feature, and
the second (occludee) branch segments the target from that fused feature.
Each branch is ``3x3 conv -> mixer -> 3x3 conv -> x2 upsample -> two 1x1
predictors``, where the mixer is either a non-local graph convolution (GCN
variant) or another 3x3 convolution (FCN variant).

Feature layouts: spatial tensors are ``[B,] K x H x W``; graph-node tensors
are ``[B,] N x K`` with ``N = H * W`` in row-major order.
"""

from __future__ import annotations

import dataclasses
import io
import struct
from dataclasses import dataclass
from typing import Iterator, NamedTuple, Optional

import numpy as np
from scipy import ndimage

from . import tensor as T
from .errors import ConfigurationError, DimensionError
from .tensor import Tensor

GCN = "gcn"
FCN = "fcn"
HEAD_VARIANTS = ("single-fcn", "single-gcn", "bilayer-fcn", "bilayer-gcn")

CROSS = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class LossWeights:
    detect: float = 1.0
    occluder_boundary: float = 0.5
    occluder_mask: float = 0.25
    occludee_boundary: float = 0.5
    occludee_mask: float = 1.0


@dataclass
class NonLocalParams:
    theta_w: Tensor  # A x K x 1 x 1
    theta_b: Tensor
    phi_w: Tensor  # no bias: it would shift each adjacency row uniformly
    wg: Tensor  # K x K
    ln_gain: Tensor
    ln_bias: Tensor


@dataclass
class ConvParams:
    w: Tensor
    b: Tensor


@dataclass
class BranchParams:
    pre_conv: ConvParams
    mixer: NonLocalParams | ConvParams
    fcn_conv: ConvParams
    boundary_pred: ConvParams
    mask_pred: ConvParams
    fuse_w: Optional[Tensor] = None  # occluder branch only

    @property
    def variant(self) -> str:
        return GCN if isinstance(self.mixer, NonLocalParams) else FCN


@dataclass
class HeadOutput:
    z0: Optional[Tensor]
    xf: Optional[Tensor]
    z1: Tensor
    occluder_boundary_logits: Optional[Tensor]
    occluder_mask_logits: Optional[Tensor]
    occludee_boundary_logits: Tensor
    occludee_mask_logits: Tensor


class HeadLosses(NamedTuple):
    total: Tensor
    occluder_b: Optional[Tensor]
    occluder_s: Optional[Tensor]
    occludee_b: Tensor
    occludee_s: Tensor


# ----------------------------------------------------------------------------
# layout helpers
# ----------------------------------------------------------------------------


def to_nodes(x: Tensor) -> Tensor:
    """``[B,] K x H x W`` -> ``[B,] N x K``."""
    *lead, k, h, w = x.shape
    flat = T.reshape(x, (*lead, k, h * w))
    return T.swap_last(flat)


def to_grid(z: Tensor, h: int, w: int) -> Tensor:
    """``[B,] N x K`` -> ``[B,] K x H x W``."""
    *lead, n, k = z.shape
    if n != h * w:
        raise DimensionError(f"{n} nodes cannot form a {h}x{w} grid")
    return T.reshape(T.swap_last(z), (*lead, k, h, w))


def _linear_1x1(z: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Apply a 1x1 conv weight ``O x K x 1 x 1`` to node features ``N x K``."""
    mat = T.reshape(w, (w.shape[0], w.shape[1]))
    out = T.matmul(z, T.transpose(mat))
    return out if b is None else out + b


# ----------------------------------------------------------------------------
# graph convolution
# ----------------------------------------------------------------------------


def adjacency(x: Tensor, p: NonLocalParams) -> Tensor:
    """Row-softmax of embedded dot-product similarity between every node pair."""
    theta = _linear_1x1(x, p.theta_w, p.theta_b)
    phi = _linear_1x1(x, p.phi_w)
    return T.softmax(T.matmul(theta, T.swap_last(phi)), axis=-1)


def gcn_layer(x: Tensor, p: NonLocalParams) -> Tensor:
    """``relu(layer_norm(A @ x @ wg)) + x``."""
    a = adjacency(x, p)
    h = T.matmul(T.matmul(a, x), p.wg)
    return T.relu(T.layer_norm(h, p.ln_gain, p.ln_bias)) + x


def _conv_relu(x: Tensor, c: ConvParams) -> Tensor:
    return T.relu(T.conv2d(x, c.w, c.b))


def branch(x_roi: Tensor, p: BranchParams):
    """One branch of the head.

    Returns ``(z, boundary_logits, mask_logits)`` where ``z`` is the
    pre-upsample feature in node layout and the logits are ``[B,] 1 x 2H x 2W``.
    """
    h, w = x_roi.shape[-2:]
    feat = _conv_relu(x_roi, p.pre_conv)
    if isinstance(p.mixer, NonLocalParams):
        feat = to_grid(gcn_layer(to_nodes(feat), p.mixer), h, w)
    else:
        feat = _conv_relu(feat, p.mixer)
    feat = _conv_relu(feat, p.fcn_conv)
    up = T.upsample_bilinear_x2(feat)
    boundary = T.conv2d(up, p.boundary_pred.w, p.boundary_pred.b)
    mask = T.conv2d(up, p.mask_pred.w, p.mask_pred.b)
    return to_nodes(feat), boundary, mask


def occluder_branch(x_roi: Tensor, p: BranchParams):
    return branch(x_roi, p)


def fuse(z0: Tensor, fuse_w: Tensor, x_roi: Tensor) -> Tensor:
    """Occlusion-aware feature ``z0 @ fuse_w + x_roi`` (node layout)."""
    if z0.shape != x_roi.shape:
        raise DimensionError(f"fuse shape mismatch: {z0.shape} vs {x_roi.shape}")
    if fuse_w.shape != (z0.shape[-1], x_roi.shape[-1]):
        raise DimensionError(f"fuse weight {fuse_w.shape} incompatible with features {z0.shape}")
    return T.matmul(z0, fuse_w) + x_roi


def forward_bilayer(x_roi: Tensor, occluder_p: BranchParams, occludee_p: BranchParams) -> HeadOutput:
    if occluder_p.fuse_w is None:
        raise ConfigurationError("occluder branch needs a fuse weight")
    h, w = x_roi.shape[-2:]
    nodes = to_nodes(x_roi)
    z0, ob, om = occluder_branch(x_roi, occluder_p)
    xf = fuse(z0, occluder_p.fuse_w, nodes)
    z1, eb, em = branch(to_grid(xf, h, w), occludee_p)
    return HeadOutput(z0, xf, z1, ob, om, eb, em)


def forward_single(x_roi: Tensor, occludee_p: BranchParams) -> HeadOutput:
    z1, eb, em = branch(x_roi, occludee_p)
    return HeadOutput(None, None, z1, None, None, eb, em)


# ----------------------------------------------------------------------------
# targets and losses
# ----------------------------------------------------------------------------


def boundary_gt(mask) -> np.ndarray:
    """Two-pixel contour band of a binary mask.

    The inner contour ``mask & ~erode(mask)`` (3x3 cross, outside the grid
    counts as background) is dilated once with the same cross.
    """
    m = np.asarray(mask).astype(bool)
    if m.ndim > 2:
        return np.stack([boundary_gt(s) for s in m])
    if not m.any():
        return np.zeros(m.shape, dtype=np.uint8)
    inner = m & ~ndimage.binary_erosion(m, structure=CROSS, border_value=0)
    return ndimage.binary_dilation(inner, structure=CROSS).astype(np.uint8)


def _as_logit_target(t, like: Tensor) -> np.ndarray:
    arr = np.asarray(t, dtype=np.float64)
    if arr.shape != like.shape and arr.size == like.size and arr.squeeze().shape == like.data.squeeze().shape:
        arr = arr.reshape(like.shape)
    if arr.shape != like.shape:
        raise DimensionError(f"ground truth shape {arr.shape} does not match logits {like.shape}")
    return arr


def head_losses(out: HeadOutput, gt, w: LossWeights | None = None) -> HeadLosses:
    """Weighted boundary/mask BCE terms of both layers.

    ``gt`` exposes ``occludee_mask``, ``occludee_boundary``, ``occluder_mask``
    and ``occluder_boundary`` arrays already at logit resolution.  The
    detection term is not part of the head.
    """
    w = w or LossWeights()
    eb = T.bce_with_logits(out.occludee_boundary_logits, _as_logit_target(gt.occludee_boundary, out.occludee_boundary_logits))
    es = T.bce_with_logits(out.occludee_mask_logits, _as_logit_target(gt.occludee_mask, out.occludee_mask_logits))
    total = w.occludee_boundary * eb + w.occludee_mask * es
    ob = os_ = None
    if out.occluder_mask_logits is not None:
        ob = T.bce_with_logits(out.occluder_boundary_logits, _as_logit_target(gt.occluder_boundary, out.occluder_boundary_logits))
        os_ = T.bce_with_logits(out.occluder_mask_logits, _as_logit_target(gt.occluder_mask, out.occluder_mask_logits))
        total = w.occluder_boundary * ob + w.occluder_mask * os_ + total
    return HeadLosses(total, ob, os_, eb, es)


# ----------------------------------------------------------------------------
# parameters
# ----------------------------------------------------------------------------


def _normal(rng, shape, std) -> Tensor:
    return Tensor(rng.normal(0.0, std, size=shape), requires_grad=True)


def _zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def init_conv(rng, c_out, c_in, k, std=None) -> ConvParams:
    std = np.sqrt(2.0 / (c_in * k * k)) if std is None else std
    return ConvParams(_normal(rng, (c_out, c_in, k, k), std), _zeros(c_out))


# The GCN block starts close to its identity residual; a unit gain lets the
# freshly initialised graph term swamp the input features early in training.
GCN_GAIN_INIT = 0.1


def init_nonlocal(rng, k: int, att_dim: int | None = None) -> NonLocalParams:
    a = att_dim or max(k // 2, 1)
    return NonLocalParams(
        theta_w=_normal(rng, (a, k, 1, 1), 1.0 / np.sqrt(k)),
        theta_b=_zeros(a),
        phi_w=_normal(rng, (a, k, 1, 1), 1.0 / np.sqrt(k)),
        wg=_normal(rng, (k, k), 1.0 / np.sqrt(k)),
        ln_gain=Tensor(np.full(k, GCN_GAIN_INIT), requires_grad=True),
        ln_bias=_zeros(k),
    )


def init_branch(rng, k: int, variant: str, with_fuse: bool = False, att_dim: int | None = None) -> BranchParams:
    if variant not in (GCN, FCN):
        raise ConfigurationError(f"unknown branch variant {variant!r}")
    pre = init_conv(rng, k, k, 3)
    mixer = init_nonlocal(rng, k, att_dim) if variant == GCN else init_conv(rng, k, k, 3)
    return BranchParams(
        pre_conv=pre,
        mixer=mixer,
        fcn_conv=init_conv(rng, k, k, 3),
        boundary_pred=init_conv(rng, 1, k, 1, std=0.01),
        mask_pred=init_conv(rng, 1, k, 1, std=0.01),
        fuse_w=_normal(rng, (k, k), 1.0 / np.sqrt(k)) if with_fuse else None,
    )


def iter_params(obj, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
    """Yield ``(dotted_name, tensor)`` in field-declaration order."""
    if isinstance(obj, Tensor):
        yield prefix, obj
        return
    if obj is None:
        return
    if isinstance(obj, (list, tuple)):
        for i, item in enumerate(obj):
            yield from iter_params(item, f"{prefix}.{i}" if prefix else str(i))
        return
    if dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            name = f"{prefix}.{f.name}" if prefix else f.name
            yield from iter_params(getattr(obj, f.name), name)


def count_params(obj) -> int:
    return sum(t.size for _, t in iter_params(obj))


@dataclass
class MaskHead:
    """Complete ROI head: a 3x3 input stem lifting ROI pixels to ``K``
    channels, followed by one (single) or two (bilayer) branches."""

    variant: str
    stem: ConvParams
    occludee: BranchParams
    occluder: Optional[BranchParams] = None

    @property
    def bilayer(self) -> bool:
        return self.occluder is not None

    def parameters(self) -> list[Tensor]:
        return [t for _, t in iter_params(self)]

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        return list(iter_params(self))

    def features(self, roi_pixels: Tensor) -> Tensor:
        return _conv_relu(roi_pixels, self.stem)

    def __call__(self, roi_pixels: Tensor) -> HeadOutput:
        x = self.features(roi_pixels)
        if self.occluder is None:
            return forward_single(x, self.occludee)
        return forward_bilayer(x, self.occluder, self.occludee)


def parse_head_variant(variant: str) -> tuple[bool, str]:
    v = variant.lower()
    if v not in HEAD_VARIANTS:
        raise ConfigurationError(f"unknown head variant {variant!r}; expected one of {', '.join(HEAD_VARIANTS)}")
    layers, kind = v.split("-")
    return layers == "bilayer", kind


def build_head(variant: str, channels: int = 32, in_channels: int = 3, seed: int = 0, att_dim: int | None = None) -> MaskHead:
    bilayer, kind = parse_head_variant(variant)
    rng = np.random.default_rng(seed)
    stem = init_conv(rng, channels, in_channels, 3)
    occluder = init_branch(rng, channels, kind, with_fuse=True, att_dim=att_dim) if bilayer else None
    occludee = init_branch(rng, channels, kind, att_dim=att_dim)
    return MaskHead(variant.lower(), stem, occludee, occluder)


# ----------------------------------------------------------------------------
# checkpoint format
# ----------------------------------------------------------------------------


def checkpoint_bytes(named) -> bytes:
    """Serialise named tensors: for each, uint64 LE name length, UTF-8 name,
    then the tensor dump (extent count, extents, raw LE doubles)."""
    buf = io.BytesIO()
    for name, t in named:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<Q", len(raw)))
        buf.write(raw)
        T.write_tensor(buf, t)
    return buf.getvalue()


def read_checkpoint(data: bytes) -> dict[str, Tensor]:
    buf = io.BytesIO(data)
    out = {}
    while True:
        head = buf.read(8)
        if not head:
            return out
        if len(head) != 8:
            raise EOFError("truncated checkpoint entry")
        (n,) = struct.unpack("<Q", head)
        name = buf.read(n).decode("utf-8")
        out[name] = T.read_tensor(buf)


def load_into(model, tensors: dict[str, Tensor]) -> None:
    named = list(iter_params(model))
    missing = [n for n, _ in named if n not in tensors]
    if missing:
        raise ConfigurationError(f"checkpoint lacks parameters: {', '.join(missing[:5])}")
    for name, t in named:
        src = tensors[name].data
        if src.shape != t.shape:
            raise DimensionError(f"parameter {name}: checkpoint shape {src.shape} != model shape {t.shape}")
        t.data[...] = src
