"""Instance annotations and occluder/occludee ground truth.

Masks are boolean ``H x W`` grids in image coordinates.  Boxes are
``(x, y, w, h)`` in pixels, with pixel ``(r, c)`` covering ``[c, c+1) x [r, r+1)``.

Dataset files are a single JSON document::

    {"images": [{"id", "width", "height", "file_name"}],
     "annotations": [{"id", "image_id", "category_id", "bbox",
                      "segmentation": {"size": [H, W], "counts": [...]},
                      "amodal_segmentation": {...},     # optional
                      "occlusion_rank": int}]}          # optional

Run-length counts cover the row-major pixel sequence and start with the
number of background pixels (possibly zero).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import AnnotationLookupError, ContractError, DomainError
from .mask_head import boundary_gt

IOU = "iou"
INTERSECTION_OVER_MIN = "min"


# ----------------------------------------------------------------------------
# data model
# ----------------------------------------------------------------------------


def tight_bbox(mask) -> tuple[int, int, int, int]:
    m = np.asarray(mask, dtype=bool)
    rows = np.flatnonzero(m.any(axis=1))
    cols = np.flatnonzero(m.any(axis=0))
    if rows.size == 0:
        return (0, 0, 0, 0)
    return (int(cols[0]), int(rows[0]), int(cols[-1] - cols[0] + 1), int(rows[-1] - rows[0] + 1))


@dataclass
class InstanceAnnotation:
    id: int
    class_id: int
    modal_mask: np.ndarray
    amodal_mask: Optional[np.ndarray] = None
    occlusion_rank: Optional[int] = None
    bbox: Optional[tuple] = None

    def __post_init__(self):
        self.modal_mask = np.asarray(self.modal_mask, dtype=bool)
        if self.amodal_mask is not None:
            self.amodal_mask = np.asarray(self.amodal_mask, dtype=bool)
        if self.bbox is None:
            self.bbox = tight_bbox(self.modal_mask)
        self.bbox = tuple(int(v) for v in self.bbox)


@dataclass
class SceneAnnotation:
    image_id: int
    width: int
    height: int
    instances: list[InstanceAnnotation] = field(default_factory=list)
    file_name: Optional[str] = None
    image: Optional[np.ndarray] = None

    def __post_init__(self):
        ids = [inst.id for inst in self.instances]
        if len(ids) != len(set(ids)):
            raise ContractError(f"duplicate instance ids in image {self.image_id}")

    def get(self, instance_id: int) -> InstanceAnnotation:
        for inst in self.instances:
            if inst.id == instance_id:
                return inst
        raise AnnotationLookupError(f"image {self.image_id} has no instance {instance_id}")


@dataclass
class OcclusionPair:
    """Per-ROI training target: the occludee and the grouped occluders."""

    target_id: int
    occludee_mask: np.ndarray
    occludee_boundary: np.ndarray
    occluder_mask: np.ndarray
    occluder_boundary: np.ndarray
    roi_box: Optional[tuple] = None
    image_id: Optional[int] = None

    @property
    def occluded(self) -> bool:
        return bool(np.any(self.occluder_mask))

    def resized(self, out_size: int) -> "OcclusionPair":
        """Crop to ``roi_box`` and resample to ``out_size`` by area-threshold
        binarisation; boundaries are recomputed at the new resolution."""
        em = resize_mask_area(self.occludee_mask, self.roi_box, out_size)
        om = resize_mask_area(self.occluder_mask, self.roi_box, out_size)
        return replace(
            self,
            occludee_mask=em,
            occludee_boundary=boundary_gt(em),
            occluder_mask=om,
            occluder_boundary=boundary_gt(om),
        )


def stack_pairs(pairs: Sequence[OcclusionPair]) -> OcclusionPair:
    """Batch equally-sized pairs into ``B x 1 x H x W`` target arrays."""

    def st(name):
        return np.stack([getattr(p, name) for p in pairs]).astype(np.float64)[:, None]

    return OcclusionPair(
        target_id=-1,
        occludee_mask=st("occludee_mask"),
        occludee_boundary=st("occludee_boundary"),
        occluder_mask=st("occluder_mask"),
        occluder_boundary=st("occluder_boundary"),
    )


# ----------------------------------------------------------------------------
# run-length masks and dataset files
# ----------------------------------------------------------------------------


def rle_encode(mask) -> dict:
    m = np.asarray(mask, dtype=bool)
    flat = m.reshape(-1)
    change = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], change, [flat.size]])
    counts = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        counts = [0] + counts
    return {"size": [int(m.shape[0]), int(m.shape[1])], "counts": [int(c) for c in counts]}


def rle_decode(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    counts = np.asarray(rle["counts"], dtype=np.int64)
    if counts.sum() != h * w:
        raise DomainError(f"run-length counts sum to {counts.sum()}, expected {h * w}")
    values = np.arange(counts.size) % 2 == 1
    return np.repeat(values, counts).reshape(h, w)


def load_dataset(path, with_images: bool = False) -> list[SceneAnnotation]:
    path = Path(path)
    doc = json.loads(path.read_text())
    scenes = {}
    for img in doc["images"]:
        scenes[img["id"]] = SceneAnnotation(
            image_id=int(img["id"]),
            width=int(img["width"]),
            height=int(img["height"]),
            file_name=img.get("file_name"),
        )
    grouped: dict[int, list] = {k: [] for k in scenes}
    for ann in doc["annotations"]:
        if ann["image_id"] not in scenes:
            raise AnnotationLookupError(f"annotation {ann['id']} references unknown image {ann['image_id']}")
        amodal = ann.get("amodal_segmentation")
        grouped[ann["image_id"]].append(
            InstanceAnnotation(
                id=int(ann["id"]),
                class_id=int(ann["category_id"]),
                modal_mask=rle_decode(ann["segmentation"]),
                amodal_mask=rle_decode(amodal) if amodal else None,
                occlusion_rank=ann.get("occlusion_rank"),
                bbox=tuple(ann["bbox"]) if "bbox" in ann else None,
            )
        )
    out = []
    for image_id in sorted(scenes):
        scene = scenes[image_id]
        scene.instances = grouped[image_id]
        SceneAnnotation.__post_init__(scene)
        if with_images and scene.file_name:
            from PIL import Image

            with Image.open(path.parent / scene.file_name) as im:
                scene.image = np.asarray(im.convert("RGB"))
        out.append(scene)
    return out


def dataset_document(scenes: Sequence[SceneAnnotation]) -> dict:
    images, annotations = [], []
    for scene in scenes:
        images.append(
            {
                "id": scene.image_id,
                "width": scene.width,
                "height": scene.height,
                "file_name": scene.file_name or f"images/{scene.image_id:06d}.png",
            }
        )
        for inst in scene.instances:
            ann = {
                "id": inst.id,
                "image_id": scene.image_id,
                "category_id": inst.class_id,
                "bbox": list(inst.bbox),
                "segmentation": rle_encode(inst.modal_mask),
            }
            if inst.amodal_mask is not None:
                ann["amodal_segmentation"] = rle_encode(inst.amodal_mask)
            if inst.occlusion_rank is not None:
                ann["occlusion_rank"] = int(inst.occlusion_rank)
            annotations.append(ann)
    return {"images": images, "annotations": annotations}


# ----------------------------------------------------------------------------
# occluder derivation
# ----------------------------------------------------------------------------


def box_mask(box, shape) -> np.ndarray:
    x, y, w, h = (int(v) for v in box)
    m = np.zeros(shape, dtype=bool)
    m[max(y, 0) : y + h, max(x, 0) : x + w] = True
    return m


def _pair(target_id, occludee, occluder, roi_box, image_id) -> OcclusionPair:
    return OcclusionPair(
        target_id=target_id,
        occludee_mask=occludee,
        occludee_boundary=boundary_gt(occludee),
        occluder_mask=occluder,
        occluder_boundary=boundary_gt(occluder),
        roi_box=tuple(roi_box),
        image_id=image_id,
    )


def derive_pair_modal(scene: SceneAnnotation, target_id: int) -> OcclusionPair:
    """Occluder = union of every other instance whose mask touches the target's
    box, clipped to that box."""
    target = scene.get(target_id)
    roi = box_mask(target.bbox, target.modal_mask.shape)
    occluder = np.zeros_like(roi)
    for inst in scene.instances:
        if inst.id != target_id and np.any(inst.modal_mask & roi):
            occluder |= inst.modal_mask
    return _pair(target_id, target.modal_mask.copy(), occluder & roi, target.bbox, scene.image_id)


def derive_pair_amodal(scene: SceneAnnotation, target_id: int) -> OcclusionPair:
    """Occluder = union of amodal masks of nearer instances (strictly smaller
    rank) that overlap the target's amodal mask."""
    target = scene.get(target_id)
    for inst in scene.instances:
        if inst.occlusion_rank is None or inst.amodal_mask is None:
            raise ContractError(f"instance {inst.id} of image {scene.image_id} lacks an occlusion rank or amodal mask")
    occluder = np.zeros_like(target.amodal_mask)
    for inst in scene.instances:
        if inst.id == target_id or inst.occlusion_rank >= target.occlusion_rank:
            continue
        if np.any(inst.amodal_mask & target.amodal_mask):
            occluder |= inst.amodal_mask
    return _pair(target_id, target.amodal_mask.copy(), occluder, tight_bbox(target.amodal_mask), scene.image_id)


def has_amodal_order(scene: SceneAnnotation) -> bool:
    return all(i.occlusion_rank is not None and i.amodal_mask is not None for i in scene.instances)


def derive_pair(scene: SceneAnnotation, target_id: int, rule: str = "auto") -> OcclusionPair:
    if rule == "amodal" or (rule == "auto" and has_amodal_order(scene)):
        return derive_pair_amodal(scene, target_id)
    return derive_pair_modal(scene, target_id)


# ----------------------------------------------------------------------------
# occluded-subset split and balanced sampling
# ----------------------------------------------------------------------------


def box_overlap_ratio(a, b, mode: str = IOU) -> float:
    """Overlap of two ``(x, y, w, h)`` boxes: IoU, or intersection over the
    smaller area with ``mode="min"``.  Degenerate boxes give 0."""
    ax, ay, aw, ah = (float(v) for v in a)
    bx, by, bw, bh = (float(v) for v in b)
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        return 0.0
    iw = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    ih = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = iw * ih
    if mode == IOU:
        denom = aw * ah + bw * bh - inter
    elif mode == INTERSECTION_OVER_MIN:
        denom = min(aw * ah, bw * bh)
    else:
        raise DomainError(f"unknown overlap mode {mode!r}")
    return inter / denom


def max_pairwise_overlap(scene: SceneAnnotation, mode: str = IOU) -> float:
    best = 0.0
    boxes = [inst.bbox for inst in scene.instances]
    for i in range(len(boxes)):
        for j in range(i + 1, len(boxes)):
            best = max(best, box_overlap_ratio(boxes[i], boxes[j], mode))
    return best


def extract_occ_split(dataset: Sequence[SceneAnnotation], threshold: float = 0.2, mode: str = IOU) -> list[int]:
    return sorted(s.image_id for s in dataset if max_pairwise_overlap(s, mode) >= threshold)


def balance_sample(pairs: Sequence[OcclusionPair], rng: np.random.Generator, target_fraction: float = 0.5) -> list:
    """Drop random non-occluded pairs until occluded ones make up at least
    ``target_fraction``.  Occluded pairs always survive; input order is kept."""
    occluded = [i for i, p in enumerate(pairs) if p.occluded]
    clear = [i for i, p in enumerate(pairs) if not p.occluded]
    n_occ = len(occluded)
    if not clear or n_occ >= target_fraction * len(pairs):
        return list(pairs)
    if target_fraction <= 0:
        return list(pairs)
    keep_n = math.floor(n_occ * (1.0 - target_fraction) / target_fraction + 1e-9)
    keep_n = min(keep_n, len(clear))
    kept = set(rng.choice(np.asarray(clear), size=keep_n, replace=False).tolist()) if keep_n else set()
    return [p for i, p in enumerate(pairs) if p.occluded or i in kept]


# ----------------------------------------------------------------------------
# resampling
# ----------------------------------------------------------------------------


def _bilinear_axis(start: float, length: float, out: int, size: int):
    src = start + (np.arange(out) + 0.5) * (length / out) - 0.5
    src = np.clip(src, 0.0, size - 1)
    i0 = np.floor(src).astype(np.int64)
    i1 = np.minimum(i0 + 1, size - 1)
    return i0, i1, src - i0


def roi_crop(grid, box, out_size=14) -> np.ndarray:
    """Bilinear crop-and-resize of the box region of an ``H x W [x C]`` grid."""
    g = np.asarray(grid, dtype=np.float64)
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DomainError(f"cannot crop an empty box {tuple(box)}")
    oh, ow = (out_size, out_size) if np.isscalar(out_size) else out_size
    r0, r1, fr = _bilinear_axis(y, h, oh, g.shape[0])
    c0, c1, fc = _bilinear_axis(x, w, ow, g.shape[1])
    fr = fr.reshape((-1, 1) + (1,) * (g.ndim - 2))
    fc = fc.reshape((1, -1) + (1,) * (g.ndim - 2))
    top = g[r0][:, c0] * (1 - fc) + g[r0][:, c1] * fc
    bottom = g[r1][:, c0] * (1 - fc) + g[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def _area_weights(start: float, length: float, out: int, size: int) -> np.ndarray:
    edges = start + np.arange(out + 1) * (length / out)
    lo = np.maximum(edges[:-1, None], np.arange(size)[None, :])
    hi = np.minimum(edges[1:, None], np.arange(size)[None, :] + 1)
    return np.clip(hi - lo, 0.0, None) / (length / out)


def resize_mask_area(mask, box, out_size: int) -> np.ndarray:
    """Fraction of each output cell covered by the mask, binarised at 0.5."""
    m = np.asarray(mask, dtype=np.float64)
    x, y, w, h = (float(v) for v in box)
    if w <= 0 or h <= 0:
        raise DomainError(f"cannot resample an empty box {tuple(box)}")
    ry = _area_weights(y, h, out_size, m.shape[0])
    rx = _area_weights(x, w, out_size, m.shape[1])
    return (ry @ m @ rx.T >= 0.5 - 1e-12).astype(np.uint8)


def paste_mask(prob, box, shape) -> np.ndarray:
    """Resample a box-aligned probability map back onto the image grid."""
    p = np.asarray(prob, dtype=np.float64)
    x, y, w, h = (float(v) for v in box)
    out = np.zeros(shape)
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    x1, y1 = int(np.ceil(x + w)), int(np.ceil(y + h))
    x0, y0, x1, y1 = max(x0, 0), max(y0, 0), min(x1, shape[1]), min(y1, shape[0])
    if x1 <= x0 or y1 <= y0:
        return out
    ph, pw = p.shape
    # pixel centres of the destination expressed in source-cell coordinates
    sy = (np.arange(y0, y1) + 0.5 - y) * (ph / h) - 0.5
    sx = (np.arange(x0, x1) + 0.5 - x) * (pw / w) - 0.5
    sy = np.clip(sy, 0, ph - 1)
    sx = np.clip(sx, 0, pw - 1)
    r0 = np.floor(sy).astype(int)
    c0 = np.floor(sx).astype(int)
    r1 = np.minimum(r0 + 1, ph - 1)
    c1 = np.minimum(c0 + 1, pw - 1)
    fr = (sy - r0)[:, None]
    fc = (sx - c0)[None, :]
    top = p[r0][:, c0] * (1 - fc) + p[r0][:, c1] * fc
    bottom = p[r1][:, c0] * (1 - fc) + p[r1][:, c1] * fc
    out[y0:y1, x0:x1] = top * (1 - fr) + bottom * fr
    return out
