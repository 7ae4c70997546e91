"""Synthetic occlusion generation.

A bank of complete (non-occluded, large) object cut-outs is collected from an
annotated dataset.  Each synthetic sample pastes one cut-out (the occluder)
onto the source image of another (the occludee) at a grid-searched position
where the occluder hides between 20% and 50% of the occludee.  Both objects
keep their complete masks as amodal ground truth.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy import signal

from .annotations import (
    IOU,
    InstanceAnnotation,
    SceneAnnotation,
    box_overlap_ratio,
    dataset_document,
)
from .errors import ContractError, DomainError, FeasibilityError, GenerationError
from .io_utils import atomic_write_json, write_png
from .mask_head import boundary_gt

MIN_AREA = 32 * 32
MAX_BOX_OVERLAP = 0.05
OVERLAP_RANGE = (0.2, 0.5)


@dataclass
class ObjectCut:
    class_id: int
    patch: np.ndarray  # h x w x 3, the object's box region
    mask: np.ndarray  # h x w complete mask inside the box
    contour: np.ndarray
    image: np.ndarray  # full source image
    full_mask: np.ndarray  # mask on the full source grid
    image_id: int = -1
    instance_id: int = -1
    bbox: tuple = (0, 0, 0, 0)


@dataclass
class SyntheticSample:
    image: np.ndarray
    occludee: InstanceAnnotation
    occluder: InstanceAnnotation
    occludee_contour: np.ndarray
    occluder_contour: np.ndarray
    placement: tuple
    overlap_rate: float
    occludee_source: tuple = (-1, -1)
    occluder_source: tuple = (-1, -1)

    def scene(self, image_id: int = 0) -> SceneAnnotation:
        h, w = self.image.shape[:2]
        return SceneAnnotation(image_id, w, h, [self.occludee, self.occluder], image=self.image)


def build_cob(
    dataset: Sequence[SceneAnnotation],
    min_area: int = MIN_AREA,
    max_overlap: float = MAX_BOX_OVERLAP,
    mode: str = IOU,
) -> list[ObjectCut]:
    """Collect instances with mask area >= ``min_area`` whose box overlaps no
    other box in its scene by more than ``max_overlap``."""
    bank = []
    for scene in dataset:
        if scene.image is None:
            raise ContractError(f"image {scene.image_id} has no pixel data; load the dataset with images")
        for inst in scene.instances:
            if int(inst.modal_mask.sum()) < min_area:
                continue
            if any(
                box_overlap_ratio(inst.bbox, other.bbox, mode) > max_overlap
                for other in scene.instances
                if other.id != inst.id
            ):
                continue
            x, y, w, h = inst.bbox
            full = inst.amodal_mask if inst.amodal_mask is not None else inst.modal_mask
            mask = full[y : y + h, x : x + w].copy()
            bank.append(
                ObjectCut(
                    class_id=inst.class_id,
                    patch=scene.image[y : y + h, x : x + w].copy(),
                    mask=mask,
                    contour=boundary_gt(mask),
                    image=scene.image,
                    full_mask=full.copy(),
                    image_id=scene.image_id,
                    instance_id=inst.id,
                    bbox=inst.bbox,
                )
            )
    return bank


def sample_pair(cob: Sequence[ObjectCut], rng: np.random.Generator):
    """Draw ``(occluder, occludee)``: a uniform class, then a uniform instance
    of that class, independently per role."""
    if not cob:
        raise ContractError("complete object bank is empty")
    by_class: dict[int, list[int]] = {}
    for i, cut in enumerate(cob):
        by_class.setdefault(cut.class_id, []).append(i)
    classes = sorted(by_class)

    def draw():
        members = by_class[classes[rng.integers(len(classes))]]
        return cob[members[rng.integers(len(members))]]

    occluder = draw()
    occludee = draw()
    return occluder, occludee


def overlap_rate(occluder_mask, occludee_mask, denominator: str = "occludee") -> float:
    """Share of the occludee hidden by the occluder (both on the same grid)."""
    a = np.asarray(occluder_mask, dtype=bool)
    b = np.asarray(occludee_mask, dtype=bool)
    inter = int(np.count_nonzero(a & b))
    if denominator == "occludee":
        area = int(np.count_nonzero(b))
    elif denominator == "union":
        area = int(np.count_nonzero(a | b))
    else:
        raise DomainError(f"unknown overlap denominator {denominator!r}")
    if area == 0:
        raise DomainError("overlap rate is undefined for an empty occludee mask")
    return inter / area


def placed_mask(cut: ObjectCut, placement, shape) -> np.ndarray:
    x, y = placement
    h, w = cut.mask.shape
    out = np.zeros(shape, dtype=bool)
    out[y : y + h, x : x + w] = cut.mask
    return out


def feasible_placements(occluder: ObjectCut, occludee: ObjectCut, stride: int = 4, bounds=OVERLAP_RANGE) -> list:
    """Every stride-aligned top-left ``(x, y)`` whose overlap rate lies in ``bounds``."""
    H, W = occludee.full_mask.shape
    h, w = occluder.mask.shape
    if h > H or w > W:
        return []
    target = occludee.full_mask.astype(np.float64)
    area = int(occludee.full_mask.sum())
    if area == 0:
        raise DomainError("occludee has an empty mask")
    counts = np.rint(signal.correlate(target, occluder.mask.astype(np.float64), mode="valid", method="fft"))
    counts = counts[::stride, ::stride].astype(np.int64)
    rates = counts / area
    lo, hi = bounds
    ys, xs = np.nonzero((rates >= lo) & (rates <= hi))
    return [(int(x) * stride, int(y) * stride) for y, x in zip(ys, xs)]


def grid_search_place(occluder: ObjectCut, occludee: ObjectCut, rng: np.random.Generator, stride: int = 4, bounds=OVERLAP_RANGE):
    cands = feasible_placements(occluder, occludee, stride, bounds)
    if not cands:
        raise FeasibilityError("no grid position satisfies the overlap-rate constraint")
    return cands[rng.integers(len(cands))]


def compose(occludee: ObjectCut, occluder: ObjectCut, placement) -> SyntheticSample:
    """Hard-paste the occluder onto the occludee's source image."""
    shape = occludee.full_mask.shape
    occ_full = placed_mask(occluder, placement, shape)
    image = occludee.image.copy()
    x, y = placement
    h, w = occluder.mask.shape
    region = image[y : y + h, x : x + w]
    region[occluder.mask] = occluder.patch[occluder.mask]
    amodal = occludee.full_mask.copy()
    modal = amodal & ~occ_full
    target = InstanceAnnotation(id=1, class_id=occludee.class_id, modal_mask=modal, amodal_mask=amodal, occlusion_rank=1)
    front = InstanceAnnotation(id=2, class_id=occluder.class_id, modal_mask=occ_full, amodal_mask=occ_full.copy(), occlusion_rank=0)
    return SyntheticSample(
        image=image,
        occludee=target,
        occluder=front,
        occludee_contour=boundary_gt(amodal),
        occluder_contour=boundary_gt(occ_full),
        placement=(int(x), int(y)),
        overlap_rate=overlap_rate(occ_full, amodal),
        occludee_source=(occludee.image_id, occludee.instance_id),
        occluder_source=(occluder.image_id, occluder.instance_id),
    )


def synthesize_one(cob, rng: np.random.Generator, stride: int = 4, max_tries: int = 50) -> SyntheticSample:
    for _ in range(max_tries):
        occluder, occludee = sample_pair(cob, rng)
        try:
            placement = grid_search_place(occluder, occludee, rng, stride)
        except FeasibilityError:
            continue
        return compose(occludee, occluder, placement)
    raise GenerationError(f"no feasible occluder placement after {max_tries} pair draws")


def synthesize(cob, n: int, seed: int = 0, stride: int = 4, max_tries: int = 50) -> list[SyntheticSample]:
    """``n`` samples; sample ``i`` draws from its own generator seeded by ``(seed, i)``."""
    return [synthesize_one(cob, np.random.default_rng([seed, i]), stride, max_tries) for i in range(n)]


def write_sod(samples: Sequence[SyntheticSample], out_dir, seed: int, stride: int, source: Optional[str] = None) -> dict:
    out = Path(out_dir)
    records = []
    scenes = []
    for i, s in enumerate(samples):
        stem = f"{i:06d}"
        write_png(out / "images" / f"{stem}.png", s.image)
        for role, inst in (("occluder", s.occluder), ("occludee", s.occludee)):
            write_png(out / "masks" / f"{stem}_{role}_modal.png", inst.modal_mask)
            write_png(out / "masks" / f"{stem}_{role}_amodal.png", inst.amodal_mask)
        records.append(
            {
                "index": i,
                "image": f"images/{stem}.png",
                "placement": list(s.placement),
                "overlap_rate": s.overlap_rate,
                "occluder_class": s.occluder.class_id,
                "occludee_class": s.occludee.class_id,
                "occluder_source": list(s.occluder_source),
                "occludee_source": list(s.occludee_source),
            }
        )
        scene = s.scene(image_id=i)
        scene.file_name = f"images/{stem}.png"
        scenes.append(scene)
    manifest = {"seed": seed, "stride": stride, "count": len(samples), "source": source, "samples": records}
    atomic_write_json(out / "annotations.json", dataset_document(scenes))
    atomic_write_json(out / "manifest.json", manifest)
    return manifest
