"""Synthetic overlapping-shapes scenes with exact amodal ground truth.

Shapes are painted back to front; the painting order gives the occlusion
rank (0 = frontmost).  Each scene is built around one back/front pair whose
overlap hides 20-50% of the back shape, plus up to two extra shapes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .annotations import InstanceAnnotation, SceneAnnotation
from .errors import GenerationError

CLASSES = ("ellipse", "rectangle", "triangle")


@dataclass
class ShapeConfig:
    size: int = 64
    min_objects: int = 2
    max_objects: int = 4
    min_extent: float = 7.0  # half-size range of a shape, in pixels
    max_extent: float = 15.0
    overlap_range: tuple = (0.2, 0.5)
    max_hidden: float = 0.7  # no shape may lose more than this share
    min_visible: int = 24
    noise: float = 6.0
    max_retries: int = 200


def _rasterize(kind: str, cx, cy, rx, ry, angle, size: int, tri=None) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    dx, dy = xs - cx, ys - cy
    c, s = np.cos(angle), np.sin(angle)
    u = c * dx + s * dy
    v = -s * dx + c * dy
    if kind == "ellipse":
        return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0
    if kind == "rectangle":
        return (np.abs(u) <= rx) & (np.abs(v) <= ry)
    # triangle: vertices at the given angles on the ellipse (rx, ry)
    px = rx * np.cos(tri)
    py = ry * np.sin(tri)
    inside = np.ones_like(u, dtype=bool)
    sign = None
    for k in range(3):
        x0, y0, x1, y1 = px[k], py[k], px[(k + 1) % 3], py[(k + 1) % 3]
        cross = (x1 - x0) * (v - y0) - (y1 - y0) * (u - x0)
        if sign is None:
            sign = np.sign((x1 - x0) * (py[(k + 2) % 3] - y0) - (y1 - y0) * (px[(k + 2) % 3] - x0))
        inside &= cross * sign >= 0
    return inside


def random_shape(rng: np.random.Generator, cfg: ShapeConfig, center=None):
    cls = int(rng.integers(len(CLASSES)))
    if center is None:
        margin = cfg.min_extent
        center = rng.uniform(margin, cfg.size - margin, size=2)
    rx, ry = rng.uniform(cfg.min_extent, cfg.max_extent, size=2)
    angle = rng.uniform(0.0, np.pi)
    tri = None
    if CLASSES[cls] == "triangle":
        # jittered equilateral vertex angles keep triangles reasonably fat
        tri = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0]) + rng.uniform(-0.4, 0.4, size=3) + angle
    mask = _rasterize(CLASSES[cls], center[0], center[1], rx, ry, angle, cfg.size, tri)
    return cls, mask


def _distinct_color(rng, used, min_dist=90.0):
    for _ in range(100):
        col = rng.integers(0, 256, size=3)
        if all(np.abs(col - u).sum() >= min_dist for u in used):
            return col
    return col


def _paint(rng, masks, cfg: ShapeConfig, size: int) -> np.ndarray:
    bg = rng.integers(0, 256, size=3)
    img = np.empty((size, size, 3), dtype=np.float64)
    img[...] = bg
    used = [bg]
    for m in masks:
        col = _distinct_color(rng, used)
        used.append(col)
        img[m] = col
    img += rng.normal(0.0, cfg.noise, size=img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def _scene_from(image_id, masks, classes, image) -> SceneAnnotation:
    n = len(masks)
    instances = []
    for i, (m, c) in enumerate(zip(masks, classes)):
        front = np.zeros_like(m)
        for j in range(i + 1, n):
            front |= masks[j]
        instances.append(
            InstanceAnnotation(
                id=i + 1,
                class_id=c,
                modal_mask=m & ~front,
                amodal_mask=m.copy(),
                occlusion_rank=n - 1 - i,
            )
        )
    h, w = image.shape[:2]
    return SceneAnnotation(image_id, w, h, instances, file_name=f"{image_id:06d}.png", image=image)


def _try_scene(rng, cfg: ShapeConfig):
    lo, hi = cfg.overlap_range
    n = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    back_cls, back = random_shape(rng, cfg)
    if back.sum() < 4 * cfg.min_visible:
        return None
    ys, xs = np.nonzero(back)
    anchor = np.array([xs.mean(), ys.mean()])
    offset = rng.normal(0.0, 1.0, size=2)
    offset *= rng.uniform(0.6, 1.4) * cfg.max_extent / max(np.linalg.norm(offset), 1e-9)
    front_cls, front = random_shape(rng, cfg, center=np.clip(anchor + offset, 0, cfg.size))
    frac = (back & front).sum() / back.sum()
    if not lo <= frac <= hi:
        return None
    masks, classes = [back, front], [back_cls, front_cls]
    for _ in range(n - 2):
        c, m = random_shape(rng, cfg)
        masks.append(m)
        classes.append(c)
    # the seeded back shape is painted first; the rest follow in random order
    order = [0] + [int(k) + 1 for k in rng.permutation(n - 1)]
    masks = [masks[k] for k in order]
    classes = [classes[k] for k in order]
    covered = np.zeros_like(back)
    for i in range(n - 1, -1, -1):
        visible = masks[i] & ~covered
        area = masks[i].sum()
        if visible.sum() < cfg.min_visible or 1.0 - visible.sum() / area > cfg.max_hidden:
            return None
        covered |= masks[i]
    return masks, classes


def gen_scene(rng: np.random.Generator, image_id: int = 0, cfg: ShapeConfig | None = None) -> SceneAnnotation:
    cfg = cfg or ShapeConfig()
    for _ in range(cfg.max_retries):
        got = _try_scene(rng, cfg)
        if got is not None:
            masks, classes = got
            return _scene_from(image_id, masks, classes, _paint(rng, masks, cfg, cfg.size))
    raise GenerationError(f"could not place an overlapping shape pair after {cfg.max_retries} attempts")


def gen_shapes(rng: np.random.Generator, n_scenes: int, cfg: ShapeConfig | None = None, first_id: int = 0) -> list[SceneAnnotation]:
    return [gen_scene(rng, first_id + i, cfg) for i in range(n_scenes)]


def gen_shapes_seeded(seed: int, n_scenes: int, cfg: ShapeConfig | None = None, first_id: int = 0) -> list[SceneAnnotation]:
    """Scene ``i`` uses its own generator seeded by ``(seed, first_id + i)``."""
    return [gen_scene(np.random.default_rng([seed, first_id + i]), first_id + i, cfg) for i in range(n_scenes)]


def gen_isolated(rng: np.random.Generator, n_scenes: int, size: int = 128, per_scene: int = 2, max_retries: int = 200) -> list[SceneAnnotation]:
    """Scenes of large shapes with disjoint boxes, a source for the object bank."""
    cfg = ShapeConfig(size=size, min_extent=size * 0.2, max_extent=size * 0.28)
    scenes = []
    for image_id in range(n_scenes):
        for _ in range(max_retries):
            masks, classes = [], []
            taken = np.zeros((size, size), dtype=bool)
            for _k in range(per_scene):
                c, m = random_shape(rng, cfg)
                ys, xs = np.nonzero(m)
                if not ys.size:
                    break
                box = np.zeros_like(taken)
                box[ys.min() : ys.max() + 1, xs.min() : xs.max() + 1] = True
                if np.any(box & taken) or m[0].any() or m[-1].any() or m[:, 0].any() or m[:, -1].any():
                    continue
                taken |= box
                masks.append(m)
                classes.append(c)
            if len(masks) == per_scene:
                break
        else:
            raise GenerationError(f"could not place {per_scene} disjoint shapes after {max_retries} attempts")
        scenes.append(_scene_from(image_id, masks, classes, _paint(rng, masks, cfg, size)))
    return scenes
