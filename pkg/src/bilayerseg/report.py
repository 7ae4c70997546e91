"""Figures and probability-map dumps."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from . import tensor as T  # noqa: E402
from .annotations import paste_mask  # noqa: E402
from .io_utils import atomic_write_bytes, write_png  # noqa: E402

# PNG metadata would otherwise embed the matplotlib version
_PNG_META = {"Software": None}


def _save(fig, path) -> None:
    import io

    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata=_PNG_META)
    plt.close(fig)
    atomic_write_bytes(path, buf.getvalue())


def plot_loss_curves(curves: dict, path) -> None:
    """Total loss per iteration for each labelled curve."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for label, rows in curves.items():
        if not rows:
            continue
        arr = np.asarray(rows, dtype=np.float64)
        ax.plot(arr[:, 0], arr[:, 1], lw=0.8, label=label)
    ax.set_xlabel("iteration")
    ax.set_ylabel("total loss")
    if curves:
        ax.legend(fontsize=6)
    fig.tight_layout()
    _save(fig, path)


def plot_comparison(comparison, path) -> None:
    """Bar chart of mean occludee IoU per variant with seed standard deviation."""
    rows = [r.summary() for r in comparison.rows]
    names = [r["variant"] for r in rows]
    means = [100 * r["mean_iou"]["mean"] for r in rows]
    sds = [100 * r["mean_iou"]["sd"] for r in rows]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.bar(np.arange(len(names)), means, yerr=sds, capsize=4, color="#5b8db8")
    ax.set_xticks(np.arange(len(names)))
    ax.set_xticklabels(names, rotation=20, fontsize=8)
    ax.set_ylabel("occludee mask IoU (%)")
    if means:
        lo = min(m - s for m, s in zip(means, sds))
        ax.set_ylim(max(0.0, lo - 5.0), min(100.0, max(means) + 5.0))
    fig.tight_layout()
    _save(fig, path)


def _gray(prob) -> np.ndarray:
    return np.clip(np.rint(np.asarray(prob) * 255.0), 0, 255).astype(np.uint8)


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def head_heatmaps(model, scene, roi_size: int = 14):
    """Per instance: occluder and occludee probabilities pasted on the image grid."""
    from .bench import roi_input

    x = np.stack([roi_input(scene.image, inst.bbox, roi_size) for inst in scene.instances])
    with T.no_grad():
        out = model(x)
    shape = (scene.height, scene.width)
    maps = []
    for k, inst in enumerate(scene.instances):
        ee = paste_mask(_sigmoid(out.occludee_mask_logits.data[k, 0]), inst.bbox, shape)
        occ = None
        if out.occluder_mask_logits is not None:
            occ = paste_mask(_sigmoid(out.occluder_mask_logits.data[k, 0]), inst.bbox, shape)
        maps.append((f"instance{inst.id}", occ, ee))
    return maps


def query_heatmaps(model, scene, grid_size: int = 16, top: int = 6):
    """Per query of the highest-scoring ``top``: occluder and occludee maps."""
    from .transformer import image_grid

    with T.no_grad():
        occ, ee = model(image_grid(scene.image, grid_size))
    cls = ee.class_logits.data
    cls = np.exp(cls - cls.max(axis=-1, keepdims=True))
    cls /= cls.sum(axis=-1, keepdims=True)
    order = np.argsort(-cls[:, :-1].max(axis=-1), kind="stable")[:top]
    full = (0, 0, scene.width, scene.height)
    shape = (scene.height, scene.width)
    maps = []
    for q in order:
        e = paste_mask(_sigmoid(ee.mask_logits.data[q]), full, shape)
        o = paste_mask(_sigmoid(occ.mask_logits.data[q]), full, shape) if occ is not None else None
        maps.append((f"query{int(q):03d}", o, e))
    return maps


def dump_heatmaps(model, cfg, scene, out: Path) -> list:
    """Write 8-bit probability PNGs per instance/query and one overview figure."""
    from .transformer import TRANSFORMER_VARIANTS

    if cfg.variant in TRANSFORMER_VARIANTS:
        maps = query_heatmaps(model, scene, cfg.grid_size)
    else:
        maps = head_heatmaps(model, scene, cfg.roi_size)
    written = []
    for label, occ, ee in maps:
        if occ is not None:
            path = out / f"{scene.image_id:06d}_{label}_occluder.png"
            write_png(path, _gray(occ))
            written.append(path)
        path = out / f"{scene.image_id:06d}_{label}_occludee.png"
        write_png(path, _gray(ee))
        written.append(path)

    rows = max(len(maps), 1)
    fig, axes = plt.subplots(rows, 3, figsize=(6, 2 * rows), squeeze=False)
    for r, (label, occ, ee) in enumerate(maps):
        axes[r, 0].imshow(scene.image)
        axes[r, 0].set_title(label, fontsize=7)
        for c, (m, title) in enumerate(((occ, "occluder"), (ee, "occludee")), start=1):
            if m is not None:
                axes[r, c].imshow(m, cmap="jet", vmin=0.0, vmax=1.0)
            axes[r, c].set_title(title, fontsize=7)
    for ax in axes.ravel():
        ax.axis("off")
    fig.tight_layout()
    path = out / f"{scene.image_id:06d}_heatmaps.png"
    _save(fig, path)
    written.append(path)
    return written
