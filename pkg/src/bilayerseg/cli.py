"""Command-line entry point.

Exit codes: 0 success, 1 validation or contract error (``ERROR <code>: ...``
on stderr, or usage for a bad invocation), 2 I/O failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import BilayerError, ConfigurationError

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2
HEAD_VARIANT_CHOICES = ("single-fcn", "single-gcn", "bilayer-fcn", "bilayer-gcn", "transformer-single", "transformer-bilayer")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def _write_dataset(out: Path, scenes, extra: dict | None = None) -> None:
    from .annotations import dataset_document
    from .io_utils import atomic_write_json, write_png

    for s in scenes:
        s.file_name = f"images/{s.image_id:06d}.png"
        write_png(out / s.file_name, s.image)
    doc = dataset_document(scenes)
    if extra:
        doc.update(extra)
    atomic_write_json(out / "annotations.json", doc)


def _load_scenes(path, with_images=True):
    from .annotations import load_dataset

    p = Path(path)
    if p.is_dir():
        p = p / "annotations.json"
    return load_dataset(p, with_images=with_images)


def _shape_scenes(args, n, first_id):
    from .shapes import ShapeConfig, gen_shapes_seeded

    return gen_shapes_seeded(args.data_seed, n, ShapeConfig(size=args.size), first_id=first_id)


def _train_config(args):
    from .bench import TrainConfig

    return TrainConfig(
        variant=args.variant,
        iterations=args.iterations,
        batch_size=args.batch_size,
        lr=args.lr,
        momentum=args.momentum,
        warmup_iters=min(args.warmup_iters, args.iterations),
        warmup_factor=args.warmup_factor,
        seed=args.seed,
        occluded_fraction=args.occluded_fraction,
        channels=args.channels,
        queries=args.queries,
        decoder_layers=args.decoder_layers,
        heads=args.heads,
    )


def _load_checkpoint(path):
    from .bench import TrainConfig, build_model
    from .mask_head import load_into, read_checkpoint

    path = Path(path)
    sidecar = path.with_suffix(".json")
    meta = json.loads(sidecar.read_text())
    cfg = TrainConfig.from_dict(meta["config"])
    model = build_model(cfg)
    load_into(model, read_checkpoint(path.read_bytes()))
    return model, cfg


# ----------------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradchecks
    from .io_utils import atomic_write_json

    results = run_gradchecks(trials=args.trials, seed=args.seed, eps=args.eps)
    ok = True
    width = max(len(n) for n in results)
    for name, err in results.items():
        passed = err <= args.tolerance
        ok &= passed
        print(f"{name.ljust(width)}  {err:.3e}  {'ok' if passed else 'FAIL'}")
    if args.out:
        atomic_write_json(args.out, {"tolerance": args.tolerance, "trials": args.trials, "seed": args.seed, "max_rel_error": results})
    return EXIT_OK if ok else EXIT_INVALID


def cmd_sod_synth(args) -> int:
    from .shapes import gen_isolated
    from .sod import build_cob, synthesize, write_sod

    if args.source:
        source = _load_scenes(args.source)
        label = str(args.source)
    else:
        source = gen_isolated(np.random.default_rng(args.seed), args.source_scenes, size=args.source_size)
        label = f"isolated-shapes:{args.source_scenes}"
    cob = build_cob(source, min_area=args.min_area, max_overlap=args.max_overlap)
    samples = synthesize(cob, args.count, seed=args.seed, stride=args.stride, max_tries=args.max_tries)
    manifest = write_sod(samples, args.out, seed=args.seed, stride=args.stride, source=label)
    rates = [s["overlap_rate"] for s in manifest["samples"]]
    print(f"bank {len(cob)} objects; wrote {len(samples)} samples to {args.out}")
    if rates:
        print(f"overlap rate min {min(rates):.4f} max {max(rates):.4f}")
    return EXIT_OK


def cmd_derive_occ(args) -> int:
    from .annotations import derive_pair, rle_encode
    from .io_utils import atomic_write_json

    scenes = _load_scenes(args.annotations, with_images=False)
    pairs = []
    for s in scenes:
        for inst in s.instances:
            p = derive_pair(s, inst.id, args.rule)
            pairs.append(
                {
                    "image_id": s.image_id,
                    "target_id": inst.id,
                    "roi_box": [int(v) for v in p.roi_box],
                    "occluded": p.occluded,
                    "occludee": rle_encode(p.occludee_mask),
                    "occludee_boundary": rle_encode(p.occludee_boundary),
                    "occluder": rle_encode(p.occluder_mask),
                    "occluder_boundary": rle_encode(p.occluder_boundary),
                }
            )
    atomic_write_json(args.out, {"rule": args.rule, "pairs": pairs})
    n_occ = sum(p["occluded"] for p in pairs)
    print(f"{len(pairs)} pairs ({n_occ} occluded) -> {args.out}")
    return EXIT_OK


def cmd_split_occ(args) -> int:
    from .annotations import extract_occ_split
    from .io_utils import atomic_write_json

    scenes = _load_scenes(args.annotations, with_images=False)
    ids = extract_occ_split(scenes, args.threshold, args.mode)
    atomic_write_json(args.out, {"threshold": args.threshold, "mode": args.mode, "image_ids": ids})
    print(f"{len(ids)} of {len(scenes)} images at overlap >= {args.threshold} -> {args.out}")
    return EXIT_OK


def cmd_gen_shapes(args) -> int:
    from .shapes import ShapeConfig, gen_shapes_seeded

    scenes = gen_shapes_seeded(args.seed, args.count, ShapeConfig(size=args.size), first_id=args.first_id)
    _write_dataset(Path(args.out), scenes, {"generator": {"seed": args.seed, "count": args.count, "size": args.size}})
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .bench import train
    from .io_utils import atomic_write_bytes, atomic_write_json, atomic_write_text
    from .mask_head import checkpoint_bytes, count_params
    from .report import plot_loss_curves

    cfg = _train_config(args)
    scenes = _load_scenes(args.data) if args.data else _shape_scenes(args, args.train_count, 0)
    result = train(scenes, cfg, log_every=args.log_every, log=print)
    out = Path(args.out)
    named = result.model.named_parameters()
    atomic_write_bytes(out / "checkpoint.bin", checkpoint_bytes(named))
    atomic_write_json(
        out / "checkpoint.json",
        {"version": __version__, "config": cfg.to_dict(), "params": count_params(result.model), "tensors": [n for n, _ in named]},
    )
    atomic_write_text(out / "loss.csv", result.curve_csv())
    plot_loss_curves({cfg.variant: result.curve}, out / "loss.png")
    print(f"final loss {result.curve[-1][1]:.6f}" if result.curve else "no iterations run")
    return EXIT_OK


def cmd_eval(args) -> int:
    from .bench import evaluate
    from .io_utils import atomic_write_json

    model, cfg = _load_checkpoint(args.checkpoint)
    scenes = _load_scenes(args.data) if args.data else _shape_scenes(args, args.test_count, args.test_first_id)
    report = evaluate(model, scenes, cfg, max_dets=args.max_dets)
    atomic_write_json(args.out, report.to_dict())
    occ = "-" if report.occluder_iou is None else f"{report.occluder_iou:.4f}"
    print(f"occludee IoU {report.mean_iou:.4f}  AP {report.ap:.4f}  AP50 {report.ap50:.4f}  occluder IoU {occ}")
    print(f"evaluated {report.n_instances} instances in {report.wall_clock:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_compare(args) -> int:
    from .bench import compare_variants, comparison_json
    from .io_utils import atomic_write_text
    from .report import plot_comparison, plot_loss_curves

    base = _train_config(argparse.Namespace(**{**vars(args), "variant": args.variants[0]}))
    train_scenes = _shape_scenes(args, args.train_count, 0)
    test_scenes = _shape_scenes(args, args.test_count, args.train_count)
    result = compare_variants(args.variants, args.seeds, train_scenes, test_scenes, base, jobs=args.jobs, log=lambda m: print(m, file=sys.stderr))
    out = Path(args.out)
    extra = {
        "train_scenes": args.train_count,
        "test_scenes": args.test_count,
        "data_seed": args.data_seed,
        "config": {k: v for k, v in base.to_dict().items() if k not in ("variant", "seed")},
    }
    atomic_write_text(out / "comparison.json", comparison_json(result, extra))
    table = result.table()
    atomic_write_text(out / "comparison.txt", table)
    plot_comparison(result, out / "comparison.png")
    plot_loss_curves({f"{v} seed {s}": c for (v, s), c in result.curves.items()}, out / "loss_curves.png")
    print(table, end="")
    print(f"total {result.wall_clock:.1f}s", file=sys.stderr)
    return EXIT_OK


def cmd_dump_heatmaps(args) -> int:
    from .report import dump_heatmaps

    model, cfg = _load_checkpoint(args.checkpoint)
    scenes = _load_scenes(args.data) if args.data else _shape_scenes(args, 1, args.image_id)
    scene = next((s for s in scenes if s.image_id == args.image_id), None)
    if scene is None:
        raise ConfigurationError(f"no scene with image id {args.image_id}")
    written = dump_heatmaps(model, cfg, scene, Path(args.out))
    print(f"wrote {len(written)} files to {args.out}")
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------------


def _add_train_flags(p, variant=True):
    if variant:
        p.add_argument("--variant", default="bilayer-gcn", choices=HEAD_VARIANT_CHOICES, help="head variant")
    p.add_argument("--iterations", type=int, default=2000, help="SGD iterations")
    p.add_argument("--batch-size", type=int, default=16, help="ROIs (or images) per iteration")
    p.add_argument("--lr", type=float, default=0.01, help="base learning rate")
    p.add_argument("--momentum", type=float, default=0.9, help="SGD momentum")
    p.add_argument("--warmup-iters", type=int, default=100, help="iterations at the warm-up learning rate")
    p.add_argument("--warmup-factor", type=float, default=0.1, help="warm-up learning rate as a fraction of --lr")
    p.add_argument("--occluded-fraction", type=float, default=0.5, help="minimum share of occluded ROIs after balancing")
    p.add_argument("--channels", type=int, default=32, help="feature channels K (query dim D for transformer variants)")
    p.add_argument("--queries", type=int, default=20, help="queries per side (transformer variants)")
    p.add_argument("--decoder-layers", type=int, default=3, help="layers per decoder (transformer variants)")
    p.add_argument("--heads", type=int, default=1, help="attention heads (transformer variants)")


def _add_data_flags(p, train=True, test=True):
    p.add_argument("--data-seed", type=int, default=0, help="seed of the generated shapes scenes")
    p.add_argument("--size", type=int, default=64, help="generated image side")
    if train:
        p.add_argument("--train-count", type=int, default=500, help="generated training scenes")
    if test:
        p.add_argument("--test-count", type=int, default=100, help="generated held-out scenes")
        p.add_argument("--test-first-id", type=int, default=500, help="image id of the first held-out scene")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="bilayerseg", description="Bilayer occluder/occludee segmentation toolkit.", formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--config", default=None, help="JSON file of flag values; explicit flags win")
        p.add_argument("--seed", type=int, default=0, help="random seed")
        p.add_argument("--jobs", type=int, default=1, help="maximum worker processes")
        return p

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of every operator and both composite losses")
    p.add_argument("--trials", type=int, default=20, help="random instances per case")
    p.add_argument("--eps", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tolerance", type=float, default=1e-4, help="maximum relative error")
    p.add_argument("--out", default=None, help="optional JSON report")

    p = add("sod-synth", cmd_sod_synth, "synthesize occlusion composites from a complete object bank")
    p.add_argument("--source", default=None, help="dataset (annotations.json or its directory); default: generated isolated shapes")
    p.add_argument("--source-scenes", type=int, default=40, help="generated source scenes when --source is absent")
    p.add_argument("--source-size", type=int, default=128, help="generated source image side")
    p.add_argument("--count", type=int, default=100, help="samples to synthesize")
    p.add_argument("--stride", type=int, default=4, help="placement grid stride in pixels")
    p.add_argument("--min-area", type=int, default=1024, help="minimum object area for the bank")
    p.add_argument("--max-overlap", type=float, default=0.05, help="maximum box overlap with any other object")
    p.add_argument("--max-tries", type=int, default=50, help="pair draws per sample before giving up")
    p.add_argument("--out", required=True, help="output directory")

    p = add("derive-occ", cmd_derive_occ, "derive occluder/occludee ground truth for every instance")
    p.add_argument("--annotations", required=True, help="dataset annotations.json (or its directory)")
    p.add_argument("--rule", default="auto", choices=("auto", "modal", "amodal"), help="derivation rule")
    p.add_argument("--out", required=True, help="output JSON")

    p = add("split-occ", cmd_split_occ, "list images whose largest pairwise box overlap reaches a threshold")
    p.add_argument("--annotations", required=True, help="dataset annotations.json (or its directory)")
    p.add_argument("--threshold", type=float, default=0.2, help="overlap threshold")
    p.add_argument("--mode", default="iou", choices=("iou", "min"), help="box overlap ratio")
    p.add_argument("--out", required=True, help="output JSON")

    p = add("gen-shapes", cmd_gen_shapes, "generate overlapping-shapes scenes")
    p.add_argument("--count", type=int, default=100, help="scenes")
    p.add_argument("--size", type=int, default=64, help="image side")
    p.add_argument("--first-id", type=int, default=0, help="image id of the first scene")
    p.add_argument("--out", required=True, help="output directory")

    p = add("train", cmd_train, "train a mask head or query decoder on shapes scenes")
    _add_train_flags(p)
    _add_data_flags(p, test=False)
    p.add_argument("--data", default=None, help="training dataset directory; default: generated shapes")
    p.add_argument("--log-every", type=int, default=0, help="print the loss every N iterations (0: never)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("eval", cmd_eval, "evaluate a checkpoint on held-out scenes")
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin (its .json sidecar is read too)")
    _add_data_flags(p, train=False)
    p.add_argument("--data", default=None, help="evaluation dataset directory; default: generated shapes")
    p.add_argument("--max-dets", type=int, default=50, help="detections kept per image")
    p.add_argument("--out", required=True, help="output JSON report")

    p = add("compare", cmd_compare, "train and evaluate a grid of variants over several seeds")
    p.add_argument("--variants", nargs="+", default=["single-fcn", "single-gcn", "bilayer-fcn", "bilayer-gcn"], choices=HEAD_VARIANT_CHOICES, help="variants")
    p.add_argument("--seeds", nargs="+", type=int, default=[0, 1, 2], help="training seeds")
    _add_train_flags(p, variant=False)
    _add_data_flags(p)
    p.add_argument("--out", required=True, help="output directory")

    p = add("dump-heatmaps", cmd_dump_heatmaps, "write occluder/occludee probability maps for one scene")
    p.add_argument("--checkpoint", required=True, help="checkpoint.bin (its .json sidecar is read too)")
    _add_data_flags(p, train=False, test=False)
    p.add_argument("--data", default=None, help="dataset directory; default: a generated shapes scene")
    p.add_argument("--image-id", type=int, default=0, help="scene to render")
    p.add_argument("--out", required=True, help="output directory")
    return parser


def _apply_config(parser, argv):
    """Re-parse with defaults taken from ``--config`` so explicit flags win."""
    args = parser.parse_args(argv)
    if getattr(args, "config", None) is None:
        return args
    try:
        cfg = json.loads(Path(args.config).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"--config is not valid JSON: {exc}") from exc
    if not isinstance(cfg, dict):
        raise ConfigurationError("--config must hold a JSON object")
    sub = parser._subparsers._group_actions[0].choices[args.command]
    known = {a.dest for a in sub._actions}
    unknown = sorted(set(k.replace("-", "_") for k in cfg) - known)
    if unknown:
        raise ConfigurationError(f"unknown keys in --config: {', '.join(unknown)}")
    sub.set_defaults(**{k.replace("-", "_"): v for k, v in cfg.items()})
    return parser.parse_args(argv)


def run(argv=None) -> int:
    parser = build_parser()
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = _apply_config(parser, argv)
        if not getattr(args, "command", None):
            parser.print_usage(sys.stderr)
            return EXIT_INVALID
        return args.func(args)
    except UsageError as exc:
        print(f"ERROR usage: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except BilayerError as exc:
        print(f"ERROR {exc.code}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        print(f"ERROR io: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
