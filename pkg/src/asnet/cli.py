"""Command-line entry points: gen, overlap, infer, match, post, eval, perturb, selfcheck."""
from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import dataio
from .evaluation import SETTINGS, evaluate
from .losses import LossConfig
from .matching import match_scene
from .model import IA_MODES, ModelConfig, forward_full, init_weights, load_weights, save_weights
from .postprocess import DEFAULT_TOP_N, MatchStrategy, assemble_triplets
from .tensor_core import ConfigError, ShapeError


class CliError(Exception):
    pass


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("ASNET_THREADS", "1")))
    except ValueError:
        raise CliError("ASNET_THREADS must be an integer") from None


def load_config(path, manifest=None) -> tuple[ModelConfig, LossConfig]:
    """Config file: flat JSON object of ModelConfig and LossConfig fields."""
    values = {}
    if path:
        values = dataio.read_json(path)
        if not isinstance(values, dict):
            raise CliError(f"{path}: config must be a JSON object")
    model_keys = {f.name for f in fields(ModelConfig)}
    loss_keys = {f.name for f in fields(LossConfig)}
    unknown = set(values) - model_keys - loss_keys
    if unknown:
        raise CliError(f"{path}: unknown config fields {sorted(unknown)}")
    model_vals = {k: v for k, v in values.items() if k in model_keys}
    if manifest is not None:
        model_vals.setdefault("L_d", len(manifest.classes))
        model_vals.setdefault("L", len(manifest.verbs))
    try:
        return (ModelConfig(**model_vals), LossConfig(**{k: v for k, v in values.items() if k in loss_keys}))
    except (TypeError, ValueError) as exc:
        raise CliError(f"{path}: {exc}") from None


def write_pgm(path: Path, matrix: np.ndarray) -> None:
    """8-bit binary PGM, each row scaled by its own maximum."""
    m = np.asarray(matrix, dtype=np.float64)
    peak = m.max(axis=1, keepdims=True)
    scaled = np.where(peak > 0, m / np.where(peak > 0, peak, 1.0), 0.0)
    pixels = np.clip(np.rint(scaled * 255), 0, 255).astype(np.uint8)
    header = f"P5\n{m.shape[1]} {m.shape[0]}\n255\n".encode()
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(header + pixels.tobytes())
    os.replace(tmp, path)


def dump_attention(dump_dir: Path, image_id: int, out) -> None:
    dump_dir.mkdir(parents=True, exist_ok=True)
    for rec in out.records:
        maps = {"instance_co": rec.instance_co_attention, "interaction_co": rec.interaction_co_attention}
        if rec.ia_map is not None:
            maps["instance_aware"] = rec.ia_map
        for kind, m in maps.items():
            stem = dump_dir / f"img{image_id}_layer{rec.layer}_{kind}"
            write_pgm(stem.with_suffix(".pgm"), m)
            dataio.atomic_write_text(stem.with_suffix(".json"), dataio.dump_json({"shape": list(m.shape), "data": m.tolist()}))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(args):
    manifest, scenes = dataio.generate_synthetic_dataset(args.images, args.seed, args.classes, args.verbs)
    dataio.save_annotations(args.out, manifest, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")


def cmd_overlap(args):
    scenes = dataio.generate_overlap_scenario(args.seed, args.scenes, args.classes, args.verbs)
    manifest = dataio.make_manifest(scenes, args.classes, args.verbs, 0, args.seed)
    dataio.save_annotations(args.out, manifest, scenes)
    print(f"wrote {len(scenes)} overlap scenes to {args.out}")


def cmd_infer(args):
    manifest, scenes = dataio.load_annotations(args.gt)
    cfg, _ = load_config(args.config, manifest)
    if args.weights:
        weights = load_weights(args.weights, replace(cfg, ia_attention_layers=None))
    else:
        weights = init_weights(replace(cfg, ia_attention_layers=None), args.seed)
    if args.zero_ia_projection:
        weights = weights.with_zero_ia_projection()
    if args.save_weights:
        save_weights(weights, args.save_weights)
    run_cfg = weights.config.with_ia_mode(args.ia_attn)
    images = []
    for scene in scenes:
        grid = dataio.render_feature_grid(scene, args.grid, args.grid, cfg.in_channels, args.seed)
        out = forward_full(grid, weights, run_cfg)
        images.append(dataio.raw_outputs_to_json(scene.image_id, out))
        if args.dump_dir:
            dump_attention(Path(args.dump_dir), scene.image_id, out)
    doc = {"model_config": run_cfg.to_dict(), "seed": args.seed, "human_class": manifest.human_class, "images": images}
    dataio.atomic_write_text(args.out, dataio.dump_json(doc))
    print(f"wrote raw outputs for {len(images)} images to {args.out}")


def _load_raw(path):
    doc = dataio.read_json(path)
    if not isinstance(doc, dict) or "images" not in doc:
        raise dataio.SchemaError(f"{path}: not an infer output (missing 'images')")
    return doc, [dataio.raw_outputs_from_json(r, str(path)) for r in doc["images"]]


def cmd_match(args):
    manifest, scenes = dataio.load_annotations(args.gt)
    _, loss_cfg = load_config(args.config, manifest)
    _, raw = _load_raw(args.pred)
    by_id = {s.image_id: s for s in scenes}
    results = []
    for image_id, ins, inter in raw:
        if image_id not in by_id:
            raise CliError(f"{args.pred}: image {image_id} not in {args.gt}")
        results.append(match_scene(by_id[image_id], ins, inter, loss_cfg).to_json())
    total = sum(r["total_loss"] for r in results)
    dataio.atomic_write_text(args.out, dataio.dump_json({"images": results, "total_loss": total}))
    print(f"matched {len(results)} images; total loss {total:.6f}")


def cmd_post(args):
    doc, raw = _load_raw(args.pred)
    human_class = doc.get("human_class", 0) if args.human_class is None else args.human_class

    def run(item):
        image_id, ins, inter = item
        triplets = assemble_triplets(ins, inter, args.strategy, human_class, args.top_n, args.score_floor)
        return dataio.PredictionRecord(image_id, tuple(triplets))

    workers = worker_count()
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(run, raw))
    else:
        records = [run(item) for item in raw]
    dataio.save_predictions(args.out, records)
    print(f"wrote {sum(len(r.triplets) for r in records)} triplets for {len(records)} images to {args.out}")


def cmd_eval(args):
    manifest, scenes = dataio.load_annotations(args.gt)
    records = dataio.load_predictions(args.pred)
    report = evaluate(records, scenes, args.setting, manifest.hoi_counts, workers=worker_count())
    table = report.table()
    if args.out:
        dataio.atomic_write_text(args.out, dataio.dump_json(report.to_json()))
        dataio.atomic_write_text(Path(args.out).with_suffix(".txt"), table)
    print(table, end="")


def cmd_perturb(args):
    manifest, scenes = dataio.load_annotations(args.gt)
    records = dataio.perturb_to_predictions(
        scenes, args.box_noise, args.score_quality, args.fp_rate, args.seed,
        len(manifest.classes), len(manifest.verbs), manifest.human_class,
    )
    dataio.save_predictions(args.out, records)
    print(f"wrote oracle predictions for {len(records)} images to {args.out}")


def cmd_selfcheck(args):
    from .selfcheck import run_all

    if not run_all(seed=args.seed):
        raise CliError("selfcheck failed")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="asnet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_):
        p = sub.add_parser(name, help=help_)
        p.set_defaults(func=func)
        p.add_argument("--seed", type=int, default=0)
        return p

    p = add("gen", cmd_gen, "generate a synthetic annotated dataset")
    p.add_argument("--images", type=int, default=50)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--verbs", type=int, default=8)
    p.add_argument("--out", required=True)

    p = add("overlap", cmd_overlap, "generate coincident-midpoint interaction scenes")
    p.add_argument("--scenes", type=int, default=8)
    p.add_argument("--classes", type=int, default=12)
    p.add_argument("--verbs", type=int, default=8)
    p.add_argument("--out", required=True)

    p = add("infer", cmd_infer, "seeded-weight forward pass over synthetic feature grids")
    p.add_argument("--gt", required=True)
    p.add_argument("--config")
    p.add_argument("--weights", help="weight manifest to load instead of seeded init")
    p.add_argument("--save-weights", help="write the weights used to this manifest path")
    p.add_argument("--ia-attn", choices=IA_MODES, default="all")
    p.add_argument("--zero-ia-projection", action="store_true")
    p.add_argument("--grid", type=int, default=7, help="feature grid width and height")
    p.add_argument("--dump-dir", help="write attention maps (PGM + JSON) here")
    p.add_argument("--out", required=True)

    p = add("match", cmd_match, "Hungarian matching and loss report for raw outputs")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = add("post", cmd_post, "assemble HOI triplets from raw outputs")
    p.add_argument("--pred", required=True)
    p.add_argument("--strategy", choices=[s.value for s in MatchStrategy], default="combined")
    p.add_argument("--top-n", type=int, default=DEFAULT_TOP_N)
    p.add_argument("--score-floor", type=float, default=0.0)
    p.add_argument("--human-class", type=int)
    p.add_argument("--out", required=True)

    p = add("eval", cmd_eval, "HOI mAP report")
    p.add_argument("--gt", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--setting", choices=SETTINGS, default="default")
    p.add_argument("--out")

    p = add("perturb", cmd_perturb, "oracle predictions from ground truth")
    p.add_argument("--gt", required=True)
    p.add_argument("--box-noise", type=float, default=0.0)
    p.add_argument("--score-quality", type=float, default=1.0)
    p.add_argument("--fp-rate", type=float, default=0.0)
    p.add_argument("--out", required=True)

    add("selfcheck", cmd_selfcheck, "run the oracle and invariant checks")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.func(args)
    except (CliError, dataio.SchemaError, ShapeError, ConfigError, ValueError, KeyError, IndexError, OSError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"asnet {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
