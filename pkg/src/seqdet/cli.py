"""Command-line entry point: ``python3 -m seqdet <command> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import math
import sys
from pathlib import Path

import numpy as np
import yaml

from .config import RunConfig, toy_config

COMMANDS = (
    "train", "eval", "infer", "ablate-ordering", "ablate-seqaug",
    "quantization-figure", "dump-attention", "embed-sim",
)


class CliError(Exception):
    pass


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def _float_list(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def _int_list(text: str) -> list[int]:
    return [int(v) for v in text.split(",") if v.strip()]


def _overrides(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise CliError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = yaml.safe_load(v)
    return out


def load_config(args) -> RunConfig:
    if getattr(args, "config_obj", None) is not None:
        cfg = args.config_obj
    elif args.config:
        path = Path(args.config)
        if not path.exists():
            raise CliError(f"config file not found: {path}")
        try:
            cfg = RunConfig.from_yaml(path)
        except (yaml.YAMLError, TypeError) as e:
            raise CliError(f"{path}: {e}") from e
    else:
        cfg = toy_config()
    overrides = _overrides(getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        overrides.setdefault("training.seed", args.seed)
        overrides.setdefault("decode.seed", args.seed)
    if getattr(args, "strategy", None) and isinstance(args.strategy, str):
        overrides.setdefault("data.ordering", args.strategy)
    return cfg.with_overrides(overrides) if overrides else cfg


def _decode_overrides(args, decode):
    changes = {}
    if args.p is not None:
        changes["p"] = args.p
    if args.eos_offset is not None:
        changes["eos_offset"] = args.eos_offset
    if args.fixed_length is not None:
        changes["fixed_length"] = args.fixed_length
    if args.seed is not None:
        changes["seed"] = args.seed
    return dataclasses.replace(decode, **changes)


def _load_checkpoint(path):
    from .checkpoint import CheckpointError
    from .train import load_run

    if not path:
        raise CliError("--checkpoint is required")
    if not Path(path).exists():
        raise CliError(f"checkpoint not found: {path}")
    try:
        return load_run(path)
    except CheckpointError as e:
        raise CliError(f"{path}: {e}") from e


def _val_samples(cfg: RunConfig, limit: int | None = None):
    from .data import synthetic_dataset

    syn = cfg.data.synthetic
    count = cfg.data.val_size if limit is None else min(limit, cfg.data.val_size)
    return synthetic_dataset(syn, syn.dataset_size, count)


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# commands


def cmd_train(args) -> None:
    from .train import fit, set_deterministic

    if args.checkpoint and not args.config:
        # resuming without a config continues the stored run as it was
        args.config_obj = _load_checkpoint(args.checkpoint).config
    cfg = load_config(args)
    set_deterministic()
    out = _out(args)
    (out / "config.yaml").write_text(cfg.to_yaml())
    result = fit(
        cfg, out, resume=args.checkpoint, max_steps=args.max_steps,
        evaluate_at_end=not args.no_eval, on_log=print if args.verbose else None,
    )
    if result.metrics is not None:
        (out / "metrics.txt").write_text(result.metrics.to_text())
        (out / "metrics.json").write_text(result.metrics.to_json())
    print(f"trained to step {result.step} in {result.seconds:.1f}s; checkpoint {out / 'final.ckpt'}")


def cmd_eval(args) -> None:
    from .evaluation import average_precision
    from .infer import parse_detections
    from .train import evaluate, ground_truth, set_deterministic

    set_deterministic()
    out = _out(args)
    if args.detections:
        cfg = load_config(args) if not args.checkpoint else _load_checkpoint(args.checkpoint).config
        val = _val_samples(cfg, args.limit)
        dets = parse_detections(Path(args.detections).read_text())
        metrics = average_precision(dets, ground_truth(val))
    else:
        run = _load_checkpoint(args.checkpoint)
        cfg = run.config
        val = _val_samples(cfg, args.limit)
        metrics, _ = evaluate(run.model, cfg, val, _decode_overrides(args, cfg.decode))
    (out / "metrics.txt").write_text(metrics.to_text())
    (out / "metrics.json").write_text(metrics.to_json())
    sys.stdout.write(metrics.to_text())


def cmd_infer(args) -> None:
    from .infer import detect, format_detections
    from .train import set_deterministic

    set_deterministic()
    run = _load_checkpoint(args.checkpoint)
    cfg = run.config
    decode = _decode_overrides(args, cfg.decode)
    if args.images:
        images = np.load(args.images)
        if images.ndim != 4 or images.shape[-1] != 3 or images.dtype != np.uint8:
            raise CliError(f"{args.images}: expected a (N, H, W, 3) uint8 array")
        ids = list(range(len(images)))
    else:
        val = _val_samples(cfg, args.limit)
        images = np.stack([s.image for s in val])
        ids = [s.image_id for s in val]
    dets = detect(run.model, images, cfg.vocab, decode, ids)
    text = format_detections(dets)
    (_out(args) / "detections.txt").write_text(text)
    print(f"{sum(len(d) for d in dets.values())} detections on {len(ids)} images")


def cmd_ablate_ordering(args) -> None:
    from .ablation import run_ablation_ordering
    from .codec import OrderingStrategy
    from .train import set_deterministic

    set_deterministic()
    strategies = args.strategies or [s.value for s in OrderingStrategy]
    cfg = load_config(args)
    rows = run_ablation_ordering(cfg, strategies, args.seeds, args.out, args.cache, print if args.verbose else None)
    print(f"{len(rows)} rows written to {Path(args.out) / 'ordering.csv'}")


def cmd_ablate_seqaug(args) -> None:
    from .ablation import matched_ap_gaps, run_ablation_seqaug
    from .train import set_deterministic

    set_deterministic()
    cfg = load_config(args)
    offsets = args.eos_offsets if args.eos_offsets is not None else [0.0, -1.0, -2.0, -4.0, -8.0, -math.inf]
    rows = run_ablation_seqaug(cfg, offsets, args.seeds, args.out, args.cache, print if args.verbose else None)
    for seed, gap in matched_ap_gaps(rows).items():
        print(f"seed {seed}: seq_aug AP minus matched no_seq_aug AP = {gap:.6f}")


def cmd_quantization_figure(args) -> None:
    from .analysis import quantization_figure
    from .data import synthetic_sample

    cfg = load_config(args)
    sample = synthetic_sample(cfg.data.synthetic, args.index)
    paths = quantization_figure(sample.image, sample.objects, args.bins, _out(args))
    print("\n".join(str(p) for p in paths))


def cmd_dump_attention(args) -> None:
    from .analysis import decode_attention, region_attention, shuffle_pixels, write_attention
    from .train import set_deterministic

    set_deterministic()
    run = _load_checkpoint(args.checkpoint)
    cfg = run.config
    image = _val_samples(cfg, args.index + 1)[args.index].image
    if args.grid:
        if args.shuffle:
            seed = cfg.decode.seed if args.seed is None else args.seed
            image = shuffle_pixels(image, np.random.default_rng(seed))
        dump = region_attention(run.model, image, cfg.vocab, args.grid)
    else:
        dump = decode_attention(run.model, image, cfg.vocab, _decode_overrides(args, cfg.decode))
    paths = write_attention(dump, image, _out(args))
    print(f"{len(paths)} attention grids written to {args.out}")


def cmd_embed_sim(args) -> None:
    from .analysis import coordinate_similarity, near_far_similarity, write_similarity

    run = _load_checkpoint(args.checkpoint)
    sim = coordinate_similarity(run.model, run.config.vocab)
    write_similarity(sim, _out(args))
    near, far = near_far_similarity(sim)
    print(f"mean similarity near={near:.6f} far={far:.6f}")


HANDLERS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "infer": cmd_infer,
    "ablate-ordering": cmd_ablate_ordering,
    "ablate-seqaug": cmd_ablate_seqaug,
    "quantization-figure": cmd_quantization_figure,
    "dump-attention": cmd_dump_attention,
    "embed-sim": cmd_embed_sim,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="seqdet", description="Detection as token-sequence prediction.")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, config=True, checkpoint=False, decode=False, out="out"):
        p = sub.add_parser(name, help=help_text)
        if config:
            p.add_argument("--config", help="YAML run configuration (default: toy setup)")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted config override")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", default=out)
        if checkpoint:
            p.add_argument("--checkpoint")
        if decode:
            p.add_argument("--p", type=float)
            p.add_argument("--eos-offset", type=float)
            p.add_argument("--fixed-length", type=_bool)
        p.add_argument("-v", "--verbose", action="store_true")
        return p

    p = add("train", "train a model", checkpoint=True, out="runs/train")
    p.add_argument("--strategy", help="object ordering strategy")
    p.add_argument("--max-steps", type=int)
    p.add_argument("--no-eval", action="store_true")
    p.set_defaults(checkpoint=None)

    p = add("eval", "score detections on the validation split", checkpoint=True, decode=True, out="runs/eval")
    p.add_argument("--detections", help="detections text file instead of decoding")
    p.add_argument("--limit", type=int)

    p = add("infer", "write detections for images", config=False, checkpoint=True, decode=True, out="runs/infer")
    p.add_argument("--images", help=".npy array of (N, H, W, 3) uint8 images (default: validation split)")
    p.add_argument("--limit", type=int)

    p = add("ablate-ordering", "train and compare ordering strategies", out="runs/ablate-ordering")
    p.add_argument("--strategy", dest="strategies", action="append", help="repeatable; default all six")
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--cache", help="directory of reusable trained runs")

    p = add("ablate-seqaug", "compare training with and without sequence augmentation",
            out="runs/ablate-seqaug")
    p.add_argument("--eos-offset", dest="eos_offsets", type=_float_list, help="comma-separated offsets")
    p.add_argument("--seeds", type=_int_list, default=[0])
    p.add_argument("--cache", help="directory of reusable trained runs")

    p = add("quantization-figure", "draw boxes after quantization", out="runs/quantization")
    p.add_argument("--bins", type=_int_list, default=[10, 50, 100, 500])
    p.add_argument("--index", type=int, default=0, help="synthetic sample index")

    p = add("dump-attention", "cross-attention maps", config=False, checkpoint=True, decode=True,
            out="runs/attention")
    p.add_argument("--grid", type=int, help="region-grid mode with an N x N grid")
    p.add_argument("--shuffle", type=_bool, default=True, help="shuffle pixels in region-grid mode")
    p.add_argument("--index", type=int, default=0, help="validation sample index")

    add("embed-sim", "coordinate-token embedding similarity", config=False, checkpoint=True,
        out="runs/embed-sim")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        HANDLERS[args.command](args)
    except (CliError, ValueError, TypeError, KeyError, OSError) as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"seqdet {args.command}: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    sys.exit(main())
