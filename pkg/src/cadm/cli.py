"""Command line entry point: synth, train, eval, ablate and heatmap."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import config as cfgmod
from .config import ConfigError, RunConfig
from .data import generate_synthetic, load_dataset, to_tensors, write_dataset
from .heatmap import pixel_heatmaps
from .metrics import append_metrics_csv, pooled_metrics
from .predictor import NoisePredictor, PredictorConfig
from .sampler import ensemble_infer, member_generator, sample_once
from .schedule import NoiseSchedule, respace
from .training import load_checkpoint, train

log = logging.getLogger("cadm")

METHOD_TAG = "CADM"
ABLATION_VARIANTS = (
    ("scale3", (3,), True),
    ("scale2,3", (2, 3), True),
    ("scale1,2,3", (1, 2, 3), True),
    ("scale1,2,3 w/o NSSE", (1, 2, 3), False),
)
ABLATION_COLUMNS = ("variant", "oa", "f1", "iou")
# fields that change parameter shapes; ablation flags do not
ARCH_FIELDS = ("base_channels", "blocks_per_level", "time_embed_dim", "image_channels")


class IncompatibleCheckpoint(ValueError):
    pass


# data ---------------------------------------------------------------------

def load_split(cfg: RunConfig, split: str):
    spec = cfg.data
    if spec.synthetic:
        return generate_synthetic(spec.synthetic_config())[split]
    root = Path(spec.root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset root not found: {root}")
    return load_dataset(root, split)


def build_model(pcfg: PredictorConfig, image_size, seed: int) -> NoisePredictor:
    torch.manual_seed(seed)
    return NoisePredictor(pcfg, image_size)


# commands -----------------------------------------------------------------

def cmd_synth(cfg: RunConfig, out=None) -> Path:
    out = Path(out or cfg.out)
    write_dataset(out, generate_synthetic(cfg.data.synthetic_config()))
    log.info("wrote synthetic dataset to %s", out)
    return out


def cmd_train(cfg: RunConfig, resume=None) -> list:
    """Train from scratch (or resume a checkpoint) and write checkpoints plus ``log.csv`` to ``cfg.out``."""
    pairs = load_split(cfg, "train")
    val = load_split(cfg, "val")
    sched = cfg.schedule.build()
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfgmod.save(cfg, out / "config.ini")
    state = None
    if resume is not None:
        model, sched, state = load_checkpoint(resume)
    else:
        model = build_model(cfg.model, pairs[0].image_a.shape[:2], cfg.train.seed)
    return train(model, pairs, cfg.train, sched, val_pairs=val, out_dir=out, resume=state)


def check_compatible(ckpt: dict, pcfg: PredictorConfig, image_size) -> None:
    saved = ckpt["predictor_config"]
    bad = [f"{k}: checkpoint {saved[k]} vs config {getattr(pcfg, k)}" for k in ARCH_FIELDS if saved[k] != getattr(pcfg, k)]
    if tuple(ckpt["image_size"]) != tuple(image_size):
        bad.append(f"image_size: checkpoint {tuple(ckpt['image_size'])} vs data {tuple(image_size)}")
    if bad:
        raise IncompatibleCheckpoint("checkpoint does not match config; " + "; ".join(bad))


def load_for_eval(checkpoint, cfg: RunConfig, image_size) -> tuple:
    ckpt = torch.load(checkpoint, map_location="cpu", weights_only=False)
    check_compatible(ckpt, cfg.model, image_size)
    model = NoisePredictor(cfg.model, image_size)
    model.load_state_dict(ckpt["model"])
    return model.eval(), NoiseSchedule.from_dict(ckpt["schedule"])


def _save_png(array: np.ndarray, path: Path) -> None:
    Image.fromarray(array.astype(np.uint8)).save(path)


def cmd_eval(cfg: RunConfig, checkpoint=None, split: str = "test", bypass: bool = False) -> dict:
    """Sample change maps for ``split``, write them as PNGs and append the pooled metrics row."""
    pairs = load_split(cfg, split)
    out = Path(cfg.out)
    maps_dir = out / "maps"
    maps_dir.mkdir(parents=True, exist_ok=True)
    labels = np.stack([p.label for p in pairs]).astype(np.uint8)
    if bypass:
        soft = labels.astype(np.float64)
        binary = labels
    else:
        if checkpoint is None:
            raise ValueError("eval needs a checkpoint unless the ground-truth bypass is set")
        model, sched = load_for_eval(checkpoint, cfg, pairs[0].image_a.shape[:2])
        I_a, I_b, _ = to_tensors(pairs)
        cm = ensemble_infer(I_a, I_b, model, respace(sched, cfg.sampler.steps), cfg.sampler)
        soft, binary = cm.soft, cm.binary
    for p, s, b in zip(pairs, soft, binary):
        _save_png(np.rint(255 * s), maps_dir / f"{p.name}_soft.png")
        _save_png(255 * b, maps_dir / f"{p.name}.png")
    metrics = pooled_metrics(binary, labels)
    append_metrics_csv(out / "metrics.csv", cfg.data.name, split, METHOD_TAG, metrics)
    log.info("%s %s: %s", cfg.data.name, split, metrics)
    return metrics


def ablation_variant(cfg: RunConfig, scales, nsse: bool, name: str) -> RunConfig:
    model = dataclasses.replace(cfg.model, active_scales=scales, nsse=nsse)
    out = str(Path(cfg.out) / name.replace(",", "_").replace(" ", "_").replace("/", ""))
    return dataclasses.replace(cfg, model=model, out=out)


def cmd_ablate(cfg: RunConfig, variants=None) -> list[dict]:
    """Train and evaluate the ablation variants under identical seeds; write ``ablation.csv``.

    ``variants`` selects a subset of ``ABLATION_VARIANTS`` by name; all four by default.
    """
    chosen = [v for v in ABLATION_VARIANTS if variants is None or v[0] in variants]
    if variants is not None and len(chosen) != len(set(variants)):
        known = [v[0] for v in ABLATION_VARIANTS]
        raise ValueError(f"unknown ablation variant in {list(variants)}; choose from {known}")
    rows = []
    for name, scales, nsse in chosen:
        variant = ablation_variant(cfg, scales, nsse, name)
        cmd_train(variant)
        ckpt = Path(variant.out) / f"epoch_{variant.train.epochs:03d}.pt"
        m = cmd_eval(variant, ckpt)
        rows.append({"variant": name, "oa": m["oa"], "f1": m["f1"], "iou": m["iou"]})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "ablation.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    return rows


def format_table(rows) -> str:
    lines = [f"{'variant':<22}{'OA':>8}{'F1':>8}{'IoU':>8}"]
    for r in rows:
        lines.append(f"{r['variant']:<22}{100 * r['oa']:8.2f}{100 * r['f1']:8.2f}{100 * r['iou']:8.2f}")
    return "\n".join(lines)


def cmd_heatmap(cfg: RunConfig, checkpoint, pair: str, pixel, split: str = "test") -> list[Path]:
    """Write one heatmap PNG per decoder level (coarsest first) for ``pixel`` of the named pair.

    The map explains the predicted ``x_0`` at the last denoising step of a
    chain sampled with the configured seed and step count.
    """
    pairs = {p.name: p for p in load_split(cfg, split)}
    if pair not in pairs:
        raise KeyError(f"pair {pair!r} not in split {split!r}")
    p = pairs[pair]
    H, W = p.label.shape
    r, c = pixel
    if not (0 <= r < H and 0 <= c < W):
        raise IndexError(f"pixel {tuple(pixel)} outside the {H}x{W} image")
    model, sched = load_for_eval(checkpoint, cfg, (H, W))
    I_a, I_b, _ = to_tensors([p])
    soft = sample_once(I_a, I_b, model, respace(sched, cfg.sampler.steps), member_generator(cfg.sampler.seed, 0))
    maps = pixel_heatmaps(model, 2 * soft - 1, I_a, I_b, 1, sched, (r, c))
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for level, m in enumerate(maps):
        path = out / f"{pair}_r{r}_c{c}_level{level}.png"
        _save_png(np.rint(255 * m.numpy()), path)
        paths.append(path)
    return paths


# argument parsing -----------------------------------------------------------

def _pixel(text: str):
    try:
        r, c = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected ROW,COL, got {text!r}") from None
    return r, c


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI run configuration")
    common.add_argument("--seed", type=int, help="overrides every seed except the data seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--steps", type=int, help="sampling steps")
    common.add_argument("--ensemble", type=int, help="ensemble size")
    common.add_argument("--scales", help="active difference scales, e.g. 2,3")
    common.add_argument("--no-nsse", action="store_true", help="replace NSSE with plain feature differences")
    common.add_argument("--threads", type=int, default=0, help="torch intra-op threads (0 keeps the default)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="cadm", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", parents=[common], help="write a synthetic dataset")
    p = sub.add_parser("train", parents=[common], help="train a noise predictor")
    p.add_argument("--resume", help="checkpoint to continue from")
    p = sub.add_parser("eval", parents=[common], help="sample change maps and score them")
    p.add_argument("--checkpoint")
    p.add_argument("--split", default="test")
    p.add_argument("--bypass-gt", action="store_true", help="score ground truth against itself")
    sub.add_parser("ablate", parents=[common], help="run the four-variant ablation")
    p = sub.add_parser("heatmap", parents=[common], help="per-level heatmaps for one pixel")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--pair", required=True, help="sample name, e.g. test_00003")
    p.add_argument("--pixel", type=_pixel, required=True, help="ROW,COL")
    p.add_argument("--split", default="test")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = cfgmod.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.replace("train", seed=args.seed).replace("sampler", seed=args.seed)
    if args.out:
        cfg = dataclasses.replace(cfg, out=args.out)
    if args.steps is not None:
        cfg = cfg.replace("sampler", steps=args.steps)
    if args.ensemble is not None:
        cfg = cfg.replace("sampler", ensemble_size=args.ensemble)
    if args.scales:
        cfg = cfg.replace("model", active_scales=cfgmod.parse_scales(args.scales))
    if args.no_nsse:
        cfg = cfg.replace("model", nsse=False)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        cfg = resolve_config(args)
        if args.command == "synth":
            print(cmd_synth(cfg))
        elif args.command == "train":
            hist = cmd_train(cfg, resume=args.resume)
            if hist:
                print(f"epoch {hist[-1]['epoch']} loss {hist[-1]['train_loss']:.5f} val_f1 {hist[-1]['val_f1']:.4f}")
        elif args.command == "eval":
            m = cmd_eval(cfg, args.checkpoint, args.split, bypass=args.bypass_gt)
            print(" ".join(f"{k}={m[k]:.4f}" for k in ("recall", "precision", "oa", "f1", "iou")))
        elif args.command == "ablate":
            print(format_table(cmd_ablate(cfg)))
        elif args.command == "heatmap":
            for path in cmd_heatmap(cfg, args.checkpoint, args.pair, args.pixel, args.split):
                print(path)
    except (ConfigError, FileNotFoundError, IncompatibleCheckpoint, IndexError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
