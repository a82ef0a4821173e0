"""Command-line entry points.

Subcommands: ``synth`` (write a synthetic paired dataset), ``train`` (run the
alternating schedule), ``fuse`` (render fused images from a checkpoint),
``segment`` (predict label maps), ``eval`` (fusion + segmentation metric
CSVs) and ``inspect-weights`` (dump the recorded task-weight history).

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .config import Config, load_config, save_config
from .data.dataset import PairDataset
from .data.images import (
    Image,
    LabelMap,
    default_palette,
    load_image,
    load_pair,
    load_palette,
    luma,
    render_label,
    rgb_to_ycbcr,
    save_image,
    ycbcr_to_rgb,
)
from .data.synth import SynthSpec, write_dataset
from .errors import ConfigError, DataError, FusesegError, IoError, NumericalError
from .metrics import MetricReport, confusion, fusion_metrics
from .training import WEIGHT_HISTORY_COLUMNS, Trainer, TrainState, load_state
from .weighting import convergence_rate

log = logging.getLogger("fuseseg")


def _require_out(args) -> Path:
    if not args.out:
        raise ConfigError("--out DIR is required for this command")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _effective_config(args) -> Config:
    cfg = load_config(args.config) if args.config else Config()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _echo_config(cfg: Config, out: Path) -> None:
    save_config(cfg, out / "config.json")


# ---------------------------------------------------------------------------
# Commands


def cmd_synth(cfg: Config, out: Path) -> int:
    for split, count, salt in (("train", cfg.synth.train_scenes, 0), ("val", cfg.synth.val_scenes, 1)):
        if count <= 0:
            continue
        spec = SynthSpec(
            image_size=cfg.synth.image_size,
            num_classes=cfg.num_classes,
            shapes_min=cfg.synth.shapes_min,
            shapes_max=cfg.synth.shapes_max,
            thermal_classes=cfg.synth.thermal_classes,
            visible_corruption=cfg.synth.visible_corruption,
            seed=cfg.seed * 2 + salt,
        )
        ids = write_dataset(out / split, spec, count, cfg.data.ignore_index)
        log.info("wrote %d %s scenes under %s", len(ids), split, out / split)
    return 0


def cmd_train(cfg: Config, out: Path, resume: str | None) -> int:
    if resume:
        state = load_state(resume)
        cfg = state.cfg  # the embedded snapshot governs a resumed run
        log.info("resumed from %s at round %d", resume, state.round_index)
    else:
        state = TrainState.new(cfg)
    if not cfg.data.root:
        raise ConfigError("data.root must point at a dataset directory")
    dataset = PairDataset(cfg.data.root, cfg.num_classes, cfg.data.ignore_index)
    _echo_config(cfg, out)
    trainer = Trainer(state, dataset, out)
    final = trainer.train()
    log.info("training complete; final checkpoint at %s", final)
    return 0


def _scan_pairs(pairs_dir: Path) -> list[str]:
    vis_dir = pairs_dir / "Visible"
    ir_dir = pairs_dir / "Infrared"
    if not vis_dir.is_dir() or not ir_dir.is_dir():
        raise IoError(f"expected Visible/ and Infrared/ under {pairs_dir}")
    ids = sorted(p.stem for p in vis_dir.glob("*.png"))
    if not ids:
        raise IoError(f"no visible images under {vis_dir}")
    missing = [i for i in ids if not (ir_dir / f"{i}.png").is_file()]
    if missing:
        raise IoError(f"missing infrared images for ids {missing[:8]}")
    return ids


def _fuse_one(state: TrainState, pair) -> tuple[np.ndarray, dict]:
    x = torch.from_numpy(luma(pair.visible)).reshape(1, 1, *pair.infrared.pixels.shape)
    y = torch.from_numpy(pair.infrared.pixels).reshape(1, 1, *pair.infrared.pixels.shape)
    with torch.no_grad():
        u, diag = state.bundle.fusion(x, y, state.bundle.segnet)
    return u[0, 0].numpy(), diag


def cmd_fuse(checkpoint: str, pairs_dir: str, out: Path, diagnostics: bool = False) -> int:
    state = load_state(checkpoint)
    _echo_config(state.cfg, out)
    pairs_root = Path(pairs_dir)
    for pair_id in _scan_pairs(pairs_root):
        pair = load_pair(
            pairs_root / "Visible" / f"{pair_id}.png",
            pairs_root / "Infrared" / f"{pair_id}.png",
            pair_id,
        )
        fused, diag = _fuse_one(state, pair)
        save_image(out / f"{pair_id}_fused.png", fused)
        if pair.visible.pixels.ndim == 3:
            ycc = rgb_to_ycbcr(pair.visible).pixels.copy()
            ycc[..., 0] = fused
            color = ycbcr_to_rgb(Image(ycc, "YCBCR"))
            save_image(out / f"{pair_id}_fused_color.png", color.pixels)
        if diagnostics:
            u_pre = diag["u_pre"][0, 0].numpy()
            save_image(out / f"{pair_id}_upre.png", u_pre)
            np.save(out / f"{pair_id}_fused.npy", fused)
            np.save(out / f"{pair_id}_upre.npy", u_pre)
    return 0


def _predict_label(state: TrainState, gray: np.ndarray) -> np.ndarray:
    t = torch.from_numpy(gray.astype(np.float32)).reshape(1, 1, *gray.shape)
    with torch.no_grad():
        logits = state.bundle.segnet(t.repeat(1, 3, 1, 1))
    return logits.argmax(dim=1)[0].numpy().astype(np.int64)


def cmd_segment(checkpoint: str, images_dir: str, out: Path, palette_path: str | None) -> int:
    state = load_state(checkpoint)
    _echo_config(state.cfg, out)
    num_classes = state.cfg.num_classes
    palette = load_palette(palette_path) if palette_path else default_palette(num_classes)
    src = Path(images_dir)
    if not src.is_dir():
        raise IoError(f"image directory not found: {src}")
    files = sorted(src.glob("*.png"))
    if not files:
        raise IoError(f"no PNG images under {src}")
    for path in files:
        arr = load_image(path)
        gray = arr if arr.ndim == 2 else rgb_to_ycbcr(Image(arr, "RGB")).pixels[..., 0]
        pred = _predict_label(state, gray)
        rendered = render_label(
            LabelMap(pred, num_classes, state.cfg.data.ignore_index), palette
        )
        save_image(out / f"{path.stem}_label.png", rendered / 255.0)
    return 0


def cmd_eval(checkpoint: str, dataset_dir: str, out: Path) -> int:
    state = load_state(checkpoint)
    _echo_config(state.cfg, out)
    cfg = state.cfg
    dataset = PairDataset(dataset_dir, cfg.num_classes, cfg.data.ignore_index)
    report = MetricReport()
    for i, scene_id in enumerate(dataset.ids):
        pair, label = dataset[i]
        fused, _ = _fuse_one(state, pair)
        x = luma(pair.visible)
        report.add_fusion(scene_id, fusion_metrics(fused, x, pair.infrared.pixels))
        pred = _predict_label(state, fused)
        report.add_confusion(
            confusion(pred, label.classes, cfg.num_classes, cfg.data.ignore_index)
        )
    report.write_fusion_csv(out / "fusion_metrics.csv")
    scores = report.write_segmentation_csv(out / "segmentation_metrics.csv")
    log.info("eval over %d scenes: mAcc %.4f, mIoU %.4f", len(dataset), scores.mean_acc, scores.mean_iou)
    return 0


def cmd_inspect_weights(checkpoint: str, out: Path, pairs_dir: str | None) -> int:
    state = load_state(checkpoint)
    _echo_config(state.cfg, out)
    with open(out / "weight_history.csv", "w", newline="") as fh:
        fh.write(",".join(WEIGHT_HISTORY_COLUMNS) + "\n")
        for row in state.weight_history:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
    rates = (convergence_rate(state.rate_history, "fusion"), convergence_rate(state.rate_history, "seg"))
    log.info("current rates %s, lambdas %s", rates, state.weights.lambdas)
    if pairs_dir:
        root = Path(pairs_dir)
        ids = _scan_pairs(root)
        pair = load_pair(root / "Visible" / f"{ids[0]}.png", root / "Infrared" / f"{ids[0]}.png", ids[0])
        _, diag = _fuse_one(state, pair)
        with open(out / "attention_diagnostics.csv", "w", newline="") as fh:
            fh.write("block,tokens,head,norm\n")
            for b, d in enumerate(diag.get("attention", [])):
                for key in sorted(d):
                    for h, v in enumerate(d[key]):
                        fh.write(f"{b},{key},{h},{repr(float(v))}\n")
    return 0


# ---------------------------------------------------------------------------
# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", metavar="PATH", help="JSON config file")
    shared.add_argument("--seed", type=int, metavar="INT", help="override config seed")
    shared.add_argument("--out", metavar="DIR", help="output/run directory")
    shared.add_argument("--resume", metavar="PATH", help="checkpoint to resume training from")

    parser = argparse.ArgumentParser(prog="fuseseg", parents=[shared])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[shared], help="generate a synthetic paired dataset")
    sub.add_parser("train", parents=[shared], help="run alternating fusion/segmentation training")

    p_fuse = sub.add_parser("fuse", parents=[shared], help="fuse registered pairs with a checkpoint")
    p_fuse.add_argument("checkpoint", help="checkpoint archive directory")
    p_fuse.add_argument("pairs", help="directory with Visible/ and Infrared/")
    p_fuse.add_argument("--diagnostics", action="store_true", help="also dump u_pre and raw arrays")

    p_seg = sub.add_parser("segment", parents=[shared], help="predict label maps for images")
    p_seg.add_argument("checkpoint", help="checkpoint archive directory")
    p_seg.add_argument("images", help="directory of PNG images")
    p_seg.add_argument("--palette", help="palette JSON for rendering (defaults to built-in)")

    p_eval = sub.add_parser("eval", parents=[shared], help="evaluate a checkpoint on a dataset")
    p_eval.add_argument("checkpoint", help="checkpoint archive directory")
    p_eval.add_argument("dataset", help="dataset root with Visible/Infrared/Label")

    p_insp = sub.add_parser("inspect-weights", parents=[shared], help="dump task-weight history")
    p_insp.add_argument("checkpoint", help="checkpoint archive directory")
    p_insp.add_argument("--pairs", help="optional pair directory for attention diagnostics")

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "synth":
            out = _require_out(args)
            cfg = _effective_config(args)
            _echo_config(cfg, out)
            return cmd_synth(cfg, out)
        if args.command == "train":
            out = _require_out(args)
            cfg = _effective_config(args)
            return cmd_train(cfg, out, args.resume)
        if args.command == "fuse":
            return cmd_fuse(args.checkpoint, args.pairs, _require_out(args), args.diagnostics)
        if args.command == "segment":
            return cmd_segment(args.checkpoint, args.images, _require_out(args), args.palette)
        if args.command == "eval":
            return cmd_eval(args.checkpoint, args.dataset, _require_out(args))
        if args.command == "inspect-weights":
            return cmd_inspect_weights(args.checkpoint, _require_out(args), args.pairs)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return 2
    except DataError as exc:
        log.error("data error: %s", exc)
        return 3
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return 4
    except FusesegError as exc:  # pragma: no cover - safety net
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
