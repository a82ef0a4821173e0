#!/usr/bin/env python3
"""Micro-benchmark: wall time per training iteration for each phase.

Builds the desk-profile models, times a few forward+backward steps of the
segmentation objective and of the joint fusion objective on random batches,
and prints per-iteration means. Useful for sizing iteration budgets before
editing the schedule.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from fuseseg.config import desk_config
from fuseseg.losses import loss_fusion, loss_seg
from fuseseg.training import ModelBundle


def timeit(fn, reps: int) -> float:
    fn()  # warm-up
    start = time.monotonic()
    for _ in range(reps):
        fn()
    return (time.monotonic() - start) / reps


def main() -> int:
    ap = argparse.ArgumentParser()
    ap.add_argument("--batch", type=int, default=4)
    ap.add_argument("--size", type=int, default=96)
    ap.add_argument("--reps", type=int, default=5)
    args = ap.parse_args()

    cfg = desk_config()
    bundle = ModelBundle.build(cfg)
    gen = torch.Generator().manual_seed(0)
    x = torch.rand(args.batch, 1, args.size, args.size, generator=gen)
    y = torch.rand(args.batch, 1, args.size, args.size, generator=gen)
    labels = torch.randint(0, cfg.num_classes, (args.batch, args.size, args.size), generator=gen)

    def seg_step():
        bundle.segnet.zero_grad()
        with torch.no_grad():
            u, _ = bundle.fusion(x, y, bundle.segnet)
        loss_seg(bundle.segnet(u.repeat(1, 3, 1, 1)), labels).backward()

    def fusion_step():
        bundle.fusion.zero_grad()
        u, _ = bundle.fusion(x, y, bundle.segnet)
        bd = loss_fusion(u, x, y, eta=cfg.loss.eta, form=cfg.loss.pixel_loss_form)
        (bd.l_fusion + loss_seg(bundle.segnet(u.repeat(1, 3, 1, 1)), labels)).backward()

    print(f"batch {args.batch}, {args.size}x{args.size}, {args.reps} reps")
    print(f"seg iteration:    {timeit(seg_step, args.reps):.3f} s")
    print(f"fusion iteration: {timeit(fusion_step, args.reps):.3f} s")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
