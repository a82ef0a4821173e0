"""Alternating two-phase trainer with dynamic loss weighting.

Each round runs a segmentation phase followed by a fusion phase:

* segmentation phase - fusion parameters frozen; the current fusion system
  renders ``u`` (no gradients), and the segmentation network trains on
  ``(u, label)`` with cross entropy, warmup then poly learning rate.
* fusion phase - segmentation parameters frozen; gradients of
  ``lambda_f * L_fusion + lambda_s * L_seg`` flow through the frozen
  segmentation activations into the extractors, decoder, taps and attention
  blocks.  Task weights are recomputed from convergence rates at every epoch
  boundary of the phase.

All randomness (batch order, augmentation draws) is derived from counters, so
a resumed run reproduces an uninterrupted run bit for bit; parameter and
optimizer state round-trip losslessly through the checkpoint archive.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .checkpoint import load_archive, save_archive
from .config import Config, from_dict, to_dict
from .data.augment import augment
from .data.dataset import PairDataset
from .data.images import luma
from .errors import ConfigError, CorruptBlob, NumericalError
from .losses import loss_fusion, loss_seg
from .models.fusion import FusionSystem
from .models.segnet import SegNet
from .weighting import RateHistory, WeightState, convergence_rate, poly_lr, weighting_strategy

log = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "phase", "l_ssim", "l_mse", "l_grad", "l_seg", "lambda1", "lambda2", "lr")
WEIGHT_HISTORY_COLUMNS = ("round", "epoch", "r_fusion", "r_seg", "lambda1", "lambda2")

SEG_PHASE, FUSION_PHASE = 0, 1


def _rng(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((seed, *key))))


@dataclass
class ModelBundle:
    """The two sub-networks; built under a fixed seed for reproducibility."""

    segnet: SegNet
    fusion: FusionSystem

    @classmethod
    def build(cls, cfg: Config) -> "ModelBundle":
        torch.manual_seed(cfg.seed)
        segnet = SegNet(cfg.segnet, cfg.num_classes)
        fusion = FusionSystem(cfg)
        return cls(segnet=segnet, fusion=fusion)

    def groups(self) -> dict[str, nn.Module]:
        return {"seg": self.segnet, "fusion": self.fusion}


def group_checksum(module: nn.Module) -> str:
    """SHA-256 over all parameters in named order; detects any bit flip."""
    h = hashlib.sha256()
    for name, p in sorted(module.named_parameters()):
        h.update(name.encode())
        h.update(p.detach().numpy().tobytes())
    return h.hexdigest()


@dataclass
class TrainState:
    cfg: Config
    bundle: ModelBundle
    opt_seg: torch.optim.Adam
    opt_fusion: torch.optim.Adam
    rate_history: RateHistory
    weights: WeightState
    round_index: int = 0
    iteration: int = 0
    seg_steps: int = 0
    fusion_steps: int = 0
    created: str = ""
    weight_history: list[tuple[float, ...]] = field(default_factory=list)

    @classmethod
    def new(cls, cfg: Config) -> "TrainState":
        bundle = ModelBundle.build(cfg)
        sc = cfg.schedule
        opt_seg = torch.optim.Adam(bundle.segnet.parameters(), lr=sc.seg_lr)
        opt_fusion = torch.optim.Adam(bundle.fusion.parameters(), lr=sc.fusion_lr)
        lambdas = weighting_strategy(
            sc.strategy, sc.eta_pref, sc.temperature, sc.manual_lambdas
        )((1.0, 1.0))
        return cls(
            cfg=cfg,
            bundle=bundle,
            opt_seg=opt_seg,
            opt_fusion=opt_fusion,
            rate_history=RateHistory(),
            weights=WeightState(lambdas, tuple(sc.eta_pref), sc.temperature),
            created=time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime()),
        )


# ---------------------------------------------------------------------------
# Checkpoint (de)hydration


def _optimizer_tensors(opt: torch.optim.Adam, module: nn.Module, prefix: str, out: dict) -> None:
    named = dict(module.named_parameters())
    for pname, param in named.items():
        st = opt.state.get(param)
        if not st:
            continue
        out[f"opt/{prefix}/{pname}/step"] = np.asarray(
            [float(st["step"])], dtype=np.float32
        )
        out[f"opt/{prefix}/{pname}/exp_avg"] = st["exp_avg"].detach().numpy()
        out[f"opt/{prefix}/{pname}/exp_avg_sq"] = st["exp_avg_sq"].detach().numpy()


def _restore_optimizer(opt: torch.optim.Adam, module: nn.Module, prefix: str, tensors: dict) -> None:
    for pname, param in module.named_parameters():
        key = f"opt/{prefix}/{pname}/step"
        if key not in tensors:
            continue
        opt.state[param] = {
            "step": torch.tensor(float(tensors[key][0])),
            "exp_avg": torch.from_numpy(tensors[f"opt/{prefix}/{pname}/exp_avg"].copy()),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt/{prefix}/{pname}/exp_avg_sq"].copy()),
        }


def save_state(state: TrainState, path: str | Path) -> Path:
    tensors: dict[str, np.ndarray] = {}
    for gname, module in state.bundle.groups().items():
        for pname, p in module.named_parameters():
            tensors[f"model/{gname}/{pname}"] = p.detach().numpy()
    _optimizer_tensors(state.opt_seg, state.bundle.segnet, "seg", tensors)
    _optimizer_tensors(state.opt_fusion, state.bundle.fusion, "fusion", tensors)
    if state.weight_history:
        tensors["sched/weight_history"] = np.asarray(state.weight_history, dtype=np.float32)
    meta = {
        "kind": "train_state",
        "created": state.created,
        "seed": state.cfg.seed,
        "round_index": state.round_index,
        "iteration": state.iteration,
        "seg_steps": state.seg_steps,
        "fusion_steps": state.fusion_steps,
        "config": to_dict(state.cfg),
        "lambdas": list(state.weights.lambdas),
        "rate_history": state.rate_history.as_lists(),
        "weight_history_columns": list(WEIGHT_HISTORY_COLUMNS),
    }
    return save_archive(path, meta, tensors)


def load_state(path: str | Path) -> TrainState:
    meta, tensors = load_archive(path)
    cfg = from_dict(meta["config"])
    state = TrainState.new(cfg)
    state.created = meta["created"]
    state.round_index = int(meta["round_index"])
    state.iteration = int(meta["iteration"])
    state.seg_steps = int(meta["seg_steps"])
    state.fusion_steps = int(meta["fusion_steps"])
    state.rate_history = RateHistory.from_lists(meta["rate_history"])
    state.weights = WeightState(
        tuple(float(v) for v in meta["lambdas"]),
        tuple(cfg.schedule.eta_pref),
        cfg.schedule.temperature,
    )
    with torch.no_grad():
        for gname, module in state.bundle.groups().items():
            named = dict(module.named_parameters())
            for pname, param in named.items():
                key = f"model/{gname}/{pname}"
                if key not in tensors:
                    raise CorruptBlob(f"missing tensor {key!r}")
                arr = tensors[key]
                if tuple(arr.shape) != tuple(param.shape):
                    raise ConfigError(
                        f"checkpoint tensor {key} shape {arr.shape} != model {tuple(param.shape)}"
                    )
                param.copy_(torch.from_numpy(arr.copy()))
    _restore_optimizer(state.opt_seg, state.bundle.segnet, "seg", tensors)
    _restore_optimizer(state.opt_fusion, state.bundle.fusion, "fusion", tensors)
    wh = tensors.get("sched/weight_history")
    if wh is not None:
        state.weight_history = [tuple(float(v) for v in row) for row in wh]
    return state


# ---------------------------------------------------------------------------
# Trainer


class Trainer:
    def __init__(self, state: TrainState, dataset: PairDataset, run_dir: str | Path):
        self.state = state
        self.cfg = state.cfg
        self.plan = state.cfg.schedule
        self.dataset = dataset
        self.run_dir = Path(run_dir)
        self.run_dir.mkdir(parents=True, exist_ok=True)
        self.log_path = self.run_dir / "training_log.csv"
        self.audit_path = self.run_dir / "freeze_audit.json"
        self.audit: list[dict] = []
        self._strategy = weighting_strategy(
            self.plan.strategy, self.plan.eta_pref, self.plan.temperature, self.plan.manual_lambdas
        )
        if len(dataset) == 0:
            raise ConfigError("training dataset is empty")
        self._log_fh = open(self.log_path, "w", newline="")
        self._log_fh.write(",".join(LOG_COLUMNS) + "\n")

    def close(self) -> None:
        if not self._log_fh.closed:
            self._log_fh.close()

    # -- data ---------------------------------------------------------------

    def _iters_per_epoch(self) -> int:
        return max(1, math.ceil(len(self.dataset) / self.plan.batch_size))

    def _batch(self, round_idx: int, phase: int, it: int):
        n = len(self.dataset)
        b = self.plan.batch_size
        ipe = self._iters_per_epoch()
        epoch, pos = divmod(it, ipe)
        perm = _rng(self.cfg.seed, 1, round_idx, phase, epoch).permutation(n)
        idx = perm[pos * b : pos * b + b]
        if len(idx) == 0:  # guard for batch sizes larger than the dataset
            idx = perm[:b]
        if self.cfg.augment.enabled:
            xs, ys, labs = [], [], []
            for slot, i in enumerate(idx):
                pair, label = self.dataset[int(i)]
                rng = _rng(self.cfg.seed, 2, round_idx, phase, self.state.iteration, slot)
                pair, label = augment(pair, label, self.cfg.augment, rng)
                xs.append(torch.from_numpy(luma(pair.visible)).unsqueeze(0))
                ys.append(torch.from_numpy(pair.infrared.pixels).unsqueeze(0))
                labs.append(torch.from_numpy(label.classes))
            return torch.stack(xs), torch.stack(ys), torch.stack(labs)
        return self.dataset.batch_tensors([int(i) for i in idx])

    # -- logging ------------------------------------------------------------

    def _write_row(self, phase: str, values: dict[str, float | None], lr: float) -> None:
        def fmt(v):
            return "" if v is None else repr(float(v))

        row = [
            str(self.state.iteration),
            phase,
            fmt(values.get("l_ssim")),
            fmt(values.get("l_mse")),
            fmt(values.get("l_grad")),
            fmt(values.get("l_seg")),
            fmt(values.get("lambda1")),
            fmt(values.get("lambda2")),
            repr(float(lr)),
        ]
        self._log_fh.write(",".join(row) + "\n")

    def _record_audit(self, round_idx: int, phase: str, frozen: str, before: str, after: str) -> None:
        self.audit.append(
            {
                "round": round_idx,
                "phase": phase,
                "frozen_group": frozen,
                "before": before,
                "after": after,
            }
        )
        self.audit_path.write_text(json.dumps(self.audit, indent=1) + "\n")

    # -- phases ---------------------------------------------------------------

    def _set_trainable(self, seg: bool, fusion: bool) -> None:
        for p in self.state.bundle.segnet.parameters():
            p.requires_grad_(seg)
        for p in self.state.bundle.fusion.parameters():
            p.requires_grad_(fusion)

    def _check_finite(self, value: torch.Tensor, what: str) -> None:
        if not bool(torch.isfinite(value)):
            raise NumericalError(f"non-finite {what} at iteration {self.state.iteration}")

    def _clip(self, module: nn.Module) -> None:
        total = torch.nn.utils.clip_grad_norm_(module.parameters(), self.plan.clip_norm)
        if float(total) > self.plan.clip_norm:
            log.info("gradient norm %.3f clipped to %.1f at iteration %d",
                     float(total), self.plan.clip_norm, self.state.iteration)

    def _seg_lr(self) -> float:
        sc = self.plan
        total = sc.rounds * sc.seg_iters
        warm = min(sc.warmup_iters, total)
        if self.state.seg_steps < warm:
            return sc.warmup_lr
        span = max(1, total - warm)
        return poly_lr(self.state.seg_steps - warm, span, sc.seg_lr, sc.seg_lr_end, sc.poly_power)

    def _fusion_lr(self) -> float:
        sc = self.plan
        total = max(1, sc.rounds * sc.fusion_iters)
        return poly_lr(self.state.fusion_steps, total, sc.fusion_lr, sc.fusion_lr_end, sc.poly_power)

    def _phase_seg(self, round_idx: int) -> None:
        st = self.state
        before = group_checksum(st.bundle.fusion)
        self._set_trainable(seg=True, fusion=False)
        for it in range(self.plan.seg_iters):
            x, y, labels = self._batch(round_idx, SEG_PHASE, it)
            with torch.no_grad():
                u, _ = st.bundle.fusion(x, y, st.bundle.segnet)
            logits = st.bundle.segnet(u.repeat(1, 3, 1, 1))
            ls = loss_seg(logits, labels, self.cfg.data.ignore_index)
            self._check_finite(ls, "segmentation loss")
            lr = self._seg_lr()
            self.state.opt_seg.param_groups[0]["lr"] = lr
            self.state.opt_seg.zero_grad()
            ls.backward()
            self._clip(st.bundle.segnet)
            self.state.opt_seg.step()
            self._write_row("seg", {"l_seg": float(ls.detach())}, lr)
            st.seg_steps += 1
            st.iteration += 1
        self._record_audit(round_idx, "seg", "fusion", before, group_checksum(st.bundle.fusion))

    def _phase_fusion(self, round_idx: int) -> None:
        st = self.state
        lo = self.cfg.loss
        before = group_checksum(st.bundle.segnet)
        self._set_trainable(seg=False, fusion=True)
        ipe = self._iters_per_epoch()
        epoch_sums = {"fusion": 0.0, "seg": 0.0}
        epoch_count = 0
        epoch_idx = 0

        def finalize_epoch() -> None:
            nonlocal epoch_count, epoch_idx
            if epoch_count == 0:
                return
            st.rate_history.record("fusion", epoch_sums["fusion"] / epoch_count)
            st.rate_history.record("seg", epoch_sums["seg"] / epoch_count)
            rates = (convergence_rate(st.rate_history, "fusion"),
                     convergence_rate(st.rate_history, "seg"))
            st.weights = WeightState(self._strategy(rates), st.weights.eta_pref, st.weights.temperature)
            st.weight_history.append(
                (float(round_idx), float(epoch_idx), rates[0], rates[1], *st.weights.lambdas)
            )
            epoch_sums["fusion"] = epoch_sums["seg"] = 0.0
            epoch_count = 0
            epoch_idx += 1

        for it in range(self.plan.fusion_iters):
            if it > 0 and it % ipe == 0:
                finalize_epoch()
            x, y, labels = self._batch(round_idx, FUSION_PHASE, it)
            u, _ = st.bundle.fusion(x, y, st.bundle.segnet)
            bd = loss_fusion(
                u, x, y,
                eta=lo.eta,
                form=lo.pixel_loss_form,
                ssim_window=lo.ssim_window,
                ssim_sigma=lo.ssim_sigma,
                grad_kernels=lo.grad_kernels,
            )
            logits = st.bundle.segnet(u.repeat(1, 3, 1, 1))
            ls = loss_seg(logits, labels, self.cfg.data.ignore_index)
            lam1, lam2 = st.weights.lambdas
            total = lam1 * bd.l_fusion + lam2 * ls
            self._check_finite(total, "fusion-phase loss")
            lr = self._fusion_lr()
            st.opt_fusion.param_groups[0]["lr"] = lr
            st.opt_fusion.zero_grad()
            total.backward()
            self._clip(st.bundle.fusion)
            st.opt_fusion.step()
            self._write_row(
                "fusion",
                {
                    "l_ssim": float(bd.l_ssim.detach()),
                    "l_mse": float(bd.l_mse.detach()),
                    "l_grad": float(bd.l_grad.detach()),
                    "l_seg": float(ls.detach()),
                    "lambda1": lam1,
                    "lambda2": lam2,
                },
                lr,
            )
            epoch_sums["fusion"] += float(bd.l_fusion.detach())
            epoch_sums["seg"] += float(ls.detach())
            epoch_count += 1
            st.fusion_steps += 1
            st.iteration += 1
        finalize_epoch()
        self._record_audit(round_idx, "fusion", "seg", before, group_checksum(st.bundle.segnet))

    # -- rounds ---------------------------------------------------------------

    def train_round(self) -> None:
        r = self.state.round_index
        log.info("round %d: segmentation phase (%d iters)", r, self.plan.seg_iters)
        self._phase_seg(r)
        log.info("round %d: fusion phase (%d iters)", r, self.plan.fusion_iters)
        self._phase_fusion(r)
        self.state.round_index += 1

    def train(self) -> Path:
        ckpt_dir = self.run_dir / "checkpoints"
        try:
            while self.state.round_index < self.plan.rounds:
                self.train_round()
                self._log_fh.flush()
                save_state(self.state, ckpt_dir / f"round_{self.state.round_index}")
            final = save_state(self.state, ckpt_dir / "final")
        finally:
            self.close()
        return final
