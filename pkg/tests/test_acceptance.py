"""End-to-end acceptance checks.

Each test prints one ``[ACCEPTANCE] criterion n (<name>): PASS|FAIL`` line.
The overfit training run is shared between the later criteria through
session-scoped fixtures, so the whole suite performs one full desk-profile
run, one identically-seeded repeat and one resumed half-run.
"""

from __future__ import annotations

import csv
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from fuseseg.config import Config, desk_config
from fuseseg.data.dataset import PairDataset
from fuseseg.data.images import luma
from fuseseg.data.synth import SynthSpec, write_dataset
from fuseseg.losses import loss_fusion, loss_grad, loss_mse, loss_seg, loss_ssim
from fuseseg.metrics import class_scores, confusion, entropy, scd, sd, sf
from fuseseg.training import ModelBundle, Trainer, TrainState, load_state, save_state
from fuseseg.weighting import dynamic_weights

# ---------------------------------------------------------------------------
# Reporting


@pytest.fixture()
def announce(capsys, request):
    """Yield nothing; on exit print the criterion verdict uncaptured."""
    verdict = {"ok": False}
    yield verdict
    num, name = request.node.get_closest_marker("criterion").args
    with capsys.disabled():
        print(f"[ACCEPTANCE] criterion {num} ({name}): {'PASS' if verdict['ok'] else 'FAIL'}")


criterion = pytest.mark.criterion


# ---------------------------------------------------------------------------
# Shared overfit artifacts (criteria 5-7)


def _desk_dataset(tmp_path_factory) -> tuple[Config, str]:
    cfg = desk_config()
    root = tmp_path_factory.mktemp("desk_data") / "data"
    spec = SynthSpec(
        image_size=cfg.synth.image_size,
        num_classes=cfg.num_classes,
        shapes_min=cfg.synth.shapes_min,
        shapes_max=cfg.synth.shapes_max,
        thermal_classes=cfg.synth.thermal_classes,
        visible_corruption=cfg.synth.visible_corruption,
        seed=cfg.seed,
    )
    write_dataset(root, spec, cfg.synth.train_scenes, cfg.data.ignore_index)
    cfg.data.root = str(root)
    return cfg, str(root)


def _train(cfg: Config, root: str, run_dir: Path) -> float:
    dataset = PairDataset(root, cfg.num_classes, cfg.data.ignore_index)
    start = time.monotonic()
    Trainer(TrainState.new(cfg), dataset, run_dir).train()
    return time.monotonic() - start


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory):
    cfg, root = _desk_dataset(tmp_path_factory)
    run_dir = tmp_path_factory.mktemp("overfit") / "run_a"
    duration = _train(cfg, root, run_dir)
    return {"cfg": cfg, "root": root, "run_dir": run_dir, "duration": duration}


@pytest.fixture(scope="session")
def overfit_eval(overfit_run):
    cfg = overfit_run["cfg"]
    dataset = PairDataset(overfit_run["root"], cfg.num_classes, cfg.data.ignore_index)
    state = load_state(overfit_run["run_dir"] / "checkpoints" / "final")
    cm = np.zeros((cfg.num_classes, cfg.num_classes), dtype=np.int64)
    thermal_vals = []
    for i in range(len(dataset)):
        pair, label = dataset[i]
        x = torch.from_numpy(luma(pair.visible))[None, None]
        y = torch.from_numpy(pair.infrared.pixels)[None, None]
        with torch.no_grad():
            u, _ = state.bundle.fusion(x, y, state.bundle.segnet)
            logits = state.bundle.segnet(u.repeat(1, 3, 1, 1))
        pred = logits.argmax(dim=1)[0].numpy().astype(np.int64)
        cm += confusion(pred, label.classes, cfg.num_classes, cfg.data.ignore_index)
        mask = np.isin(label.classes, cfg.synth.thermal_classes)
        if mask.any():
            thermal_vals.append(u[0, 0].numpy()[mask])
    rows = [r for r in csv.DictReader(open(overfit_run["run_dir"] / "training_log.csv"))
            if r["phase"] == "fusion"]
    lf = [float(r["l_ssim"]) + float(r["l_mse"]) + cfg.loss.eta * float(r["l_grad"]) for r in rows]
    ipe = math.ceil(len(dataset) / cfg.schedule.batch_size)
    return {
        "scores": class_scores(cm),
        "thermal_mean": float(np.mean(np.concatenate(thermal_vals))),
        "first_epoch_lf": float(np.mean(lf[:ipe])),
        "final_epoch_lf": float(np.mean(lf[-ipe:])),
    }


# ---------------------------------------------------------------------------
# Criterion 1 - identity at initialization


@criterion(1, "identity at init")
def test_interaction_identity_at_init(announce):
    start = time.monotonic()
    cfg = desk_config()
    bundle = ModelBundle.build(cfg)
    gen = torch.Generator().manual_seed(11)
    x = torch.rand(2, 1, 96, 96, generator=gen)
    y = torch.rand(2, 1, 96, 96, generator=gen)
    with torch.no_grad():
        u_bypassed, _ = bundle.fusion(x, y, bundle.segnet, use_interaction=False)
        u_enabled, _ = bundle.fusion(x, y, bundle.segnet, use_interaction=True)
    elapsed = time.monotonic() - start
    assert torch.equal(u_bypassed, u_enabled), "outputs differ at initialization"
    assert elapsed < 10.0, f"identity check took {elapsed:.1f}s"
    announce["ok"] = True


# ---------------------------------------------------------------------------
# Criterion 2 - finite-difference gradient suite

EPS = 1e-3
RTOL = 1e-2


def _fd_pixels(fn, u: torch.Tensor, picks: int = 8) -> None:
    u = u.clone().requires_grad_(True)
    fn(u).backward()
    gen = np.random.Generator(np.random.Philox(key=[2, 2]))
    with torch.no_grad():
        for _ in range(picks):
            i = int(gen.integers(u.shape[0]))
            j = int(gen.integers(u.shape[1]))
            up, um = u.detach().clone(), u.detach().clone()
            up[i, j] += EPS
            um[i, j] -= EPS
            fd = (float(fn(up)) - float(fn(um))) / (2 * EPS)
            an = float(u.grad[i, j])
            assert an == pytest.approx(fd, rel=RTOL, abs=1e-6), f"pixel ({i},{j}): {an} vs {fd}"


def _fd_weight(objective, param: torch.Tensor, label: str) -> None:
    grad = param.grad
    assert grad is not None and float(grad.abs().max()) > 0, f"{label}: no gradient signal"
    flat = grad.reshape(-1)
    idx = int(flat.abs().argmax())
    with torch.no_grad():
        base = param.reshape(-1)[idx].item()
        param.reshape(-1)[idx] = base + EPS
        f_plus = float(objective())
        param.reshape(-1)[idx] = base - EPS
        f_minus = float(objective())
        param.reshape(-1)[idx] = base
    fd = (f_plus - f_minus) / (2 * EPS)
    an = float(flat[idx])
    assert an == pytest.approx(fd, rel=RTOL, abs=1e-7), f"{label}: analytic {an} vs fd {fd}"


@criterion(2, "finite-difference gradients")
def test_gradient_suite(announce):
    start = time.monotonic()
    gen = torch.Generator().manual_seed(5)
    x = torch.rand(12, 12, generator=gen, dtype=torch.float64)
    y = torch.rand(12, 12, generator=gen, dtype=torch.float64)
    u0 = torch.rand(12, 12, generator=gen, dtype=torch.float64)

    _fd_pixels(lambda u: loss_ssim(u, x, y), u0)
    _fd_pixels(lambda u: loss_mse(u, x, y, form="literal"), u0)
    _fd_pixels(lambda u: loss_mse(u, x, y, form="residual"), u0)
    _fd_pixels(lambda u: loss_grad(u, x, y), u0)

    # one sampled weight per module family, through the joint objective
    cfg = desk_config()
    cfg.segnet.depths = (1, 1, 1, 1)
    bundle = ModelBundle.build(cfg)
    bundle.segnet.double()
    bundle.fusion.double()
    with torch.no_grad():  # open the zero-initialized residual gates
        for blk in (bundle.fusion.block1, bundle.fusion.block2):
            for mlp in (blk.mlp_ir, blk.mlp_vis):
                mlp[-1].weight.uniform_(-0.3, 0.3, generator=torch.Generator().manual_seed(8))
                mlp[-1].bias.uniform_(-0.3, 0.3, generator=torch.Generator().manual_seed(9))

    xb = torch.rand(1, 1, 32, 32, generator=gen, dtype=torch.float64)
    yb = torch.rand(1, 1, 32, 32, generator=gen, dtype=torch.float64)
    labels = torch.randint(0, cfg.num_classes, (1, 32, 32), generator=gen)

    def objective():
        u, _ = bundle.fusion(xb, yb, bundle.segnet)
        logits = bundle.segnet(u.repeat(1, 3, 1, 1))
        bd = loss_fusion(u, xb, yb, eta=cfg.loss.eta, form=cfg.loss.pixel_loss_form)
        return bd.l_fusion + loss_seg(logits, labels)

    objective().backward()
    params = dict(bundle.fusion.named_parameters()) | dict(bundle.segnet.named_parameters())
    targets = {
        "drdb conv": "drdb_ir.block.convs.0.weight",
        "interaction projection": "block1.q_seg.weight",
        "interaction mlp": "block1.mlp_ir.0.weight",
        "seg encoder": "encoder.embeds.0.proj.weight",
        "seg decoder": "decoder.classify.weight",
    }
    for label, name in targets.items():
        assert name in params, f"{label}: parameter {name} not found"
        _fd_weight(objective, params[name], label)

    elapsed = time.monotonic() - start
    assert elapsed < 120.0, f"gradient suite took {elapsed:.1f}s"
    announce["ok"] = True


# ---------------------------------------------------------------------------
# Criterion 3 - dynamic weighting unit suite


@criterion(3, "dynamic weighting examples")
def test_dynamic_weighting_suite(announce):
    lam = dynamic_weights((1.0, 1.0), (1.0, 1.0))
    assert lam[0] == pytest.approx(0.5, abs=1e-6) and lam[1] == pytest.approx(0.5, abs=1e-6)

    lam = dynamic_weights((1.0, 0.0), (1.0, 1.0), temperature=1.0)
    assert lam[0] == pytest.approx(0.7310585786300049, abs=1e-6)
    assert lam[1] == pytest.approx(0.2689414213699951, abs=1e-6)

    lam = dynamic_weights((1.0, 1.0), (2.0, 1.0), temperature=1.0)
    assert lam[0] == pytest.approx(1.0, abs=1e-6) and lam[1] == pytest.approx(0.5, abs=1e-6)

    gen = np.random.Generator(np.random.Philox(key=[3, 3]))
    for _ in range(1000):
        r = tuple(gen.uniform(0.0, 5.0, size=2))
        t = float(gen.uniform(0.25, 8.0))
        lam = dynamic_weights(r, (1.0, 1.0), temperature=t)
        assert abs(sum(lam) - 1.0) < 1e-9, f"sum rule broke at rates {r}"
        bigger = dynamic_weights((r[0] + 0.5, r[1]), (1.0, 1.0), temperature=t)
        assert bigger[0] > lam[0], f"monotonicity broke at rates {r}"
        uniform = dynamic_weights(r, (1.0, 1.0), temperature=1e12)
        assert uniform[0] == pytest.approx(0.5, abs=1e-9)
        assert uniform[1] == pytest.approx(0.5, abs=1e-9)
    announce["ok"] = True


# ---------------------------------------------------------------------------
# Criterion 4 - metric oracles


def _entropy_oracle(img):
    counts = {}
    for v in img.reshape(-1):
        q = int(min(max(round(float(v) * 255.0), 0), 255))
        counts[q] = counts.get(q, 0) + 1
    n = img.size
    return -sum((c / n) * math.log2(c / n) for c in counts.values())


def _sd_oracle(img):
    vals = [float(v) * 255.0 for v in img.reshape(-1)]
    mean = sum(vals) / len(vals)
    return math.sqrt(sum((v - mean) ** 2 for v in vals) / len(vals))


def _sf_oracle(img):
    h, w = img.shape
    rf = sum((float(img[i, j]) - float(img[i, j - 1])) ** 2 for i in range(h) for j in range(1, w))
    cf = sum((float(img[i, j]) - float(img[i - 1, j])) ** 2 for i in range(1, h) for j in range(w))
    return math.sqrt(rf / (h * (w - 1)) + cf / ((h - 1) * w))


def _corr_oracle(a, b):
    a = [float(v) for v in a.reshape(-1)]
    b = [float(v) for v in b.reshape(-1)]
    ma, mb = sum(a) / len(a), sum(b) / len(b)
    da = [v - ma for v in a]
    db = [v - mb for v in b]
    va = sum(v * v for v in da)
    vb = sum(v * v for v in db)
    if va == 0.0 or vb == 0.0:
        return 0.0
    return sum(p * q for p, q in zip(da, db)) / math.sqrt(va * vb)


def _iou_oracle(pred, gt, k, ignore):
    accs, ious = [], []
    for c in range(k):
        tp = fn = fp = 0
        for p, g in zip(pred.reshape(-1), gt.reshape(-1)):
            if g == ignore:
                continue
            if g == c and p == c:
                tp += 1
            elif g == c:
                fn += 1
            elif p == c:
                fp += 1
        if tp + fn == 0:
            continue
        accs.append(tp / (tp + fn))
        ious.append(tp / (tp + fn + fp))
    return sum(accs) / len(accs), sum(ious) / len(ious)


@criterion(4, "metric oracle suite")
def test_metric_oracles(announce):
    # pinned hand examples reproduce exactly
    assert sf(np.array([[0.0, 1.0], [0.0, 1.0]])) == 1.0
    gen = np.random.Generator(np.random.Philox(key=[4, 4]))
    xb = (gen.integers(0, 2, (16, 16))).astype(np.float64)
    yb = (gen.integers(0, 2, (16, 16))).astype(np.float64)
    assert xb.std() > 0 and yb.std() > 0
    assert scd(xb + yb, xb, yb) == 2.0
    gt = np.array([[0, 0], [1, 1]])
    assert class_scores(confusion(np.zeros((2, 2), np.int64), gt, 2)).mean_iou == 0.25

    for trial in range(100):
        img = gen.random((16, 16))
        assert entropy(img) == pytest.approx(_entropy_oracle(img), rel=1e-6), f"en @{trial}"
        assert sd(img) == pytest.approx(_sd_oracle(img), rel=1e-6), f"sd @{trial}"
        assert sf(img) == pytest.approx(_sf_oracle(img), rel=1e-6), f"sf @{trial}"
        u, x, y = gen.random((3, 16, 16))
        want = _corr_oracle(u - y, x) + _corr_oracle(u - x, y)
        assert scd(u, x, y) == pytest.approx(want, rel=1e-6), f"scd @{trial}"
        pred = gen.integers(0, 4, (16, 16))
        gt = gen.integers(0, 4, (16, 16))
        gt[gen.random((16, 16)) < 0.1] = 255
        scores = class_scores(confusion(pred, gt, 4))
        want_acc, want_iou = _iou_oracle(pred, gt, 4, 255)
        assert scores.mean_acc == pytest.approx(want_acc, rel=1e-6), f"acc @{trial}"
        assert scores.mean_iou == pytest.approx(want_iou, rel=1e-6), f"iou @{trial}"
    announce["ok"] = True


# ---------------------------------------------------------------------------
# Criterion 5 - end-to-end overfit


@criterion(5, "desk-profile overfit")
def test_overfit_targets(announce, overfit_run, overfit_eval):
    assert overfit_run["duration"] <= 5400, f"run took {overfit_run['duration']:.0f}s"
    miou = overfit_eval["scores"].mean_iou
    assert miou >= 0.85, f"train mIoU {miou:.4f} < 0.85"
    first, final = overfit_eval["first_epoch_lf"], overfit_eval["final_epoch_lf"]
    assert final <= 0.5 * first, f"fusion loss {first:.4f} -> {final:.4f} missed 50% drop"
    thermal = overfit_eval["thermal_mean"]
    assert thermal >= 0.8, f"thermal-region fused intensity {thermal:.4f} < 0.8"
    announce["ok"] = True


# ---------------------------------------------------------------------------
# Criterion 6 - alternation freeze contract


@criterion(6, "phase freeze contract")
def test_freeze_contract(announce, overfit_run):
    audit = json.loads((overfit_run["run_dir"] / "freeze_audit.json").read_text())
    cfg = overfit_run["cfg"]
    assert len(audit) == 2 * cfg.schedule.rounds
    for entry in audit:
        assert entry["before"] == entry["after"], (
            f"frozen {entry['frozen_group']} changed in round {entry['round']}"
        )
    announce["ok"] = True


# ---------------------------------------------------------------------------
# Criterion 7 - reproducibility and resume


@criterion(7, "reproducibility and resume")
def test_reproducibility(announce, overfit_run, tmp_path_factory):
    cfg, root = overfit_run["cfg"], overfit_run["root"]
    log_a = (overfit_run["run_dir"] / "training_log.csv").read_bytes()

    run_b = tmp_path_factory.mktemp("repro") / "run_b"
    _train(cfg, root, run_b)
    assert (run_b / "training_log.csv").read_bytes() == log_a, "identical seeds diverged"

    final = overfit_run["run_dir"] / "checkpoints" / "final"
    state = load_state(final)
    again = tmp_path_factory.mktemp("repro") / "resaved"
    save_state(state, again)
    assert (final / "tensors.bin").read_bytes() == (again / "tensors.bin").read_bytes()
    assert (final / "manifest.json").read_bytes() == (again / "manifest.json").read_bytes()

    resumed_dir = tmp_path_factory.mktemp("repro") / "resumed"
    state = load_state(overfit_run["run_dir"] / "checkpoints" / "round_1")
    dataset = PairDataset(root, cfg.num_classes, cfg.data.ignore_index)
    Trainer(state, dataset, resumed_dir).train()
    lines_a = log_a.decode().splitlines()
    lines_r = (resumed_dir / "training_log.csv").read_text().splitlines()
    per_round = cfg.schedule.seg_iters + cfg.schedule.fusion_iters
    assert lines_r[0] == lines_a[0]
    assert lines_r[1:] == lines_a[1 + per_round :], "resumed log diverged from original"
    announce["ok"] = True
