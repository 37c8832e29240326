"""Training loop, sliding-window evaluation and ablation runs."""

from __future__ import annotations

import csv
import io
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import torch

from .config import TrainConfig, config_from_dict, deep_merge
from .contrastive import ContrastiveModule
from .data import BatchStream, Case, Dataset, generate_synthetic, load_manifest, slice_cases, zscore
from .errors import NumericalAbort
from .metrics import aggregate, evaluate_case
from .model import DualDecoderUNet, load_checkpoint, save_checkpoint
from .objective import LossTerms, one_hot, ramp_weight, total_loss

log = logging.getLogger(__name__)

LOSS_CSV_COLUMNS = ["iteration", "lr", "dice", "pos_f", "pos_b", "neg", "contra", "consist",
                    "lambda_contra", "lambda_consist", "total"]


@dataclass
class RunRecord:
    config_hash: str
    losses: List[Dict[str, float]] = field(default_factory=list)
    evals: List[Dict[str, float]] = field(default_factory=list)
    checkpoints: Dict[str, str] = field(default_factory=dict)
    wall_clock: float = 0.0
    net: Optional[torch.nn.Module] = field(default=None, repr=False, compare=False)

    def append_loss(self, row: Dict[str, float]) -> None:
        self.losses.append(dict(row))

    @property
    def final_metrics(self) -> Dict[str, float]:
        return self.evals[-1] if self.evals else {}

    def loss_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(LOSS_CSV_COLUMNS)
        for row in self.losses:
            writer.writerow([row["iteration"]] + [repr(float(row[c])) for c in LOSS_CSV_COLUMNS[1:]])
        return buf.getvalue()

    def summary(self) -> Dict:
        return {"config_hash": self.config_hash, "evals": self.evals,
                "checkpoints": self.checkpoints, "wall_clock": self.wall_clock,
                "iterations": len(self.losses)}


def learning_rate(cfg: TrainConfig, iteration: int) -> float:
    if cfg.lr_schedule == "constant":
        return cfg.lr
    return cfg.lr * (1.0 - iteration / cfg.iterations) ** cfg.lr_power


def build_dataset(cfg: TrainConfig) -> Dataset:
    d = cfg.data
    cases = generate_synthetic(d.synth) if d.source == "synthetic" else load_manifest(d.manifest)
    if d.slice_axis is not None:
        cases = slice_cases(cases, d.slice_axis)
    return Dataset(cases, d.labeled_fraction, d.num_test, d.split_seed)


def build_contrastive(cfg: TrainConfig) -> ContrastiveModule:
    c = cfg.contra
    channels = cfg.model.feature_channels if c.feature_tap == "encoder" else cfg.model.base_channels
    return ContrastiveModule(channels, c.proj_dim, c.alpha, c.loss, c.rank_direction,
                             c.temperature, c.mask_resample)


def _seed_everything(seed: int, threads: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2 ** 32)
    torch.set_num_threads(threads)
    torch.use_deterministic_algorithms(True)


# --------------------------------------------------------------------------
# inference


def _window_starts(size: int, patch: int, stride: int) -> List[int]:
    if size <= patch:
        return [0]
    starts = list(range(0, size - patch + 1, stride))
    if starts[-1] != size - patch:
        starts.append(size - patch)
    return starts


@torch.no_grad()
def sliding_window_predict(net: DualDecoderUNet, image: np.ndarray, patch: Sequence[int],
                           stride: Optional[int] = None, fusion: str = "mean") -> np.ndarray:
    """Class probabilities (K, *shape) stitched from overlapping patches, overlaps averaged."""
    patch = tuple(patch)
    shape = image.shape
    pad = [(0, max(0, p - s)) for s, p in zip(shape, patch)]
    padded = np.pad(image, pad, mode="constant")
    stride = stride or max(1, min(patch) // 2)
    grids = [_window_starts(s, p, stride) for s, p in zip(padded.shape, patch)]
    probs = np.zeros((net.cfg.out_channels,) + padded.shape, dtype=np.float64)
    counts = np.zeros(padded.shape, dtype=np.float64)
    was_training = net.training
    net.eval()
    for start in np.stack(np.meshgrid(*grids, indexing="ij"), -1).reshape(-1, len(shape)):
        sl = tuple(slice(int(b), int(b) + p) for b, p in zip(start, patch))
        x = torch.from_numpy(np.ascontiguousarray(padded[sl], dtype=np.float32))[None, None]
        out = net(x)
        p = {"mean": out.mean_prob, "decoder1": out.prob1, "decoder2": out.prob2}[fusion]
        probs[(slice(None),) + sl] += p[0].double().numpy()
        counts[sl] += 1.0
    net.train(was_training)
    probs /= counts
    crop = tuple(slice(0, s) for s in shape)
    return probs[(slice(None),) + crop]


def evaluate_net(net: DualDecoderUNet, cases: Sequence[Case], cfg: TrainConfig) -> Dict:
    rows = []
    for case in cases:
        prob = sliding_window_predict(net, zscore(case.image), cfg.batch.patch,
                                      cfg.inference.stride, cfg.inference.fusion)
        pred = prob.argmax(axis=0)
        for r in evaluate_case(pred, case.label, cfg.model.num_classes, case.spacing):
            rows.append({"case_id": case.case_id, **r})
    spacing = sorted({tuple(c.spacing) for c in cases})
    return {"rows": rows, "aggregate": aggregate(rows), "spacing": [list(s) for s in spacing],
            "units": "mm"}


def write_report(report: Dict, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["case_id", "class", "dice", "asd"])
        for r in report["rows"]:
            writer.writerow([r["case_id"], r["class"], repr(r["dice"]), repr(r["asd"])])
    with open(json_path, "w") as fh:
        json.dump({k: report[k] for k in ("aggregate", "spacing", "units")}, fh, indent=2)


def evaluate(checkpoint, dataset: Dataset, cfg: TrainConfig, out_dir=None) -> Dict:
    """Evaluate a checkpoint on the dataset's test split."""
    net, _, _ = load_checkpoint(checkpoint, expect=cfg.model)
    report = evaluate_net(net, dataset.test_cases(), cfg)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(report, out / "metrics.csv", out / "metrics.json")
    return report


# --------------------------------------------------------------------------
# training


def _contrastive_masks(batch, out, cfg: TrainConfig) -> torch.Tensor:
    num_channels = cfg.model.out_channels
    gt = one_hot(batch.label, num_channels).to(out.prob1.dtype)
    pred = out.mean_prob if cfg.contra.mask_grad else out.mean_prob.detach()
    flags = batch.labeled.view(-1, *([1] * (gt.dim() - 1)))
    return torch.where(flags, gt, pred), gt


def train_step(net, contra_module, batch, cfg: TrainConfig, iteration: int) -> LossTerms:
    out = net(batch.image)
    bad = {name: float("nan") for name, t in (("features", out.features), ("prob1", out.prob1),
                                               ("prob2", out.prob2)) if not torch.isfinite(t).all()}
    if bad:
        raise NumericalAbort(iteration, bad)
    masks, gt = _contrastive_masks(batch, out, cfg)
    ramp = ramp_weight(iteration, cfg.loss.ramp_length, cfg.loss.ramp)
    contra = None
    if cfg.contra.enabled:
        feats = out.features if cfg.contra.feature_tap == "encoder" else out.decoder_features
        contra = contra_module(feats, masks)
    return total_loss(out, gt, batch.labeled, contra,
                      cfg.loss.lambda_contra * ramp, cfg.loss.lambda_consist * ramp)


def train(cfg: TrainConfig, dataset: Optional[Dataset] = None) -> RunRecord:
    """Run the full optimisation loop; writes artefacts when ``cfg.out_dir`` is set.

    Raises:
      NumericalAbort: on a non-finite loss.
    """
    t0 = time.perf_counter()
    _seed_everything(cfg.seed, cfg.threads)
    dataset = dataset if dataset is not None else build_dataset(cfg)
    pools = dataset.train_pools()
    test_cases = dataset.test_cases()

    net = DualDecoderUNet(cfg.model)
    contra_module = build_contrastive(cfg)
    params = list(net.parameters()) + list(contra_module.parameters())
    opt = torch.optim.SGD(params, lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay)

    out_dir = Path(cfg.out_dir) if cfg.out_dir else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        with open(out_dir / "config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2, default=list)

    record = RunRecord(cfg.config_hash())
    best = -1.0
    stream = BatchStream(pools, cfg.batch, cfg.seed, cfg.num_workers)
    batches = iter(stream)
    try:
        for it in range(cfg.iterations):
            lr = learning_rate(cfg, it)
            for group in opt.param_groups:
                group["lr"] = lr
            terms = train_step(net, contra_module, next(batches), cfg, it)
            row = {"iteration": it, "lr": lr, **terms.as_dict()}
            if not terms.is_finite():
                raise NumericalAbort(it, row)
            if not terms.check_additivity():
                raise AssertionError(f"loss additivity violated at iteration {it}: {row}")
            record.append_loss(row)
            opt.zero_grad(set_to_none=True)
            terms.total.backward()
            if cfg.grad_clip is not None:
                torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
            opt.step()

            last = it + 1 == cfg.iterations
            if test_cases and ((it + 1) % cfg.eval_every == 0 or last):
                agg = evaluate_net(net, test_cases, cfg)["aggregate"]
                record.evals.append({"iteration": it + 1, **agg})
                log.info("iter %d  total %.4f  test dice %.4f", it + 1, row["total"], agg["dice_mean"])
                if out_dir is not None and agg["dice_mean"] > best:
                    best = agg["dice_mean"]
                    path = out_dir / "best.pt"
                    save_checkpoint(path, net, _prefixed(contra_module), {"iteration": it + 1, **agg})
                    record.checkpoints["best"] = str(path)
    finally:
        stream.close()

    record.wall_clock = time.perf_counter() - t0
    if out_dir is not None:
        path = out_dir / "last.pt"
        save_checkpoint(path, net, _prefixed(contra_module), {"iteration": cfg.iterations})
        record.checkpoints["last"] = str(path)
        (out_dir / "losses.csv").write_text(record.loss_csv())
        with open(out_dir / "record.json", "w") as fh:
            json.dump(record.summary(), fh, indent=2)
    record.net = net
    return record


def _prefixed(module: torch.nn.Module) -> Dict[str, torch.Tensor]:
    return {f"contra.{k}": v for k, v in module.state_dict().items()}


# --------------------------------------------------------------------------
# ablation


def ablate(matrix: Dict, dataset: Optional[Dataset] = None, out_dir=None) -> List[Dict]:
    """Train every variant over every seed and tabulate mean/std final test metrics.

    ``matrix`` holds ``base`` (config mapping), ``variants`` (name -> overrides)
    and ``seeds`` (list) or ``repeats`` (int).
    """
    variants = matrix.get("variants") or {}
    if len(variants) < 2:
        raise ValueError("an ablation needs at least two variants")
    seeds = matrix.get("seeds") or list(range(int(matrix.get("repeats", 3))))
    base = matrix.get("base") or {}
    if dataset is None:
        dataset = build_dataset(config_from_dict(base, env={}))
    rows = []
    for name, overrides in variants.items():
        dice, dist = [], []
        for seed in seeds:
            raw = deep_merge(deep_merge(base, overrides or {}), {"seed": seed})
            if out_dir is not None:
                raw["out_dir"] = str(Path(out_dir) / name / f"seed{seed}")
            cfg = config_from_dict(raw, env={})
            final = train(cfg, dataset).final_metrics
            dice.append(final["dice_mean"])
            dist.append(final["asd_mean"])
        rows.append({
            "variant": name, "runs": len(seeds),
            "dice_mean": float(np.mean(dice)), "dice_std": float(np.std(dice)),
            "asd_mean": float(np.nanmean(dist)), "asd_std": float(np.nanstd(dist)),
            "dice_per_seed": dice,
        })
    if out_dir is not None:
        write_ablation_csv(rows, Path(out_dir) / "ablation.csv")
    return rows


def write_ablation_csv(rows: List[Dict], path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["variant", "runs", "dice_mean", "dice_std", "asd_mean", "asd_std"])
        for r in rows:
            writer.writerow([r["variant"], r["runs"], f"{r['dice_mean']:.6f}", f"{r['dice_std']:.6f}",
                             f"{r['asd_mean']:.6f}", f"{r['asd_std']:.6f}"])


def format_table(rows: List[Dict]) -> str:
    lines = [f"{'variant':<16} {'Dice (%)':>16} {'ASD':>16}"]
    for r in rows:
        lines.append(f"{r['variant']:<16} {100 * r['dice_mean']:>8.2f} ± {100 * r['dice_std']:<5.2f} "
                     f"{r['asd_mean']:>8.2f} ± {r['asd_std']:<5.2f}")
    return "\n".join(lines)
