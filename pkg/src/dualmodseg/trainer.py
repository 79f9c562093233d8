"""Semi-supervised training loop, sliding-window evaluation, ablation harness.

SGD with momentum and poly learning-rate decay; each batch carries a fixed
number of labeled and unlabeled patches. Unlabeled elements contribute only
through the cross-modal consistency term and are skipped entirely when that
term is disabled, so they have exactly zero influence on the update.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .data_model import Batch, DataError, DatasetSplit, ModalitySample, SegMask, compose_batch
from .losses import LossBundle, alpha_at, consistency_loss, make_pseudo_labels, supervised_loss, total_loss
from .metrics import MetricsReport, evaluate_dataset
from .network import DualBranchNet
from .preprocessing import PatchSpec

CHECKPOINT_VERSION = 1
LOG_FIELDS = ("iter", "lr", "ce_a", "ce_b", "dice_a", "dice_b", "consistency", "total")


class TrainingDivergedError(RuntimeError):
    """A loss became non-finite; the run is aborted, never silently skipped."""


@dataclass(frozen=True)
class TrainConfig:
    max_iters: int = 2000
    batch_size: int = 4
    labeled_per_batch: int = 2
    lr_initial: float = 1e-2
    lr_power: float = 0.9
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 1.0
    alpha_rampup_iters: int = 0
    patch_shape: tuple[int, int, int] = (16, 16, 16)
    eval_every: int = 250
    checkpoint_every: int = 500
    seed: int = 1337
    mmf_enabled: bool = True
    mae_enabled: bool = True
    mcml_enabled: bool = True
    num_classes: int = 2
    base_channels: int = 16
    num_stages: int = 4
    dropout_rate: float = 0.5
    mae_kernel_small: int = 3
    mae_kernel_large: int = 5
    threads: int = 0
    dice_epsilon: float = 1e-5
    normalize: str = "minmax"
    ct_window_level: float = 40.0
    ct_window_width: float = 400.0
    crop_inputs: bool = False

    def __post_init__(self):
        if self.lr_initial <= 0:
            raise ValueError(f"lr_initial must be > 0, got {self.lr_initial}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (0 < self.labeled_per_batch <= self.batch_size):
            raise ValueError(
                f"labeled_per_batch must be in (0, {self.batch_size}], got {self.labeled_per_batch}"
            )
        if self.alpha < 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        object.__setattr__(self, "patch_shape", tuple(int(x) for x in self.patch_shape))


def build_model(cfg: TrainConfig) -> DualBranchNet:
    return DualBranchNet(
        num_classes=cfg.num_classes,
        base_channels=cfg.base_channels,
        num_stages=cfg.num_stages,
        mmf_enabled=cfg.mmf_enabled,
        mae_enabled=cfg.mae_enabled,
        dropout_rate=cfg.dropout_rate,
        mae_kernel_small=cfg.mae_kernel_small,
        mae_kernel_large=cfg.mae_kernel_large,
    )


def build_optimizer(model: torch.nn.Module, cfg: TrainConfig) -> torch.optim.SGD:
    return torch.optim.SGD(
        model.parameters(),
        lr=cfg.lr_initial,
        momentum=cfg.momentum,
        weight_decay=cfg.weight_decay,
    )


def resolve_threads(threads: int = 0) -> int:
    """Explicit config wins; otherwise DUALMOD_THREADS; otherwise torch default."""
    if threads > 0:
        return threads
    env = os.environ.get("DUALMOD_THREADS", "")
    if env.strip():
        return max(1, int(env))
    return torch.get_num_threads()


def lr_schedule(it: int, cfg: TrainConfig) -> float:
    """Poly decay: lr_initial * (1 - it/max_iters)^lr_power."""
    if not (0 <= it < cfg.max_iters):
        raise ValueError(f"iteration {it} outside [0, {cfg.max_iters})")
    return cfg.lr_initial * (1.0 - it / cfg.max_iters) ** cfg.lr_power


def to_tensor(arr: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    # frozen (read-only) arrays are copied so torch never aliases them
    return torch.from_numpy(np.array(arr)).to(dtype)


def batch_tensors(batch: Batch, dtype=torch.float32):
    """Stack a batch into (x_a, x_b, labels); labeled samples come first."""
    samples = batch.labeled_samples + batch.unlabeled_samples
    x_a = torch.stack([to_tensor(s.vol_a.voxels, dtype) for s in samples]).unsqueeze(1)
    x_b = torch.stack([to_tensor(s.vol_b.voxels, dtype) for s in samples]).unsqueeze(1)
    labels = torch.stack(
        [to_tensor(s.mask.labels, torch.int64) for s in batch.labeled_samples]
    )
    return x_a, x_b, labels


def train_step(
    model: DualBranchNet,
    batch: Batch,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    iteration: int,
) -> LossBundle:
    """One SGD update at the scheduled learning rate; returns the realized losses."""
    lr = lr_schedule(iteration, cfg)
    for group in optimizer.param_groups:
        group["lr"] = lr

    n_labeled = len(batch.labeled_samples)
    use_unlabeled = cfg.mcml_enabled and len(batch.unlabeled_samples) > 0
    fwd_batch = batch if use_unlabeled else Batch(batch.labeled_samples)
    dtype = next(model.parameters()).dtype
    x_a, x_b, labels = batch_tensors(fwd_batch, dtype=dtype)

    model.train(True)
    prob_a, prob_b = model(x_a, x_b)
    sup = supervised_loss(
        prob_a[:n_labeled], prob_b[:n_labeled], labels, dice_epsilon=cfg.dice_epsilon
    )
    if use_unlabeled:
        pl = make_pseudo_labels(prob_a[n_labeled:], prob_b[n_labeled:])
        cons = consistency_loss(prob_a[n_labeled:], prob_b[n_labeled:], pl)
    else:
        cons = torch.zeros((), dtype=dtype)
    bundle = total_loss(sup, cons, alpha_at(iteration, cfg.alpha, cfg.alpha_rampup_iters))

    realized = bundle.item()
    if not realized.is_finite():
        raise TrainingDivergedError(
            f"non-finite loss at iteration {iteration}: {realized}"
        )
    optimizer.zero_grad()
    bundle.total.backward()
    optimizer.step()
    return realized


def _axis_positions(size: int, patch: int) -> list[int]:
    stride = max(1, patch // 2)
    positions = list(range(0, size - patch + 1, stride))
    if positions[-1] != size - patch:
        positions.append(size - patch)
    return positions


def sliding_window_probs(
    model: DualBranchNet, sample: ModalitySample, patch_shape: Sequence[int]
):
    """Cover the volume with half-stride windows and average the probabilities.

    Returns per-branch (C, D, H, W) float arrays. Volumes smaller than the
    patch are zero-padded for inference and the output is cropped back.
    """
    patch = tuple(int(p) for p in patch_shape)
    shape = sample.shape
    padded = tuple(max(s, p) for s, p in zip(shape, patch))
    dtype = next(model.parameters()).dtype

    def prep(vox):
        pads = [(0, t - s) for s, t in zip(shape, padded)]
        arr = np.pad(vox, pads) if any(p[1] for p in pads) else vox
        return to_tensor(arr, dtype)[None, None]

    t_a, t_b = prep(sample.vol_a.voxels), prep(sample.vol_b.voxels)
    acc_a = torch.zeros((model.num_classes, *padded), dtype=dtype)
    acc_b = torch.zeros_like(acc_a)
    count = torch.zeros(padded, dtype=dtype)

    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            for z in _axis_positions(padded[0], patch[0]):
                for y in _axis_positions(padded[1], patch[1]):
                    for x in _axis_positions(padded[2], patch[2]):
                        box = (slice(z, z + patch[0]), slice(y, y + patch[1]), slice(x, x + patch[2]))
                        pa, pb = model(t_a[(..., *box)], t_b[(..., *box)])
                        acc_a[(slice(None), *box)] += pa[0]
                        acc_b[(slice(None), *box)] += pb[0]
                        count[box] += 1
    finally:
        model.train(was_training)
    acc_a /= count
    acc_b /= count
    crop = (slice(None), slice(0, shape[0]), slice(0, shape[1]), slice(0, shape[2]))
    return acc_a[crop].numpy(), acc_b[crop].numpy()


def predict_masks(
    model: DualBranchNet, samples: Sequence[ModalitySample], patch_shape, branch: str = "fused"
) -> list[SegMask]:
    """Argmax predictions from fused (averaged) or single-branch probabilities."""
    if branch not in ("fused", "a", "b"):
        raise ValueError(f"branch must be fused/a/b, got {branch!r}")
    masks = []
    for s in samples:
        prob_a, prob_b = sliding_window_probs(model, s, patch_shape)
        probs = {"fused": (prob_a + prob_b) / 2.0, "a": prob_a, "b": prob_b}[branch]
        masks.append(SegMask(np.argmax(probs, axis=0), num_classes=model.num_classes))
    return masks


def evaluate(
    model: DualBranchNet,
    samples: Sequence[ModalitySample],
    cfg: TrainConfig,
    branch: str = "fused",
    class_id: int = 1,
) -> MetricsReport:
    """Sliding-window inference and DSC/ASD aggregation over labeled samples."""
    for s in samples:
        if s.mask is None:
            raise DataError(f"evaluation sample {s.id} has no mask")
    preds = predict_masks(model, samples, cfg.patch_shape, branch=branch)
    return evaluate_dataset(
        preds,
        [s.mask for s in samples],
        [s.vol_a.spacing for s in samples],
        ids=[s.id for s in samples],
        class_id=class_id,
    )


def config_hash(cfg: TrainConfig) -> str:
    blob = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def save_checkpoint(
    path,
    model: DualBranchNet,
    optimizer: torch.optim.Optimizer,
    cfg: TrainConfig,
    iteration: int,
    data_rng: np.random.Generator,
    best_val: Optional[dict] = None,
    val_history: Optional[list] = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "iteration": iteration,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng_state": torch.get_rng_state(),
        "data_rng_state": data_rng.bit_generator.state,
        "best_val": best_val or {},
        "val_history": val_history or [],
    }
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)


def load_checkpoint(path) -> dict:
    payload = torch.load(path, weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    return payload


def restore_model(payload: dict) -> tuple[DualBranchNet, TrainConfig]:
    cfg = TrainConfig(**payload["config"])
    model = build_model(cfg)
    model.load_state_dict(payload["model_state"])
    return model, cfg


@dataclass
class TrainResult:
    checkpoint: dict
    log: list[dict]
    val_history: list[dict] = field(default_factory=list)
    best_val: dict = field(default_factory=dict)
    model: Optional[DualBranchNet] = None


def train(
    cfg: TrainConfig,
    split: DatasetSplit,
    out_dir=None,
    resume_from=None,
) -> TrainResult:
    """Run the full loop: steps, periodic validation, best/latest checkpoints.

    With out_dir set, writes CSV and JSONL loss logs, a validation log, and
    checkpoint files. Deterministic for a fixed config, seed, and thread
    count; resuming from a checkpoint continues the exact trajectory.
    """
    torch.set_num_threads(resolve_threads(cfg.threads))
    torch.manual_seed(cfg.seed)
    model = build_model(cfg)
    optimizer = build_optimizer(model, cfg)
    data_rng = np.random.default_rng(cfg.seed)
    start_iter = 0
    best_val: dict = {}
    val_history: list[dict] = []

    if resume_from is not None:
        payload = load_checkpoint(resume_from)
        model.load_state_dict(payload["model_state"])
        optimizer.load_state_dict(payload["optimizer_state"])
        torch.set_rng_state(payload["torch_rng_state"])
        data_rng.bit_generator.state = payload["data_rng_state"]
        start_iter = payload["iteration"]
        best_val = dict(payload.get("best_val", {}))
        val_history = list(payload.get("val_history", []))

    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    patch = PatchSpec(cfg.patch_shape)
    log: list[dict] = []

    for it in range(start_iter, cfg.max_iters):
        batch = compose_batch(split, cfg.batch_size, cfg.labeled_per_batch, data_rng, patch)
        try:
            bundle = train_step(model, batch, optimizer, cfg, it)
        except TrainingDivergedError:
            if out is not None:
                dump = {"iteration": it, "log_tail": log[-10:]}
                (out / "divergence_dump.json").write_text(json.dumps(dump, indent=2))
            raise
        row = {
            "iter": it,
            "lr": lr_schedule(it, cfg),
            "ce_a": bundle.ce_a,
            "ce_b": bundle.ce_b,
            "dice_a": bundle.dice_a,
            "dice_b": bundle.dice_b,
            "consistency": bundle.consistency,
            "total": bundle.total,
        }
        log.append(row)

        done = it + 1
        if cfg.eval_every > 0 and done % cfg.eval_every == 0 and split.val:
            report = evaluate(model, split.val, cfg)
            val_row = {"iter": done, "dsc_mean": report.dsc_mean, "asd_mean": report.asd_mean}
            val_history.append(val_row)
            if not best_val or report.dsc_mean > best_val["dsc_mean"]:
                best_val = dict(val_row)
                if out is not None:
                    save_checkpoint(
                        out / "checkpoints" / "best.pt",
                        model, optimizer, cfg, done, data_rng, best_val, val_history,
                    )
        if out is not None and cfg.checkpoint_every > 0 and done % cfg.checkpoint_every == 0:
            save_checkpoint(
                out / "checkpoints" / "latest.pt",
                model, optimizer, cfg, done, data_rng, best_val, val_history,
            )

    final = {
        "format_version": CHECKPOINT_VERSION,
        "config": dataclasses.asdict(cfg),
        "config_hash": config_hash(cfg),
        "iteration": cfg.max_iters,
        "model_state": model.state_dict(),
        "optimizer_state": optimizer.state_dict(),
        "torch_rng_state": torch.get_rng_state(),
        "data_rng_state": data_rng.bit_generator.state,
        "best_val": best_val,
        "val_history": val_history,
    }
    if out is not None:
        (out / "checkpoints").mkdir(exist_ok=True)
        torch.save(final, out / "checkpoints" / "final.pt")
        write_log_csv(out / "train_log.csv", log)
        write_log_jsonl(out / "train_log.jsonl", log)
        if val_history:
            with open(out / "val_log.csv", "w", newline="") as f:
                writer = csv.DictWriter(f, fieldnames=["iter", "dsc_mean", "asd_mean"])
                writer.writeheader()
                writer.writerows(val_history)
    return TrainResult(checkpoint=final, log=log, val_history=val_history,
                       best_val=best_val, model=model)


def write_log_csv(path, log: list[dict]) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(LOG_FIELDS))
        writer.writeheader()
        writer.writerows({k: row[k] for k in LOG_FIELDS} for row in log)


def write_log_jsonl(path, log: list[dict]) -> None:
    with open(path, "w") as f:
        for row in log:
            f.write(json.dumps(row) + "\n")


ABLATION_ROWS = (
    ("baseline", False, False, False),
    ("+mmf", True, False, False),
    ("+mmf+mae", True, True, False),
    ("+mmf+mcml", True, False, True),
    ("full", True, True, True),
)


@dataclass
class AblationRow:
    name: str
    mmf: bool
    mae: bool
    mcml: bool
    report_a: Optional[MetricsReport] = None
    report_b: Optional[MetricsReport] = None
    error: Optional[str] = None


@dataclass
class AblationResult:
    rows: list[AblationRow]

    def to_csv(self) -> str:
        import io as _io

        buf = _io.StringIO()
        writer = csv.writer(buf)
        writer.writerow(
            ["config", "mmf", "mae", "mcml",
             "dsc_a_mean", "dsc_a_std", "dsc_b_mean", "dsc_b_std",
             "asd_a_mean", "asd_a_std", "asd_b_mean", "asd_b_std", "error"]
        )
        for r in self.rows:
            if r.error is not None:
                writer.writerow([r.name, r.mmf, r.mae, r.mcml] + [""] * 8 + [r.error])
            else:
                writer.writerow(
                    [r.name, r.mmf, r.mae, r.mcml,
                     f"{r.report_a.dsc_mean:.4f}", f"{r.report_a.dsc_std:.4f}",
                     f"{r.report_b.dsc_mean:.4f}", f"{r.report_b.dsc_std:.4f}",
                     f"{r.report_a.asd_mean:.4f}", f"{r.report_a.asd_std:.4f}",
                     f"{r.report_b.asd_mean:.4f}", f"{r.report_b.asd_std:.4f}", ""]
                )
        return buf.getvalue()

    def to_text(self) -> str:
        header = f"{'config':<12}{'MMF':<5}{'MAE':<5}{'MCML':<6}{'DSC a':<16}{'DSC b':<16}{'ASD a':<16}{'ASD b':<16}"
        lines = [header, "-" * len(header)]
        for r in self.rows:
            flags = [("y" if v else "-") for v in (r.mmf, r.mae, r.mcml)]
            if r.error is not None:
                lines.append(f"{r.name:<12}{flags[0]:<5}{flags[1]:<5}{flags[2]:<6}failed: {r.error}")
                continue
            cells = [
                f"{rep.dsc_mean:.4f}+/-{rep.dsc_std:.4f}" for rep in (r.report_a, r.report_b)
            ] + [
                f"{rep.asd_mean:.4f}+/-{rep.asd_std:.4f}" for rep in (r.report_a, r.report_b)
            ]
            lines.append(
                f"{r.name:<12}{flags[0]:<5}{flags[1]:<5}{flags[2]:<6}"
                f"{cells[0]:<16}{cells[1]:<16}{cells[2]:<16}{cells[3]:<16}"
            )
        return "\n".join(lines) + "\n"


def run_ablation(cfg: TrainConfig, split: DatasetSplit, out_dir=None) -> AblationResult:
    """Train the five flag configurations on a shared seed and split.

    Per-row failures are recorded and remaining rows still run. Rows are
    scored per branch on the test partition.
    """
    if not split.test:
        raise DataError("ablation requires a non-empty test partition")
    rows = []
    for name, mmf, mae, mcml in ABLATION_ROWS:
        row_cfg = dataclasses.replace(cfg, mmf_enabled=mmf, mae_enabled=mae, mcml_enabled=mcml)
        row = AblationRow(name=name, mmf=mmf, mae=mae, mcml=mcml)
        try:
            row_out = None if out_dir is None else Path(out_dir) / name.replace("+", "_")
            result = train(row_cfg, split, out_dir=row_out)
            row.report_a = evaluate(result.model, split.test, row_cfg, branch="a")
            row.report_b = evaluate(result.model, split.test, row_cfg, branch="b")
        except Exception as exc:  # noqa: BLE001 - per-row isolation is the contract
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    result = AblationResult(rows=rows)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "ablation.csv").write_text(result.to_csv())
        (out / "ablation.txt").write_text(result.to_text())
    return result
