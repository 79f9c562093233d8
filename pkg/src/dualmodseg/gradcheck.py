"""Finite-difference verification of the analytic gradients of the total loss.

Central differences in float64 on a fixed-seed micro-batch. For each
parameter tensor a deterministic sample of coordinates is perturbed; the
reported relative error per coordinate is |a - f| / max(|a|, |f|, floor)
with floor 1e-2, i.e. an absolute tolerance of tolerance * floor for
near-zero gradients, following standard gradcheck practice.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch

from .losses import alpha_at, consistency_loss, make_pseudo_labels, supervised_loss, total_loss
from .synthetic import SynthSpec, generate_dataset
from .trainer import TrainConfig, build_model

REL_ERR_FLOOR = 1e-2


@dataclass(frozen=True)
class GradCheckGroup:
    name: str
    max_rel_err: float
    coords_checked: int


@dataclass(frozen=True)
class GradCheckReport:
    groups: tuple[GradCheckGroup, ...]
    max_rel_err: float
    tolerance: float
    step: float
    stop_gradient_ok: bool

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance and self.stop_gradient_ok

    def to_text(self) -> str:
        lines = [f"{'parameter group':<40}{'max rel err':<14}{'checked':<8}"]
        for g in sorted(self.groups, key=lambda g: -g.max_rel_err):
            lines.append(f"{g.name:<40}{g.max_rel_err:<14.3e}{g.coords_checked:<8}")
        lines.append(
            f"max relative error {self.max_rel_err:.3e} "
            f"(tolerance {self.tolerance:.1e}, step {self.step:.1e}), "
            f"stop-gradient {'ok' if self.stop_gradient_ok else 'VIOLATED'}"
        )
        return "\n".join(lines) + "\n"


def tiny_config(**overrides) -> TrainConfig:
    """The default gradient-check model: 2 stages, width 4, 8^3 patches."""
    base = dict(
        max_iters=1,
        batch_size=2,
        labeled_per_batch=1,
        patch_shape=(8, 8, 8),
        num_stages=2,
        base_channels=4,
        num_classes=2,
        eval_every=0,
        checkpoint_every=0,
        mmf_enabled=True,
        mae_enabled=True,
        mcml_enabled=True,
        seed=0,
    )
    base.update(overrides)
    return TrainConfig(**base)


def _micro_batch(cfg: TrainConfig, n_labeled: int, n_unlabeled: int, data_seed: int):
    spec = SynthSpec(shape=cfg.patch_shape, num_blobs=1, noise_sigma=0.1, seed=data_seed)
    samples = generate_dataset(n_labeled + n_unlabeled, data_seed, spec)
    to_t = lambda arr: torch.from_numpy(np.array(arr))
    x_a = torch.stack([to_t(s.vol_a.voxels) for s in samples]).unsqueeze(1).double()
    x_b = torch.stack([to_t(s.vol_b.voxels) for s in samples]).unsqueeze(1).double()
    labels = torch.stack([to_t(s.mask.labels) for s in samples[:n_labeled]]).long()
    return x_a, x_b, labels


def check_gradients(
    cfg: TrainConfig | None = None,
    model: torch.nn.Module | None = None,
    n_labeled: int = 1,
    n_unlabeled: int = 1,
    step: float = 1e-3,
    tolerance: float = 1e-3,
    coords_per_tensor: int = 8,
    data_seed: int = 20,
) -> GradCheckReport:
    """Compare autograd gradients of the total loss with central differences.

    Runs the model in eval mode (dropout off) so the loss is a deterministic
    function of the parameters. mcml pseudo-label paths are also verified to
    carry exactly zero gradient.
    """
    cfg = cfg or tiny_config()
    if model is None:
        torch.manual_seed(cfg.seed)
        model = build_model(cfg)
    model = model.double()
    x_a, x_b, labels = _micro_batch(cfg, n_labeled, n_unlabeled, data_seed)
    alpha = alpha_at(0, cfg.alpha, cfg.alpha_rampup_iters)
    use_unlabeled = cfg.mcml_enabled and n_unlabeled > 0

    model.eval()

    def compute_loss():
        prob_a, prob_b = model(x_a, x_b)
        sup = supervised_loss(prob_a[:n_labeled], prob_b[:n_labeled], labels)
        if use_unlabeled:
            pl = make_pseudo_labels(prob_a[n_labeled:], prob_b[n_labeled:])
            cons = consistency_loss(prob_a[n_labeled:], prob_b[n_labeled:], pl)
        else:
            pl, cons = None, torch.zeros((), dtype=torch.float64)
        return total_loss(sup, cons, alpha).total, pl

    loss, pl = compute_loss()
    stop_gradient_ok = pl is None or not (pl.pl_a.requires_grad or pl.pl_b.requires_grad)
    params = [(n, p) for n, p in model.named_parameters() if p.requires_grad]
    grads = torch.autograd.grad(loss, [p for _, p in params])

    coord_rng = np.random.default_rng(data_seed)
    groups = []
    for (name, p), g in zip(params, grads):
        flat = p.detach().view(-1)
        n = flat.numel()
        idx = np.arange(n) if n <= coords_per_tensor else coord_rng.choice(n, coords_per_tensor, replace=False)
        worst = 0.0
        with torch.no_grad():
            for i in idx:
                i = int(i)
                orig = flat[i].item()
                flat[i] = orig + step
                up, _ = compute_loss()
                flat[i] = orig - step
                down, _ = compute_loss()
                flat[i] = orig
                fd = (up.item() - down.item()) / (2.0 * step)
                an = g.view(-1)[i].item()
                rel = abs(an - fd) / max(abs(an), abs(fd), REL_ERR_FLOOR)
                worst = max(worst, rel)
        groups.append(GradCheckGroup(name=name, max_rel_err=worst, coords_checked=len(idx)))

    return GradCheckReport(
        groups=tuple(groups),
        max_rel_err=max(g.max_rel_err for g in groups),
        tolerance=tolerance,
        step=step,
        stop_gradient_ok=stop_gradient_ok,
    )
