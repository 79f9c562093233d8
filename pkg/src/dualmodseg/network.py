"""Dual-branch 3D encoder-decoder with per-stage fusion and modality attention.

Each modality owns a full U-Net-style branch (stride-2 downsampling encoder,
trilinear-upsampling decoder with skip connections, softmax head). When
fusion is enabled, a per-stage fusion layer (concat, two convs, sigmoid)
produces a bounded fused map that is added back into both branches' stage
features. When modality attention is enabled, per-channel weights computed
at the bottleneck rescale each branch's features before decoding.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data_model import Volume


class ShapeError(ValueError):
    """Tensor shapes violate an operation's contract."""


class ConvBlock(nn.Module):
    """Two 3x3x3 convolutions, each followed by instance norm and ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, stride=stride, padding=1)
        self.norm1 = nn.InstanceNorm3d(out_channels, affine=True)
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)
        self.norm2 = nn.InstanceNorm3d(out_channels, affine=True)

    def forward(self, x):
        x = F.relu(self.norm1(self.conv1(x)))
        return F.relu(self.norm2(self.conv2(x)))


class FusionLayer(nn.Module):
    """Concat both branches' stage features, two convs, sigmoid (bounded map)."""

    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(2 * channels, channels, 3, padding=1)
        self.conv2 = nn.Conv3d(channels, channels, 3, padding=1)

    def forward(self, f_a, f_b):
        if f_a.shape != f_b.shape:
            raise ShapeError(f"fusion inputs differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
        return torch.sigmoid(self.conv2(F.relu(self.conv1(torch.cat([f_a, f_b], dim=-4)))))


class ModalityAttention(nn.Module):
    """Bottleneck channel attention competing per channel across modalities.

    Per branch: two shape-preserving convolutions with different receptive
    fields, global average pooling, and an affine map give one logit per
    channel; the two branches' logits are normalized against each other with
    a softmax, so the weights of a channel sum to 1 across modalities.
    """

    def __init__(self, channels: int, kernel_small: int = 3, kernel_large: int = 5):
        super().__init__()
        if kernel_small % 2 == 0 or kernel_large % 2 == 0:
            raise ValueError("attention kernels must be odd to preserve shape")

        def branch_params():
            return nn.ModuleDict(
                {
                    "psi_small": nn.Conv3d(channels, channels, kernel_small, padding=kernel_small // 2),
                    "psi_large": nn.Conv3d(channels, channels, kernel_large, padding=kernel_large // 2),
                    "fc": nn.Linear(channels, channels),
                }
            )

        self.branch_a = branch_params()
        self.branch_b = branch_params()
        self.channels = channels

    def _logits(self, params: nn.ModuleDict, feats: torch.Tensor) -> torch.Tensor:
        mixed = params["psi_small"](feats) + params["psi_large"](feats)
        pooled = mixed.mean(dim=(-3, -2, -1))
        return params["fc"](pooled)

    def weights(self, f_a: torch.Tensor, f_b: torch.Tensor):
        """Per-channel weight pair (W_a, W_b) with W_a + W_b = 1 elementwise."""
        if f_a.shape != f_b.shape:
            raise ShapeError(f"attention inputs differ: {tuple(f_a.shape)} vs {tuple(f_b.shape)}")
        if f_a.shape[-4] != self.channels:
            raise ShapeError(f"expected {self.channels} channels, got {f_a.shape[-4]}")
        z = torch.stack([self._logits(self.branch_a, f_a), self._logits(self.branch_b, f_b)])
        w = torch.softmax(z, dim=0)
        return w[0], w[1]


class BranchNet(nn.Module):
    """Single-modality encoder-decoder branch producing class probabilities."""

    def __init__(
        self,
        num_classes: int = 2,
        base_channels: int = 16,
        num_stages: int = 4,
        dropout_rate: float = 0.5,
        in_channels: int = 1,
    ):
        super().__init__()
        if num_stages < 2:
            raise ValueError(f"need at least 2 stages, got {num_stages}")
        widths = [base_channels * 2 ** s for s in range(num_stages)]
        self.encoder = nn.ModuleList(
            [ConvBlock(in_channels, widths[0])]
            + [ConvBlock(widths[s - 1], widths[s], stride=2) for s in range(1, num_stages)]
        )
        self.decoder = nn.ModuleList(
            [ConvBlock(widths[s + 1] + widths[s], widths[s]) for s in range(num_stages - 2, -1, -1)]
        )
        self.head = nn.Conv3d(widths[0], num_classes, 1)
        self.num_stages = num_stages
        self.widths = widths
        self.dropout_rate = dropout_rate

    def encode(self, x) -> list[torch.Tensor]:
        feats = []
        for stage in self.encoder:
            x = stage(x)
            feats.append(x)
        return feats

    def decode(self, feats: list[torch.Tensor]) -> torch.Tensor:
        x = feats[-1]
        for block, skip in zip(self.decoder, reversed(feats[:-1])):
            x = F.interpolate(x, size=skip.shape[-3:], mode="trilinear", align_corners=False)
            x = block(torch.cat([x, skip], dim=-4))
        x = F.dropout(x, p=self.dropout_rate, training=self.training)
        return torch.softmax(self.head(x), dim=-4)

    def forward(self, x):
        return self.decode(self.encode(x))


class DualBranchNet(nn.Module):
    """Two branches coupled by optional per-stage fusion and bottleneck attention."""

    def __init__(
        self,
        num_classes: int = 2,
        base_channels: int = 16,
        num_stages: int = 4,
        mmf_enabled: bool = True,
        mae_enabled: bool = True,
        dropout_rate: float = 0.5,
        mae_kernel_small: int = 3,
        mae_kernel_large: int = 5,
        in_channels: int = 1,
    ):
        super().__init__()
        kwargs = dict(
            num_classes=num_classes,
            base_channels=base_channels,
            num_stages=num_stages,
            dropout_rate=dropout_rate,
            in_channels=in_channels,
        )
        self.branch_a = BranchNet(**kwargs)
        self.branch_b = BranchNet(**kwargs)
        self.fusion = (
            nn.ModuleList(FusionLayer(w) for w in self.branch_a.widths) if mmf_enabled else None
        )
        self.mae = (
            ModalityAttention(self.branch_a.widths[-1], mae_kernel_small, mae_kernel_large)
            if mae_enabled
            else None
        )
        self.num_stages = num_stages
        self.num_classes = num_classes
        self.mmf_enabled = mmf_enabled
        self.mae_enabled = mae_enabled

    def forward(self, x_a, x_b):
        if x_a.shape != x_b.shape:
            raise ShapeError(f"modality shapes differ: {tuple(x_a.shape)} vs {tuple(x_b.shape)}")
        divisor = 2 ** (self.num_stages - 1)
        if any(int(e) % divisor for e in x_a.shape[-3:]):
            raise ShapeError(
                f"spatial extents {tuple(x_a.shape[-3:])} must be divisible by {divisor}"
            )
        feats_a, feats_b = [], []
        h_a, h_b = x_a, x_b
        for s in range(self.num_stages):
            h_a = self.branch_a.encoder[s](h_a)
            h_b = self.branch_b.encoder[s](h_b)
            if self.fusion is not None:
                fused = self.fusion[s](h_a, h_b)
                h_a = inject_fused(h_a, fused)
                h_b = inject_fused(h_b, fused)
            feats_a.append(h_a)
            feats_b.append(h_b)
        if self.mae is not None:
            w_a, w_b = self.mae.weights(feats_a[-1], feats_b[-1])
            feats_a[-1] = mae_enhance(feats_a[-1], w_a)
            feats_b[-1] = mae_enhance(feats_b[-1], w_b)
        return self.branch_a.decode(feats_a), self.branch_b.decode(feats_b)


def _ensure_batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), True
    return x, False


def mmf_fuse(f_a: torch.Tensor, f_b: torch.Tensor, params: FusionLayer) -> torch.Tensor:
    """Fused map sigmoid(conv2(relu(conv1(concat(f_a, f_b))))), shape-preserving."""
    f_a, squeezed = _ensure_batched(f_a)
    f_b, _ = _ensure_batched(f_b)
    out = params(f_a, f_b)
    return out.squeeze(0) if squeezed else out


def inject_fused(f: torch.Tensor, fused: torch.Tensor) -> torch.Tensor:
    """Element-wise addition of the fused map into a branch's stage features."""
    if f.shape != fused.shape:
        raise ShapeError(f"inject shapes differ: {tuple(f.shape)} vs {tuple(fused.shape)}")
    return f + fused


def mae_weights(f_a: torch.Tensor, f_b: torch.Tensor, params: ModalityAttention):
    f_a, squeezed = _ensure_batched(f_a)
    f_b, _ = _ensure_batched(f_b)
    w_a, w_b = params.weights(f_a, f_b)
    if squeezed:
        return w_a.squeeze(0), w_b.squeeze(0)
    return w_a, w_b


def mae_enhance(f: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Scale channel c by 2 * w[c]; factor 2 keeps neutral weights magnitude-preserving."""
    if w.shape[-1] != f.shape[-4]:
        raise ShapeError(f"{w.shape[-1]} weights for {f.shape[-4]} channels")
    return 2.0 * w[..., :, None, None, None] * f


def _as_input_tensor(x, ref: torch.Tensor) -> torch.Tensor:
    if isinstance(x, Volume):
        x = np.array(x.voxels)  # frozen array, copy before torch sees it
    t = torch.as_tensor(x, dtype=ref.dtype, device=ref.device)
    if t.dim() == 3:
        t = t.unsqueeze(0)
    return t


def forward_dual(model: DualBranchNet, x_a, x_b, train_mode: bool = False):
    """Run both branches on one patch pair; returns (C, D, H, W) probability maps.

    Accepts Volume, ndarray, or tensor inputs. Dropout before the output
    heads is active only when train_mode is set.
    """
    ref = next(model.parameters())
    t_a = _as_input_tensor(x_a, ref).unsqueeze(0)
    t_b = _as_input_tensor(x_b, ref).unsqueeze(0)
    was_training = model.training
    model.train(train_mode)
    try:
        if train_mode:
            prob_a, prob_b = model(t_a, t_b)
        else:
            with torch.no_grad():
                prob_a, prob_b = model(t_a, t_b)
    finally:
        model.train(was_training)
    return prob_a.squeeze(0), prob_b.squeeze(0)


def param_count(model: nn.Module) -> int:
    """Total learnable scalar count."""
    return sum(p.numel() for p in model.parameters())
