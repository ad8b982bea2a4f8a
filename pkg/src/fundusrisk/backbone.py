"""Vision encoder: patch embedding, state-space blocks, multi-scale feature maps.

Each block runs two branches over a layer-normalized copy of its input - a
four-direction selective-scan (global context) feeding a feed-forward net, and
a spatial-attention gate (local emphasis) feeding a linear projection - sums
them, applies layer norm + channel attention, and adds the residual:

    out = x + CA(LN(FFN(SS2D(LN(x))) + proj(SA(LN(x)))))

With both branch output projections zeroed on a fresh block this is exactly
the identity map, which the tests pin down.

Layout convention: images and the emitted multi-scale maps are channels-first
(B, C, H, W); inside the encoder feature maps are channels-last (B, H, W, C)
so layer norm and linear layers act on the trailing channel axis.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import torch
from torch import nn

from .errors import ValidationError
from .scan import ScanParams, selective_scan_1d


@dataclass
class BackboneConfig:
    patch_size: int = 4
    stage_channels: tuple[int, int, int, int] = (24, 48, 96, 192)
    blocks_per_stage: tuple[int, int, int, int] = (1, 1, 2, 1)
    state_dim: int = 8
    sa_kernel: int = 7
    ca_reduction: int = 4

    def __post_init__(self):
        self.stage_channels = tuple(int(c) for c in self.stage_channels)
        self.blocks_per_stage = tuple(int(b) for b in self.blocks_per_stage)
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValidationError("stage_channels and blocks_per_stage must have 4 entries")
        if any(c <= 0 for c in self.stage_channels):
            raise ValidationError("stage widths must be positive")
        if self.patch_size <= 0 or self.state_dim <= 0:
            raise ValidationError("patch_size and state_dim must be positive")

    @property
    def embed_dim(self) -> int:
        return self.stage_channels[3]

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        return cls(**d)


class PatchEmbed(nn.Module):
    """Linear projection of non-overlapping p x p patches, then layer norm."""

    def __init__(self, patch_size: int, out_channels: int):
        super().__init__()
        self.patch_size = patch_size
        self.proj = nn.Conv2d(3, out_channels, kernel_size=patch_size, stride=patch_size)
        self.norm = nn.LayerNorm(out_channels, eps=1e-5)

    def forward(self, image):
        """(B, 3, H, W) -> channels-last tokens (B, H/p, W/p, C)."""
        _, _, h, w = image.shape
        p = self.patch_size
        if h % p or w % p:
            raise ValidationError(f"image size {h}x{w} not divisible by patch size {p}")
        x = self.proj(image).permute(0, 2, 3, 1)
        return self.norm(x)


class SS2D(nn.Module):
    """Four-direction selective scan over a feature map, merged by summation.

    Paths: row-major forward/backward and column-major forward/backward, each
    with its own scan parameters; the summed result goes through an output
    projection.
    """

    def __init__(self, channels: int, state_dim: int, scan_mode: str = "blocked"):
        super().__init__()
        self.directions = nn.ModuleList(ScanParams(channels, state_dim) for _ in range(4))
        self.out_proj = nn.Linear(channels, channels)
        self.scan_mode = scan_mode

    def merged(self, x):
        """Sum of the four directional scans, before the output projection."""
        b, h, w, c = x.shape
        row = x.reshape(b, h * w, c)
        col = x.transpose(1, 2).reshape(b, w * h, c)
        y = selective_scan_1d(row, self.directions[0], self.scan_mode)
        y = y + selective_scan_1d(row.flip(1), self.directions[1], self.scan_mode).flip(1)
        yc = selective_scan_1d(col, self.directions[2], self.scan_mode)
        yc = yc + selective_scan_1d(col.flip(1), self.directions[3], self.scan_mode).flip(1)
        y = y + yc.reshape(b, w, h, c).transpose(1, 2).reshape(b, h * w, c)
        return y.reshape(b, h, w, c)

    def forward(self, x):
        return self.out_proj(self.merged(x))


class SpatialAttention(nn.Module):
    """Per-position sigmoid gate from channel-pooled mean/max statistics."""

    def __init__(self, kernel_size: int = 7):
        super().__init__()
        self.conv = nn.Conv2d(2, 1, kernel_size, padding=kernel_size // 2)

    def gate(self, x):
        stats = torch.stack([x.mean(dim=-1), x.max(dim=-1).values], dim=1)  # (B, 2, H, W)
        return torch.sigmoid(self.conv(stats)).squeeze(1).unsqueeze(-1)     # (B, H, W, 1)

    def forward(self, x):
        return x * self.gate(x)


class ChannelAttention(nn.Module):
    """Squeeze-and-excitation: per-channel sigmoid gate from the pooled map."""

    def __init__(self, channels: int, reduction: int = 4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, channels)

    def gate(self, x):
        pooled = x.mean(dim=(1, 2))                                          # (B, C)
        return torch.sigmoid(self.fc2(torch.relu(self.fc1(pooled))))

    def forward(self, x):
        return x * self.gate(x)[:, None, None, :]


class FeedForward(nn.Module):
    def __init__(self, channels: int, expansion: int = 4):
        super().__init__()
        self.fc1 = nn.Linear(channels, expansion * channels)
        self.fc2 = nn.Linear(expansion * channels, channels)

    def forward(self, x):
        return self.fc2(torch.nn.functional.gelu(self.fc1(x)))


class VssBlock(nn.Module):
    """Two-branch state-space block; see the module docstring for the wiring."""

    def __init__(self, channels: int, state_dim: int, sa_kernel: int = 7,
                 ca_reduction: int = 4, scan_mode: str = "blocked"):
        super().__init__()
        self.ln_scan = nn.LayerNorm(channels, eps=1e-5)
        self.ln_spatial = nn.LayerNorm(channels, eps=1e-5)
        self.ln_mid = nn.LayerNorm(channels, eps=1e-5)
        self.ss2d = SS2D(channels, state_dim, scan_mode)
        self.ffn = FeedForward(channels)
        self.spatial = SpatialAttention(sa_kernel)
        self.sa_proj = nn.Linear(channels, channels)
        self.channel = ChannelAttention(channels, ca_reduction)

    def forward(self, x):
        left = self.ffn(self.ss2d(self.ln_scan(x)))
        right = self.sa_proj(self.spatial(self.ln_spatial(x)))
        return x + self.channel(self.ln_mid(left + right))


def zero_branch_output_projections(block: VssBlock) -> None:
    """Zero the final linear of each branch; a fresh block then maps x to x."""
    with torch.no_grad():
        for lin in (block.ffn.fc2, block.sa_proj):
            lin.weight.zero_()
            lin.bias.zero_()


class PatchMerge(nn.Module):
    """2x2 patch merge with a linear projection; halves H and W."""

    def __init__(self, channels: int, out_channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * channels, eps=1e-5)
        self.proj = nn.Linear(4 * channels, out_channels, bias=False)

    def forward(self, x):
        b, h, w, c = x.shape
        if h % 2 or w % 2:
            raise ValidationError(f"cannot halve odd spatial size {h}x{w}")
        x = x.reshape(b, h // 2, 2, w // 2, 2, c).permute(0, 1, 3, 2, 4, 5)
        x = x.reshape(b, h // 2, w // 2, 4 * c)
        return self.proj(self.norm(x))


@dataclass
class MultiScaleFeatures:
    """Stage outputs f1..f4 at strides 4/8/16/32, channels-first."""

    f1: torch.Tensor
    f2: torch.Tensor
    f3: torch.Tensor
    f4: torch.Tensor

    def as_tuple(self) -> tuple[torch.Tensor, ...]:
        return (self.f1, self.f2, self.f3, self.f4)


def global_avg_pool(fmap: torch.Tensor) -> torch.Tensor:
    """(B, C, H, W) -> (B, C) spatial mean."""
    return fmap.mean(dim=(2, 3))


class Backbone(nn.Module):
    """Patch embedding, four block stages with interleaved downsampling."""

    def __init__(self, cfg: BackboneConfig, scan_mode: str = "blocked"):
        super().__init__()
        self.cfg = cfg
        ch = cfg.stage_channels
        self.patch_embed = PatchEmbed(cfg.patch_size, ch[0])
        self.stages = nn.ModuleList()
        self.merges = nn.ModuleList()
        for i in range(4):
            self.stages.append(
                nn.Sequential(
                    *[
                        VssBlock(ch[i], cfg.state_dim, cfg.sa_kernel, cfg.ca_reduction, scan_mode)
                        for _ in range(cfg.blocks_per_stage[i])
                    ]
                )
            )
            if i < 3:
                self.merges.append(PatchMerge(ch[i], ch[i + 1]))

    def forward(self, image) -> MultiScaleFeatures:
        x = self.patch_embed(image)
        feats = []
        for i in range(4):
            x = self.stages[i](x)
            feats.append(x.permute(0, 3, 1, 2))
            if i < 3:
                x = self.merges[i](x)
        return MultiScaleFeatures(*feats)

    def pooled_embedding(self, image) -> torch.Tensor:
        """Spatially averaged final feature map, shape (B, embed_dim)."""
        return global_avg_pool(self.forward(image).f4)
