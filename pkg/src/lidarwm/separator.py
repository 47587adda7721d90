"""Unsupervised dynamic-static disentanglement of latent sequences.

Frame-wise differences expose moving content, a sliding temporal mean exposes
the persistent environment, and three identically shaped 3-D conv extractors
lift (Z, Z_d, Z_s) to features (F, F_d, F_s). Adaptive gated fusion blends the
triple into a generic feature F_g with data-dependent gates in [0, 1]. All
feature tensors are (B, tau, h, w, C) channel-last.
"""

from __future__ import annotations

import torch
import torch.nn as nn

DEFAULT_WINDOW = 5


def dynamic_pattern(z: torch.Tensor) -> torch.Tensor:
    """Frame-wise differences along time; the first frame maps to zeros."""
    zero = torch.zeros_like(z[:, :1])
    if z.shape[1] == 1:
        return zero
    return torch.cat([zero, z[:, 1:] - z[:, :-1]], dim=1)


def static_pattern(z: torch.Tensor, n: int = DEFAULT_WINDOW) -> torch.Tensor:
    """Temporal mean within a sliding window of size n.

    Frame i averages indices [max(0, i - n//2), min(tau, i + n//2 + 1)) with
    the realized window length as denominator.
    """
    if n < 1:
        raise ValueError(f"window must be >= 1, got {n}")
    tau = z.shape[1]
    half = n // 2
    out = []
    for i in range(tau):
        start = max(0, i - half)
        end = min(tau, i + half + 1)
        out.append(z[:, start:end].mean(dim=1))
    return torch.stack(out, dim=1)


class FeatureExtractor(nn.Module):
    """Two 3x3x3 conv layers over (time, rows, cols); channel-last in and out."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, out_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv3d(out_channels, out_channels, 3, padding=1)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        x = z.permute(0, 4, 1, 2, 3)
        x = self.conv2(self.act(self.conv1(x)))
        return x.permute(0, 2, 3, 4, 1)


class GateNet(nn.Module):
    """Small convolutional gate; sigmoid keeps outputs strictly inside (0, 1)."""

    def __init__(self, in_channels: int, gate_channels: int):
        super().__init__()
        self.conv1 = nn.Conv3d(in_channels, gate_channels, 3, padding=1)
        self.act = nn.SiLU()
        self.conv2 = nn.Conv3d(gate_channels, gate_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        g = x.permute(0, 4, 1, 2, 3)
        g = self.conv2(self.act(self.conv1(g)))
        return torch.sigmoid(g).permute(0, 2, 3, 4, 1)


class AdaptiveGatedFusion(nn.Module):
    """Two-stage gated blend: F' mixes (F_d, F_s), then F_g mixes (F, F').

    The two gates are separately parameterized networks; the first consumes
    the channel concatenation of the dynamic and static features, the second
    consumes F' alone. Either branch may be absent (ablations), in which case
    the corresponding blend degenerates to the surviving input.
    """

    def __init__(self, channels: int):
        super().__init__()
        self.gate_ds = GateNet(2 * channels, channels)
        self.gate_out = GateNet(channels, channels)

    def forward(self, f, f_d=None, f_s=None):
        if f_d is not None and f_s is not None:
            g1 = self.gate_ds(torch.cat([f_d, f_s], dim=-1))
            f_prime = (1.0 - g1) * f_d + g1 * f_s
        elif f_d is not None:
            f_prime = f_d
        elif f_s is not None:
            f_prime = f_s
        else:
            return f
        g2 = self.gate_out(f_prime)
        return (1.0 - g2) * f + g2 * f_prime


def gated_fuse(f, f_d, f_s, fusion: AdaptiveGatedFusion):
    """Functional form of the adaptive gated fusion."""
    return fusion(f, f_d, f_s)


class MeanFusion(nn.Module):
    """Plain average of the available branches (the no-gating ablation)."""

    def forward(self, f, f_d=None, f_s=None):
        side = [t for t in (f_d, f_s) if t is not None]
        if not side:
            return f
        f_prime = side[0] if len(side) == 1 else 0.5 * (side[0] + side[1])
        return 0.5 * (f + f_prime)


class Separator(nn.Module):
    """Pattern split, parallel extraction, and gated fusion in one module.

    ``enable_dynamic`` / ``enable_static`` drop the corresponding extractor
    (the ablation rows); ``gated`` switches between adaptive gated fusion and
    a plain mean.
    """

    def __init__(
        self,
        in_channels: int,
        feature_channels: int,
        window: int = DEFAULT_WINDOW,
        enable_dynamic: bool = True,
        enable_static: bool = True,
        gated: bool = True,
    ):
        super().__init__()
        self.window = window
        self.enable_dynamic = enable_dynamic
        self.enable_static = enable_static
        self.extract_g = FeatureExtractor(in_channels, feature_channels)
        self.extract_d = (
            FeatureExtractor(in_channels, feature_channels) if enable_dynamic else None
        )
        self.extract_s = (
            FeatureExtractor(in_channels, feature_channels) if enable_static else None
        )
        self.fusion = (
            AdaptiveGatedFusion(feature_channels) if gated else MeanFusion()
        )

    def extract(self, z, z_d, z_s):
        """Run the three parallel extractors on pre-computed patterns."""
        f = self.extract_g(z)
        f_d = self.extract_d(z_d) if self.extract_d is not None else None
        f_s = self.extract_s(z_s) if self.extract_s is not None else None
        return f, f_d, f_s

    def forward(self, z: torch.Tensor):
        """Latents -> (F_g, F, F_d, F_s); disabled branches come back as None."""
        z_d = dynamic_pattern(z) if self.enable_dynamic else None
        z_s = static_pattern(z, self.window) if self.enable_static else None
        f = self.extract_g(z)
        f_d = self.extract_d(z_d) if self.extract_d is not None else None
        f_s = self.extract_s(z_s) if self.extract_s is not None else None
        return self.fusion(f, f_d, f_s), f, f_d, f_s
