"""Tri-path deformable selective scanning over (tau, h, w, C) feature grids.

Each block builds three scan paths through the latent lattice: the generic
path is the plain t-major meshgrid flattening; the dynamic and static paths
add learned offsets predicted from the separator's guidance features (zero at
init, so an untrained block is exactly a triple standard-path scan). Features
are gathered along each path by trilinear interpolation, scanned by a
per-branch Mamba block, scattered back to their original lattice slots (paths
reorder reads, never writes), and fused by adaptive gated attention with a
residual add. Four such blocks stack by default, refining only the generic
feature while the guidance features stay fixed.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .separator import AdaptiveGatedFusion, MeanFusion
from .ssm import MambaBlock

DEFAULT_BLOCKS = 4
DEFAULT_OFFSET_SCALE = 1.0


def generic_path(tau: int, h: int, w: int, device=None, dtype=torch.float32):
    """Integer lattice coordinates flattened t-major, then rows, then cols: (L, 3)."""
    if min(tau, h, w) < 1:
        raise ValueError("lattice dims must be positive")
    tt, yy, xx = torch.meshgrid(
        torch.arange(tau, device=device),
        torch.arange(h, device=device),
        torch.arange(w, device=device),
        indexing="ij",
    )
    return torch.stack([tt, yy, xx], dim=-1).reshape(-1, 3).to(dtype)


class PathOffsetNet(nn.Module):
    """Two affine layers with a rectifier and a final Tanh; zero-initialized.

    The final layer starts at zero so the deformed path coincides with the
    generic path until training moves it. Raw offsets live in (-1, 1) per axis
    before scaling.
    """

    def __init__(self, channels: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or channels
        self.fc1 = nn.Linear(channels, hidden)
        self.fc2 = nn.Linear(hidden, 3)
        nn.init.zeros_(self.fc2.weight)
        nn.init.zeros_(self.fc2.bias)

    def forward(self, feat: torch.Tensor) -> torch.Tensor:
        # feat: (B, tau, h, w, C) -> offsets (B, L, 3)
        out = torch.tanh(self.fc2(F.relu(self.fc1(feat))))
        return out.reshape(feat.shape[0], -1, 3)


def deform_path(
    p_g: torch.Tensor,
    feat: torch.Tensor,
    net: PathOffsetNet,
    scale: float = DEFAULT_OFFSET_SCALE,
) -> torch.Tensor:
    """Generic path plus scaled learned offsets, clamped to the lattice bounds."""
    tau, h, w = feat.shape[1], feat.shape[2], feat.shape[3]
    offsets = net(feat) * scale
    p = p_g.unsqueeze(0) + offsets
    bounds = torch.tensor([tau - 1, h - 1, w - 1], dtype=p.dtype, device=p.device)
    return torch.clamp(p, torch.zeros_like(bounds), bounds)


def sample_along_path(f_g: torch.Tensor, path: torch.Tensor) -> torch.Tensor:
    """Trilinear interpolation of f_g (B, tau, h, w, C) at path coords (B|, L, 3).

    Coordinates are clamped to the lattice; integer coordinates reduce to an
    exact gather. Differentiable in both the features and the coordinates.
    """
    B, tau, h, w, C = f_g.shape
    if path.dim() == 2:
        path = path.unsqueeze(0).expand(B, -1, -1)
    sizes = (tau, h, w)
    lo, hi, frac = [], [], []
    for ax in range(3):
        coord = path[..., ax].clamp(0.0, sizes[ax] - 1)
        f0 = coord.floor()
        lo.append(f0.long().clamp(0, sizes[ax] - 1))
        hi.append((f0.long() + 1).clamp(0, sizes[ax] - 1))
        frac.append(coord - f0)

    flat = f_g.reshape(B, tau * h * w, C)
    out = torch.zeros(B, path.shape[1], C, dtype=f_g.dtype, device=f_g.device)
    for corner in range(8):
        bits = [(corner >> ax) & 1 for ax in range(3)]
        t_idx = hi[0] if bits[0] else lo[0]
        y_idx = hi[1] if bits[1] else lo[1]
        x_idx = hi[2] if bits[2] else lo[2]
        weight = (
            (frac[0] if bits[0] else 1.0 - frac[0])
            * (frac[1] if bits[1] else 1.0 - frac[1])
            * (frac[2] if bits[2] else 1.0 - frac[2])
        )
        idx = ((t_idx * h + y_idx) * w + x_idx).unsqueeze(-1).expand(-1, -1, C)
        out = out + weight.unsqueeze(-1) * torch.gather(flat, 1, idx)
    return out


class TriPathBlock(nn.Module):
    """One deformable tri-path block; see the module docstring for the flow.

    ``enable_dynamic`` / ``enable_static`` remove that branch entirely (the
    two-path and single-path ablations still run). ``gated`` selects adaptive
    gated attention over the plain mean for the re-fusion. ``modulation``, if
    given, is applied to the block input with the conditioning vector
    (adaptive group norm in the world model).
    """

    def __init__(
        self,
        channels: int,
        d_state: int = 8,
        offset_scale: float = DEFAULT_OFFSET_SCALE,
        enable_dynamic: bool = True,
        enable_static: bool = True,
        gated: bool = True,
        modulation: nn.Module | None = None,
    ):
        super().__init__()
        self.offset_scale = offset_scale
        self.modulation = modulation
        self.scan_g = MambaBlock(channels, d_state=d_state)
        self.scan_d = MambaBlock(channels, d_state=d_state) if enable_dynamic else None
        self.scan_s = MambaBlock(channels, d_state=d_state) if enable_static else None
        self.offsets_d = PathOffsetNet(channels) if enable_dynamic else None
        self.offsets_s = PathOffsetNet(channels) if enable_static else None
        self.fusion = AdaptiveGatedFusion(channels) if gated else MeanFusion()

    def branch_paths(self, f_d, f_s, shape):
        """The (p_d, p_s) scan paths for guidance features; None when disabled."""
        tau, h, w = shape
        p_g = generic_path(tau, h, w, device=self._device(), dtype=self._dtype())
        p_d = (
            deform_path(p_g, f_d, self.offsets_d, self.offset_scale)
            if self.offsets_d is not None and f_d is not None
            else None
        )
        p_s = (
            deform_path(p_g, f_s, self.offsets_s, self.offset_scale)
            if self.offsets_s is not None and f_s is not None
            else None
        )
        return p_g, p_d, p_s

    def _device(self):
        return next(self.scan_g.parameters()).device

    def _dtype(self):
        return next(self.scan_g.parameters()).dtype

    def forward(self, f_g, f_d=None, f_s=None, cond=None):
        B, tau, h, w, C = f_g.shape
        residual = f_g
        if self.modulation is not None and cond is not None:
            f_g = self.modulation(f_g, cond)
        p_g, p_d, p_s = self.branch_paths(f_d, f_s, (tau, h, w))

        # generic branch reads the lattice in standard order
        y_g = self.scan_g(f_g.reshape(B, -1, C))
        out_g = y_g.reshape(B, tau, h, w, C)

        out_d = out_s = None
        if self.scan_d is not None and p_d is not None:
            y_d = self.scan_d(sample_along_path(f_g, p_d))
            out_d = y_d.reshape(B, tau, h, w, C)
        if self.scan_s is not None and p_s is not None:
            y_s = self.scan_s(sample_along_path(f_g, p_s))
            out_s = y_s.reshape(B, tau, h, w, C)

        return residual + self.fusion(out_g, out_d, out_s)


class TriPathStack(nn.Module):
    """Stacked tri-path blocks with independent weights refining F_g only."""

    def __init__(
        self,
        channels: int,
        n_blocks: int = DEFAULT_BLOCKS,
        d_state: int = 8,
        offset_scale: float = DEFAULT_OFFSET_SCALE,
        enable_dynamic: bool = True,
        enable_static: bool = True,
        gated: bool = True,
        make_modulation=None,
    ):
        super().__init__()
        self.blocks = nn.ModuleList(
            TriPathBlock(
                channels,
                d_state=d_state,
                offset_scale=offset_scale,
                enable_dynamic=enable_dynamic,
                enable_static=enable_static,
                gated=gated,
                modulation=make_modulation() if make_modulation else None,
            )
            for _ in range(n_blocks)
        )

    def forward(self, f_g, f_d=None, f_s=None, cond=None):
        for block in self.blocks:
            f_g = block(f_g, f_d, f_s, cond=cond)
        return f_g

    def offset_heatmaps(self, f_d, f_s, shape) -> dict[str, torch.Tensor]:
        """Mean |offset| per lattice cell for each deformed branch.

        Returns per-branch (B, tau, h, w) grids averaged over the offset axes
        and the block stack (the deformation-visualization export).
        """
        tau, h, w = shape
        maps: dict[str, list[torch.Tensor]] = {"dynamic": [], "static": []}
        with torch.no_grad():
            for block in self.blocks:
                p_g, p_d, p_s = block.branch_paths(f_d, f_s, shape)
                for name, p in (("dynamic", p_d), ("static", p_s)):
                    if p is None:
                        continue
                    delta = (p - p_g.unsqueeze(0)).abs().mean(dim=-1)
                    maps[name].append(delta.reshape(-1, tau, h, w))
        return {
            name: torch.stack(grids).mean(dim=0)
            for name, grids in maps.items()
            if grids
        }
