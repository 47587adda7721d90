"""Latent diffusion over future range-image latents, with conditioning and planning.

The denoiser concatenates clean history latents with noised future latents
along time (a one-channel history/future indicator is appended so the network
can tell the slots apart), runs the dynamic-static separator and the tri-path
stack with adaptive group-norm conditioning, and reads the future slots
through a linear head to predict the injected noise. Sampling is deterministic
DDIM over a strided subset of the training schedule. A jointly trained planner
regresses future ego deltas from the history ego plus pooled history features,
so rollouts can run without ground-truth future ego.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .separator import Separator
from .tripath import TriPathStack


class NoiseSchedule:
    """Cumulative signal weights alpha_bar[0..T], strictly decreasing in (0, 1]."""

    def __init__(self, total_steps: int = 1000, kind: str = "cosine"):
        if total_steps < 1:
            raise ValueError("schedule needs at least one step")
        t = np.arange(total_steps + 1, dtype=np.float64) / total_steps
        if kind == "cosine":
            s = 0.008
            f = np.cos((t + s) / (1 + s) * np.pi / 2) ** 2
            ab = f / f[0]
        elif kind == "linear":
            betas = np.linspace(1e-4, 0.02, total_steps)
            ab = np.concatenate([[1.0], np.cumprod(1.0 - betas)])
        else:
            raise ValueError(f"unknown schedule kind {kind!r}")
        ab = np.clip(ab, 1e-8, 1.0)
        if not np.all(np.diff(ab) < 0):
            raise ValueError("alpha_bar must be strictly decreasing")
        self.total_steps = total_steps
        self.kind = kind
        self.alpha_bar = torch.from_numpy(ab.astype(np.float32))

    def gather(self, t: torch.Tensor) -> torch.Tensor:
        return self.alpha_bar.to(t.device)[t]


def add_noise(z_f: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule):
    """Closed-form forward process: sqrt(ab_t) z + sqrt(1 - ab_t) eps."""
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(z_f.shape[0])
    if torch.any(t < 1) or torch.any(t > schedule.total_steps):
        raise ValueError(f"diffusion step out of [1, {schedule.total_steps}]")
    ab = schedule.gather(t).to(z_f.dtype)
    while ab.dim() < z_f.dim():
        ab = ab.unsqueeze(-1)
    return torch.sqrt(ab) * z_f + torch.sqrt(1.0 - ab) * eps


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    """Standard sin/cos embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(t.device)
    args = t.float().unsqueeze(-1) * freqs
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ConditionEncoder(nn.Module):
    """Fuse step embedding, past/future ego deltas, and an optional BEV layout.

    The ego encoders are single affine layers over the flattened delta
    sequences; the layout runs through strided convs and global pooling. All
    branches are summed into one conditioning vector.
    """

    def __init__(self, cond_dim: int, tau_p: int, tau_f: int,
                 layout_classes: int = 3):
        super().__init__()
        self.cond_dim = cond_dim
        self.step_mlp = nn.Sequential(
            nn.Linear(cond_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim)
        )
        self.past_ego = nn.Linear(3 * tau_p, cond_dim)
        self.future_ego = nn.Linear(3 * tau_f, cond_dim)
        self.layout_net = nn.Sequential(
            nn.Conv2d(layout_classes, 8, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.Conv2d(8, 16, 4, stride=2, padding=1),
            nn.SiLU(),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.Linear(16, cond_dim),
        )
        self.layout_classes = layout_classes

    def forward(self, a_p, a_f, t, layout=None) -> torch.Tensor:
        c = self.step_mlp(sinusoidal_embedding(t, self.cond_dim))
        c = c + self.past_ego(a_p.flatten(1))
        c = c + self.future_ego(a_f.flatten(1))
        if layout is not None:
            onehot = F.one_hot(layout.long(), self.layout_classes)
            onehot = onehot.permute(0, 3, 1, 2).float()
            c = c + self.layout_net(onehot)
        return c


class AdaGroupNorm(nn.Module):
    """Group normalization with conditioning-predicted scale and shift.

    The heads are small but nonzero at init so the modulation path is live
    from the first step; with gamma(c) = beta(c) = 0 this is plain group norm.
    """

    def __init__(self, channels: int, cond_dim: int, groups: int = 8):
        super().__init__()
        if channels % groups:
            raise ValueError(f"{channels} channels not divisible by {groups} groups")
        self.groups = groups
        self.gamma = nn.Linear(cond_dim, channels)
        self.beta = nn.Linear(cond_dim, channels)
        for head in (self.gamma, self.beta):
            nn.init.normal_(head.weight, std=0.02)
            nn.init.zeros_(head.bias)

    def forward(self, f: torch.Tensor, c: torch.Tensor) -> torch.Tensor:
        # f: (B, tau, h, w, C), c: (B, cond_dim)
        x = f.permute(0, 4, 1, 2, 3)
        x = F.group_norm(x, self.groups, eps=1e-6)
        scale = (1.0 + self.gamma(c)).reshape(c.shape[0], -1, 1, 1, 1).to(x.dtype)
        shift = self.beta(c).reshape(c.shape[0], -1, 1, 1, 1).to(x.dtype)
        return (x * scale + shift).permute(0, 2, 3, 4, 1)


def agn_modulate(f: torch.Tensor, c: torch.Tensor, agn: AdaGroupNorm) -> torch.Tensor:
    """Functional form of adaptive group normalization."""
    return agn(f, c)


class Planner(nn.Module):
    """MLP over [past-ego embedding || pooled history features] -> future deltas."""

    def __init__(self, tau_p: int, tau_f: int, feature_channels: int,
                 hidden: int = 64):
        super().__init__()
        self.tau_f = tau_f
        self.ego_embed = nn.Linear(3 * tau_p, hidden)
        self.feat_embed = nn.Linear(feature_channels, hidden)
        self.mlp = nn.Sequential(
            nn.Linear(2 * hidden, hidden), nn.SiLU(), nn.Linear(hidden, 3 * tau_f)
        )

    def forward(self, a_p: torch.Tensor, pooled: torch.Tensor) -> torch.Tensor:
        h = torch.cat([self.ego_embed(a_p.flatten(1)), self.feat_embed(pooled)], dim=-1)
        return self.mlp(h).reshape(-1, self.tau_f, 3)


def planner_loss(a_f: torch.Tensor, a_f_hat: torch.Tensor) -> torch.Tensor:
    """Squared error between ground-truth and planned future ego deltas."""
    return (a_f - a_f_hat).square().mean()


def diffusion_loss(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between actual and predicted noise."""
    return (eps - eps_hat).square().mean()


@dataclass
class WorldModelConfig:
    latent_channels: int = 64
    feature_channels: int = 64
    cond_dim: int = 64
    tau_p: int = 3
    tau_f: int = 5
    n_blocks: int = 4
    window: int = 5
    d_state: int = 8
    offset_scale: float = 1.0
    agn_groups: int = 8
    planner_enabled: bool = True
    planner_hidden: int = 64
    # ablation flags: dynamic/static extractors, deformable branches, gating
    enable_de: bool = True
    enable_se: bool = True
    enable_ddm: bool = True
    enable_sdm: bool = True
    enable_aga: bool = True


class WorldModel(nn.Module):
    """Noise predictor over (history, noised future) latent sequences."""

    def __init__(self, cfg: WorldModelConfig):
        super().__init__()
        self.cfg = cfg
        c_in = cfg.latent_channels + 1  # +1 history/future indicator channel
        self.separator = Separator(
            in_channels=c_in,
            feature_channels=cfg.feature_channels,
            window=cfg.window,
            enable_dynamic=cfg.enable_de,
            enable_static=cfg.enable_se,
            gated=cfg.enable_aga,
        )
        self.stack = TriPathStack(
            cfg.feature_channels,
            n_blocks=cfg.n_blocks,
            d_state=cfg.d_state,
            offset_scale=cfg.offset_scale,
            enable_dynamic=cfg.enable_ddm and cfg.enable_de,
            enable_static=cfg.enable_sdm and cfg.enable_se,
            gated=cfg.enable_aga,
            make_modulation=lambda: AdaGroupNorm(
                cfg.feature_channels, cfg.cond_dim, cfg.agn_groups
            ),
        )
        self.head = nn.Linear(cfg.feature_channels, cfg.latent_channels)
        self.cond_encoder = ConditionEncoder(cfg.cond_dim, cfg.tau_p, cfg.tau_f)
        self.planner = (
            Planner(cfg.tau_p, cfg.tau_f, cfg.feature_channels, cfg.planner_hidden)
            if cfg.planner_enabled
            else None
        )

    def _with_indicator(self, z: torch.Tensor, n_history: int) -> torch.Tensor:
        flag = torch.zeros(
            z.shape[:-1] + (1,), dtype=z.dtype, device=z.device
        )
        flag[:, n_history:] = 1.0
        return torch.cat([z, flag], dim=-1)

    def backbone(self, z_all: torch.Tensor, n_history: int, cond):
        """Separator + tri-path stack over an indicator-tagged latent sequence."""
        z_in = self._with_indicator(z_all, n_history)
        f_g, _, f_d, f_s = self.separator(z_in)
        return self.stack(f_g, f_d, f_s, cond=cond)

    def forward(self, z_f_t, z_p, t, cond):
        """Predict the injected noise; history latents pass through clean.

        Returns (eps_hat, pooled) where pooled is the spatio-temporal mean of
        the refined features over the history slots (the planner's input).
        """
        if z_p.shape[2:] != z_f_t.shape[2:]:
            raise ValueError("history and future latent grids disagree in shape")
        tau_p = z_p.shape[1]
        z_all = torch.cat([z_p, z_f_t], dim=1)
        f_out = self.backbone(z_all, tau_p, cond)
        eps_hat = self.head(f_out[:, tau_p:])
        pooled = f_out[:, :tau_p].mean(dim=(1, 2, 3))
        return eps_hat, pooled

    def plan(self, z_p: torch.Tensor, a_p: torch.Tensor) -> torch.Tensor:
        """Plan future ego deltas from history only (no future ego is read)."""
        if self.planner is None:
            raise RuntimeError("planner head is disabled in this configuration")
        zeros_f = torch.zeros(z_p.shape[0], self.cfg.tau_f, 3, device=z_p.device)
        t0 = torch.zeros(z_p.shape[0], dtype=torch.long, device=z_p.device)
        cond = self.cond_encoder(a_p, zeros_f, t0)
        f_out = self.backbone(z_p, z_p.shape[1], cond)
        pooled = f_out.mean(dim=(1, 2, 3))
        return self.planner(a_p, pooled)


def predict_noise(model: WorldModel, z_f_t, z_p, t, cond):
    """Spec-facing alias for the world model forward pass."""
    return model(z_f_t, z_p, t, cond)


def ddim_sample(
    model: WorldModel,
    schedule: NoiseSchedule,
    z_p: torch.Tensor,
    cond_fn,
    sample_steps: int = 50,
    generator: torch.Generator | None = None,
    x0_clip: float | None = None,
    x_init: torch.Tensor | None = None,
    t_start: int | None = None,
):
    """Deterministic DDIM sampling of future latents from standard normal.

    ``cond_fn(t_batch)`` must return the conditioning vector for a batch of
    diffusion steps (conditioning re-embeds the step each iteration). Passing
    ``x_init`` with ``t_start`` resumes denoising from a partially noised
    latent instead of pure noise.
    """
    cfg = model.cfg
    B, _, h, w, C = z_p.shape
    shape = (B, cfg.tau_f, h, w, C)
    if x_init is not None:
        x = x_init
    else:
        x = torch.randn(shape, generator=generator, dtype=z_p.dtype)
    start = schedule.total_steps if t_start is None else t_start
    times = np.linspace(start, 0, sample_steps + 1).round().astype(int)
    for i in range(sample_steps):
        t_now, t_next = int(times[i]), int(times[i + 1])
        t_batch = torch.full((B,), t_now, dtype=torch.long)
        eps_hat, _ = model(x, z_p, t_batch, cond_fn(t_batch))
        ab_now = schedule.alpha_bar[t_now]
        ab_next = schedule.alpha_bar[t_next]
        x0 = (x - torch.sqrt(1 - ab_now) * eps_hat) / torch.sqrt(ab_now)
        if x0_clip is not None:
            x0 = x0.clamp(-x0_clip, x0_clip)
        x = torch.sqrt(ab_next) * x0 + torch.sqrt(1 - ab_next) * eps_hat
        if not torch.isfinite(x).all():
            raise RuntimeError(f"non-finite latents at sampling step t={t_now}")
    return x


@dataclass
class WorldModelTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    weight_decay: float = 0.01
    planner_weight: float = 1.0
    seed: int = 0
    log_every: int = 50
    use_layout: bool = False


def train_world_model(
    windows: dict,
    model: WorldModel,
    schedule: NoiseSchedule,
    cfg: WorldModelTrainConfig,
    callback=None,
) -> dict:
    """Train on pre-windowed latents: Eq.-style noise MSE plus planner loss.

    ``windows`` holds float32 arrays: ``z`` (N, tau_p + tau_f, h, w, C),
    ``ego`` (N, tau_p + tau_f, 3), optionally ``layout`` (N, G, G). Raises on
    non-finite loss; with steps == 0 the parameters are left untouched.
    """
    z_all = torch.from_numpy(np.asarray(windows["z"], dtype=np.float32))
    ego = torch.from_numpy(np.asarray(windows["ego"], dtype=np.float32))
    layout = None
    if cfg.use_layout and "layout" in windows:
        layout = torch.from_numpy(np.asarray(windows["layout"]))
    tau_p, tau_f = model.cfg.tau_p, model.cfg.tau_f
    if z_all.shape[1] != tau_p + tau_f:
        raise ValueError(
            f"windows have {z_all.shape[1]} frames, model expects {tau_p + tau_f}"
        )
    gen = torch.Generator().manual_seed(cfg.seed)
    opt = torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay
    )
    n = z_all.shape[0]
    history = {"step": [], "total": [], "diffusion": [], "planner": []}
    for step in range(cfg.steps):
        idx = torch.randint(0, n, (cfg.batch_size,), generator=gen)
        z_p = z_all[idx, :tau_p]
        z_f = z_all[idx, tau_p:]
        a_p = ego[idx, :tau_p]
        a_f = ego[idx, tau_p:]
        lay = layout[idx] if layout is not None else None
        t = torch.randint(1, schedule.total_steps + 1, (cfg.batch_size,), generator=gen)
        eps = torch.randn(z_f.shape, generator=gen)
        z_f_t = add_noise(z_f, t, eps, schedule)
        cond = model.cond_encoder(a_p, a_f, t, lay)
        eps_hat, pooled = model(z_f_t, z_p, t, cond)
        loss_d = diffusion_loss(eps, eps_hat)
        loss_p = torch.zeros(())
        if model.planner is not None:
            loss_p = planner_loss(a_f, model.planner(a_p, pooled))
        total = loss_d + cfg.planner_weight * loss_p
        if not torch.isfinite(total):
            raise RuntimeError(f"non-finite world-model loss at step {step}")
        opt.zero_grad()
        total.backward()
        opt.step()
        history["step"].append(step)
        history["total"].append(total.item())
        history["diffusion"].append(loss_d.item())
        history["planner"].append(loss_p.item())
        if callback and step % cfg.log_every == 0:
            callback(step, history)
    return history
