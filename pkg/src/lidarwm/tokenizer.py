"""LiDAR scene tokenizer: scan-based encoder, vector quantization, decoder, discriminator.

Ranges are mapped to [-1, 1] with a log scale before encoding (sky pixels sit
at +1 via the r_max sentinel). The encoder runs six pre-norm Mamba layers over
the ring-major token sequence, with spatial downsampling distributed across a
patchify stem and two stage transitions; the decoder mirrors it. Quantization
is nearest-codeword with a straight-through gradient for the decoder path and
gradient-trained codewords (no EMA), with dead codewords restarted from
encoder outputs during training.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange

from .geometry import RangeImage
from .ssm import MambaLayer

ADV_PROB_EPS = 1e-6


def normalize_ranges(r, r_min: float, r_max: float):
    """Meters -> [-1, 1] log-range; works on torch tensors and numpy arrays."""
    if isinstance(r, np.ndarray):
        r = np.clip(r, r_min, r_max)
        return 2.0 * np.log(r / r_min) / math.log(r_max / r_min) - 1.0
    r = torch.clamp(r, r_min, r_max)
    return 2.0 * torch.log(r / r_min) / math.log(r_max / r_min) - 1.0


def denormalize_ranges(y, r_min: float, r_max: float):
    """Inverse of :func:`normalize_ranges`, clamped to [r_min, r_max]."""
    scale = 0.5 * math.log(r_max / r_min)
    if isinstance(y, np.ndarray):
        return np.clip(r_min * np.exp((y + 1.0) * scale), r_min, r_max)
    return torch.clamp(r_min * torch.exp((y + 1.0) * scale), r_min, r_max)


def split_downsample(factor: int) -> tuple[int, int, int]:
    """Split a power-of-two factor into three stage strides, front-loaded."""
    if factor < 1 or factor & (factor - 1):
        raise ValueError(f"downsample factor must be a power of two, got {factor}")
    e = factor.bit_length() - 1
    base, rem = divmod(e, 3)
    return tuple(2 ** (base + (1 if i < rem else 0)) for i in range(3))


class SeqStage(nn.Module):
    """A few Mamba layers applied to the ring-major flattening of a 2-D grid."""

    def __init__(self, channels: int, n_layers: int, d_state: int):
        super().__init__()
        self.layers = nn.ModuleList(
            MambaLayer(channels, d_state=d_state) for _ in range(n_layers)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, H, W)
        h, w = x.shape[2], x.shape[3]
        seq = rearrange(x, "b c h w -> b (h w) c")
        for layer in self.layers:
            seq = layer(seq)
        return rearrange(seq, "b (h w) c -> b c h w", h=h, w=w)


class RangeEncoder(nn.Module):
    def __init__(
        self,
        latent_channels: int = 64,
        down_v: int = 4,
        down_h: int = 8,
        base_channels: int = 24,
        d_state: int = 4,
        layers_per_stage: int = 2,
    ):
        super().__init__()
        sv = split_downsample(down_v)
        sh = split_downsample(down_h)
        widths = (base_channels, (3 * base_channels) // 2, 2 * base_channels)
        self.stem = nn.Conv2d(1, widths[0], (sv[0], sh[0]), stride=(sv[0], sh[0]))
        self.stages = nn.ModuleList(
            SeqStage(c, layers_per_stage, d_state) for c in widths
        )
        self.transitions = nn.ModuleList(
            nn.Conv2d(widths[i], widths[i + 1], (sv[i + 1], sh[i + 1]),
                      stride=(sv[i + 1], sh[i + 1]))
            for i in range(2)
        )
        self.out_norm = nn.LayerNorm(widths[2])
        self.out_proj = nn.Linear(widths[2], latent_channels)

    def forward(self, r_norm: torch.Tensor) -> torch.Tensor:
        # (B, H, W) normalized ranges -> (B, h, w, C) latents
        x = self.stem(r_norm.unsqueeze(1))
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < 2:
                x = self.transitions[i](x)
        x = rearrange(x, "b c h w -> b h w c")
        return self.out_proj(self.out_norm(x))


class RangeDecoder(nn.Module):
    def __init__(
        self,
        latent_channels: int = 64,
        down_v: int = 4,
        down_h: int = 8,
        base_channels: int = 24,
        d_state: int = 4,
        layers_per_stage: int = 2,
    ):
        super().__init__()
        sv = split_downsample(down_v)
        sh = split_downsample(down_h)
        widths = (base_channels, (3 * base_channels) // 2, 2 * base_channels)
        self.in_proj = nn.Linear(latent_channels, widths[2])
        self.stages = nn.ModuleList(
            SeqStage(c, layers_per_stage, d_state) for c in reversed(widths)
        )
        self.transitions = nn.ModuleList(
            nn.ConvTranspose2d(widths[i + 1], widths[i], (sv[i + 1], sh[i + 1]),
                               stride=(sv[i + 1], sh[i + 1]))
            for i in reversed(range(2))
        )
        self.head = nn.Sequential(
            nn.ConvTranspose2d(widths[0], widths[0], (sv[0], sh[0]),
                               stride=(sv[0], sh[0])),
            nn.SiLU(),
            nn.Conv2d(widths[0], 1, 3, padding=1),
        )

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        # (B, h, w, C) -> (B, H, W) normalized ranges
        x = rearrange(self.in_proj(z), "b h w c -> b c h w")
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if i < 2:
                x = self.transitions[i](x)
        return self.head(x).squeeze(1)


class QuantizeResult(NamedTuple):
    z_st: torch.Tensor      # straight-through copy: value of z_q, gradient of z
    z_q: torch.Tensor       # raw codewords; gradients reach the codebook
    indices: torch.Tensor


class VectorQuantizer(nn.Module):
    """K x C codebook with nearest-codeword assignment, ties to the lowest index."""

    def __init__(self, codebook_size: int = 512, latent_channels: int = 64,
                 beta: float = 0.25):
        super().__init__()
        if codebook_size < 2:
            raise ValueError("codebook needs at least 2 entries")
        self.beta = beta
        self.embedding = nn.Parameter(
            torch.empty(codebook_size, latent_channels).uniform_(-0.5, 0.5)
        )

    @property
    def codebook_size(self) -> int:
        return self.embedding.shape[0]

    def assign(self, z: torch.Tensor) -> torch.Tensor:
        """Nearest-codeword indices for (..., C) latents (no gradients)."""
        if z.shape[-1] != self.embedding.shape[1]:
            raise ValueError("latent channel count does not match the codebook")
        with torch.no_grad():
            flat = z.reshape(-1, z.shape[-1])
            d = torch.cdist(flat, self.embedding.detach())
            idx = np.argmin(d.cpu().numpy(), axis=1)  # first minimum on ties
        return torch.from_numpy(idx).to(z.device).reshape(z.shape[:-1])

    def forward(self, z: torch.Tensor) -> QuantizeResult:
        indices = self.assign(z)
        z_q = self.embedding[indices]
        # bit-exact codeword values, identity gradient w.r.t. z
        z_st = z_q.detach() + (z - z.detach())
        return QuantizeResult(z_st, z_q, indices)


def quantize(z: torch.Tensor, quantizer: VectorQuantizer):
    """Nearest-codeword quantization with the straight-through gradient contract."""
    res = quantizer(z)
    return res.z_st, res.indices


def vq_loss(r_norm, r_hat_norm, z, z_q, beta: float = 0.25, valid=None) -> dict:
    """Masked L1 reconstruction plus the two stop-gradient codebook terms.

    ``z_q`` must be the raw codeword tensor (QuantizeResult.z_q), so the
    beta-weighted term trains the codebook and the unweighted term commits the
    encoder. Returns the components and their sum under ``total``.
    """
    if valid is None:
        recon = (r_norm - r_hat_norm).abs().mean()
    else:
        mask = valid if isinstance(valid, torch.Tensor) else torch.from_numpy(valid)
        diff = (r_norm - r_hat_norm).abs() * mask
        recon = diff.sum() / mask.sum().clamp(min=1)
    codebook = beta * (z.detach() - z_q).square().mean()
    commitment = (z - z_q.detach()).square().mean()
    return {
        "recon": recon,
        "codebook": codebook,
        "commitment": commitment,
        "total": recon + codebook + commitment,
    }


class PatchDiscriminator(nn.Module):
    """Small patch classifier over normalized range images; outputs in (0, 1)."""

    def __init__(self, base_channels: int = 16):
        super().__init__()
        c = base_channels
        self.net = nn.Sequential(
            nn.Conv2d(1, c, 4, stride=2, padding=1),
            nn.LeakyReLU(0.2),
            nn.Conv2d(c, 2 * c, 4, stride=2, padding=1),
            nn.GroupNorm(4, 2 * c),
            nn.LeakyReLU(0.2),
            nn.Conv2d(2 * c, 1, 4, stride=1, padding=1),
        )

    def forward(self, r_norm: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.net(r_norm.unsqueeze(1)))


def adv_losses(r_norm, r_hat_norm, disc: PatchDiscriminator):
    """Discriminator and non-saturating generator losses with clamped probs."""
    p_real = disc(r_norm).clamp(ADV_PROB_EPS, 1 - ADV_PROB_EPS)
    p_fake = disc(r_hat_norm).clamp(ADV_PROB_EPS, 1 - ADV_PROB_EPS)
    d_loss = -(torch.log(p_real).mean() + torch.log1p(-p_fake).mean())
    g_loss = -torch.log(p_fake).mean()
    return d_loss, g_loss


class LidarTokenizer(nn.Module):
    """Encoder + quantizer + decoder wired to one sensor's range convention."""

    def __init__(
        self,
        r_min: float = 1.0,
        r_max: float = 70.0,
        latent_channels: int = 64,
        down_v: int = 4,
        down_h: int = 8,
        codebook_size: int = 512,
        beta: float = 0.25,
        base_channels: int = 24,
        d_state: int = 4,
        invalid_threshold: float = 0.98,
    ):
        super().__init__()
        self.r_min, self.r_max = r_min, r_max
        self.down_v, self.down_h = down_v, down_h
        self.invalid_threshold = invalid_threshold
        kw = dict(
            latent_channels=latent_channels,
            down_v=down_v,
            down_h=down_h,
            base_channels=base_channels,
            d_state=d_state,
        )
        self.encoder = RangeEncoder(**kw)
        self.decoder = RangeDecoder(**kw)
        self.quantizer = VectorQuantizer(codebook_size, latent_channels, beta)

    def encode_ranges(self, r_meters: torch.Tensor) -> torch.Tensor:
        """(B, H, W) meters -> (B, h, w, C) continuous latents."""
        if r_meters.shape[1] % self.down_v or r_meters.shape[2] % self.down_h:
            raise ValueError(
                f"image shape {tuple(r_meters.shape[1:])} not divisible by "
                f"downsample factors ({self.down_v}, {self.down_h})"
            )
        return self.encoder(normalize_ranges(r_meters, self.r_min, self.r_max))

    def decode_latent(self, z: torch.Tensor) -> torch.Tensor:
        """(B, h, w, C) -> (B, H, W) normalized ranges (unclamped)."""
        return self.decoder(z)

    def decode_to_meters(self, z: torch.Tensor) -> torch.Tensor:
        return denormalize_ranges(self.decode_latent(z), self.r_min, self.r_max)

    # numpy-facing conveniences over single range images

    def encode(self, img: RangeImage) -> np.ndarray:
        with torch.no_grad():
            t = torch.from_numpy(img.ranges.astype(np.float32)).unsqueeze(0)
            return self.encode_ranges(t)[0].numpy()

    def decode(self, z: np.ndarray) -> RangeImage:
        with torch.no_grad():
            meters = self.decode_to_meters(
                torch.from_numpy(z.astype(np.float32)).unsqueeze(0)
            )[0].numpy()
        valid = meters < self.invalid_threshold * self.r_max
        meters = np.where(valid, meters, self.r_max).astype(np.float32)
        return RangeImage(meters, valid)

    def reconstruct(self, img: RangeImage) -> RangeImage:
        with torch.no_grad():
            z = torch.from_numpy(self.encode(img)).unsqueeze(0)
            z_st, _, _ = self.quantizer(z)
        return self.decode(z_st[0].numpy())


@dataclass
class TokenizerTrainConfig:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 4e-4
    adv_weight: float = 0.1
    adv_warmup_frac: float = 0.5
    crop_w: int = 0                 # azimuth crop width; 0 trains on full width
    dead_code_interval: int = 1000
    data_init: bool = True          # seed the codebook from first-batch encodings
    seed: int = 0
    log_every: int = 50


def _sample_batch(ranges, valid, batch_size, crop_w, gen):
    n, _, w = ranges.shape
    idx = torch.randint(0, n, (batch_size,), generator=gen)
    r = ranges[idx]
    v = valid[idx]
    if crop_w and crop_w < w:
        out_r, out_v = [], []
        for b in range(batch_size):
            off = int(torch.randint(0, w, (1,), generator=gen))
            rolled_r = torch.roll(r[b], -off, dims=1)
            rolled_v = torch.roll(v[b], -off, dims=1)
            out_r.append(rolled_r[:, :crop_w])
            out_v.append(rolled_v[:, :crop_w])
        r, v = torch.stack(out_r), torch.stack(out_v)
    return r, v


def train_tokenizer(
    ranges: np.ndarray,
    valid: np.ndarray,
    model: LidarTokenizer,
    cfg: TokenizerTrainConfig,
    disc: PatchDiscriminator | None = None,
    callback=None,
) -> dict:
    """Alternating generator/discriminator training over (N, H, W) range frames.

    Returns a history dict of per-step loss components. Raises RuntimeError on
    a non-finite loss. With cfg.steps == 0 the parameters are left untouched.
    """
    ranges_t = torch.from_numpy(np.asarray(ranges, dtype=np.float32))
    valid_t = torch.from_numpy(np.asarray(valid, dtype=bool))
    gen = torch.Generator().manual_seed(cfg.seed)
    adv_start = int(cfg.adv_warmup_frac * cfg.steps)
    use_adv = cfg.adv_weight > 0
    if use_adv and disc is None:
        disc = PatchDiscriminator()
    opt_g = torch.optim.Adam(
        list(model.encoder.parameters())
        + list(model.decoder.parameters())
        + list(model.quantizer.parameters()),
        lr=cfg.lr,
    )
    opt_d = torch.optim.Adam(disc.parameters(), lr=cfg.lr) if use_adv else None

    k = model.quantizer.codebook_size
    last_used = np.zeros(k, dtype=np.int64)
    history = {"step": [], "total": [], "recon": [], "codebook": [],
               "commitment": [], "g_adv": [], "d_loss": [], "usage": []}

    for step in range(cfg.steps):
        r_m, v = _sample_batch(ranges_t, valid_t, cfg.batch_size, cfg.crop_w, gen)
        r_norm = normalize_ranges(r_m, model.r_min, model.r_max)
        if step == 0 and cfg.data_init:
            with torch.no_grad():
                flat = model.encoder(r_norm).reshape(-1, model.quantizer.embedding.shape[1])
                pick = torch.randint(0, flat.shape[0], (k,), generator=gen)
                noise = 0.01 * torch.randn(k, flat.shape[1], generator=gen)
                model.quantizer.embedding.copy_(flat[pick] + noise)
        z = model.encoder(r_norm)
        q = model.quantizer(z)
        r_hat = model.decoder(q.z_st)
        losses = vq_loss(r_norm, r_hat, z, q.z_q, model.quantizer.beta, v)
        g_total = losses["total"]
        g_adv = torch.zeros(())
        adv_active = use_adv and step >= adv_start
        if adv_active:
            _, g_adv = adv_losses(r_norm, r_hat, disc)
            g_total = g_total + cfg.adv_weight * g_adv
        if not torch.isfinite(g_total):
            raise RuntimeError(
                f"non-finite tokenizer loss at step {step}: "
                + ", ".join(f"{k_}={v_.item():.4g}" for k_, v_ in losses.items())
            )
        opt_g.zero_grad()
        g_total.backward()
        opt_g.step()

        d_val = 0.0
        if adv_active:
            d_loss, _ = adv_losses(r_norm, r_hat.detach(), disc)
            opt_d.zero_grad()
            d_loss.backward()
            opt_d.step()
            d_val = d_loss.item()

        used = np.unique(q.indices.numpy())
        last_used[used] = step
        if cfg.dead_code_interval and step > 0 and step % cfg.dead_code_interval == 0:
            dead = np.flatnonzero(step - last_used >= cfg.dead_code_interval)
            if dead.size:
                flat = z.detach().reshape(-1, z.shape[-1])
                pick = torch.randint(0, flat.shape[0], (dead.size,), generator=gen)
                with torch.no_grad():
                    model.quantizer.embedding[dead] = flat[pick]
                last_used[dead] = step

        history["step"].append(step)
        history["total"].append(g_total.item())
        history["recon"].append(losses["recon"].item())
        history["codebook"].append(losses["codebook"].item())
        history["commitment"].append(losses["commitment"].item())
        history["g_adv"].append(float(g_adv))
        history["d_loss"].append(d_val)
        history["usage"].append(int(used.size))
        if callback and step % cfg.log_every == 0:
            callback(step, history)
    return history
