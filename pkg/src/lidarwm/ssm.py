"""Selective state-space scan primitive and the block built around it.

The recurrence, per channel d and state n:

    h_t = exp(delta_t * A) * h_{t-1} + (delta_t * B_t) * x_t
    y_t = C_t . h_t + D_skip * x_t

with input-dependent delta/B/C. ``selective_scan_sequential`` is the exact
reference; ``selective_scan_parallel`` computes the same recurrence with a
Hillis-Steele doubling scan over (decay, increment) pairs and is the path used
in practice. Token order is ring-major: all azimuth columns of laser row 0,
then row 1, and so on (frames stack in front for 3-D grids).
"""

from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F


def _discretize(u, delta, A, B):
    # u, delta: (Bt, L, D); A: (D, N); B: (Bt, L, N)
    dA = torch.exp(delta.unsqueeze(-1) * A)                      # (Bt, L, D, N)
    dBx = delta.unsqueeze(-1) * B.unsqueeze(2) * u.unsqueeze(-1)  # (Bt, L, D, N)
    return dA, dBx


def selective_scan_sequential(u, delta, A, B, C, D_skip, h0=None):
    """Reference scan, one step at a time.

    Shapes: u/delta (Bt, L, D), A (D, N) with non-positive entries, B/C
    (Bt, L, N), D_skip (D,), optional initial state h0 (Bt, D, N).
    Returns (y, h_last) with y shaped like u.
    """
    Bt, L, D = u.shape
    N = A.shape[1]
    if A.shape != (D, N) or B.shape != (Bt, L, N) or C.shape != (Bt, L, N):
        raise ValueError(
            f"shape mismatch: u {tuple(u.shape)}, A {tuple(A.shape)}, "
            f"B {tuple(B.shape)}, C {tuple(C.shape)}"
        )
    dA, dBx = _discretize(u, delta, A, B)
    h = torch.zeros(Bt, D, N, dtype=u.dtype, device=u.device) if h0 is None else h0
    ys = []
    for t in range(L):
        h = dA[:, t] * h + dBx[:, t]
        ys.append(torch.einsum("bdn,bn->bd", h, C[:, t]))
    y = torch.stack(ys, dim=1) + u * D_skip
    return y, h


def _doubling_scan(a, b):
    """Inclusive scan of h_t = a_t * h_{t-1} + b_t along dim 1 (h_0 = 0)."""
    L = a.shape[1]
    step = 1
    while step < L:
        a_prev = torch.cat([torch.ones_like(a[:, :step]), a[:, :-step]], dim=1)
        b_prev = torch.cat([torch.zeros_like(b[:, :step]), b[:, :-step]], dim=1)
        b = b + a * b_prev
        a = a * a_prev
        step *= 2
    return b


def selective_scan_parallel(u, delta, A, B, C, D_skip, h0=None):
    """Same contract as :func:`selective_scan_sequential` via associative scan."""
    Bt, L, D = u.shape
    N = A.shape[1]
    if A.shape != (D, N) or B.shape != (Bt, L, N) or C.shape != (Bt, L, N):
        raise ValueError(
            f"shape mismatch: u {tuple(u.shape)}, A {tuple(A.shape)}, "
            f"B {tuple(B.shape)}, C {tuple(C.shape)}"
        )
    dA, dBx = _discretize(u, delta, A, B)
    if h0 is not None:
        # fold the carried state into the first increment
        dBx = torch.cat([dA[:, :1] * h0.unsqueeze(1) + dBx[:, :1], dBx[:, 1:]], dim=1)
    h = _doubling_scan(dA, dBx)                                   # (Bt, L, D, N)
    y = torch.einsum("bldn,bln->bld", h, C) + u * D_skip
    return y, h[:, -1]


class MambaBlock(nn.Module):
    """Gated selective-scan block: in-proj, causal depthwise conv, scan, gate, out-proj.

    Diagonal real A (stored as log of its negated entries), softplus delta,
    expansion factor 2 and conv width 4 by default. The residual add makes the
    block an identity map when all weights are zero. ``bidirectional`` adds a
    reversed pass with the same weights and averages the two scans.
    """

    def __init__(
        self,
        d_model: int,
        d_state: int = 8,
        expand: int = 2,
        d_conv: int = 4,
        dt_rank: int | None = None,
        bidirectional: bool = False,
        parallel: bool = True,
    ):
        super().__init__()
        self.d_model = d_model
        self.d_state = d_state
        self.d_inner = expand * d_model
        self.dt_rank = dt_rank or max(1, math.ceil(d_model / 16))
        self.bidirectional = bidirectional
        self.parallel = parallel

        self.in_proj = nn.Linear(d_model, 2 * self.d_inner, bias=False)
        self.conv = nn.Conv1d(
            self.d_inner, self.d_inner, d_conv, groups=self.d_inner, padding=d_conv - 1
        )
        self.x_proj = nn.Linear(self.d_inner, self.dt_rank + 2 * d_state, bias=False)
        self.dt_proj = nn.Linear(self.dt_rank, self.d_inner, bias=True)
        self.out_proj = nn.Linear(self.d_inner, d_model, bias=False)

        A = torch.arange(1, d_state + 1, dtype=torch.float32).repeat(self.d_inner, 1)
        self.A_log = nn.Parameter(torch.log(A))
        self.D_skip = nn.Parameter(torch.ones(self.d_inner))

        # softplus(dt) lands in roughly [1e-3, 1e-1] at init
        with torch.no_grad():
            dt = torch.exp(
                torch.rand(self.d_inner) * (math.log(0.1) - math.log(1e-3))
                + math.log(1e-3)
            )
            self.dt_proj.bias.copy_(dt + torch.log(-torch.expm1(-dt)))

    def _scan(self, x):
        dbc = self.x_proj(x)
        dt, Bm, Cm = torch.split(
            dbc, [self.dt_rank, self.d_state, self.d_state], dim=-1
        )
        delta = F.softplus(self.dt_proj(dt))
        A = -torch.exp(self.A_log)
        scan = selective_scan_parallel if self.parallel else selective_scan_sequential
        y, _ = scan(x, delta, A, Bm, Cm, self.D_skip)
        return y

    def inner(self, x: torch.Tensor) -> torch.Tensor:
        """The block without its residual; callers that pre-norm add their own."""
        L = x.shape[1]
        xz = self.in_proj(x)
        x_in, z = xz.chunk(2, dim=-1)
        x_in = self.conv(x_in.transpose(1, 2))[..., :L].transpose(1, 2)
        x_in = F.silu(x_in)
        y = self._scan(x_in)
        if self.bidirectional:
            y = 0.5 * (y + self._scan(x_in.flip(1)).flip(1))
        return self.out_proj(y * F.silu(z))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (Bt, L, d_model)
        return x + self.inner(x)


class MambaLayer(nn.Module):
    """Pre-norm MambaBlock followed by a pre-norm MLP, both residual."""

    def __init__(self, d_model: int, d_state: int = 8, mlp_ratio: int = 2, **kw):
        super().__init__()
        self.norm1 = nn.LayerNorm(d_model)
        self.mixer = MambaBlock(d_model, d_state=d_state, **kw)
        self.norm2 = nn.LayerNorm(d_model)
        hidden = mlp_ratio * d_model
        self.mlp = nn.Sequential(
            nn.Linear(d_model, hidden), nn.SiLU(), nn.Linear(hidden, d_model)
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.mixer.inner(self.norm1(x))
        return x + self.mlp(self.norm2(x))
